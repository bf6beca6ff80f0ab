"""Training-data machinery: patch masks, patch-level mixing, the cache of
diffusion-generated variants, and classical augmentation baselines.

The patch mask draws one uniform value per grid cell and sets cells with a
draw strictly below alpha to 1, then nearest-neighbor upsamples to the image
shape (ceiling grid, cropped for non-divisible sizes).  Mixing is the convex
patchwise combination m*x0 + (1-m)*xi, so alpha = 1 reproduces the original
image bit-for-bit and alpha = 0 uses generated content only.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .checkpoint import Checkpoint, checkpoint_digest
from .conditioning import DEFAULT_AUG_TEXTS, Vocabulary, edges_from_mask, encode_prompt, extract_edges
from .datagen import SampleRecord, load_gray_png, quantize, save_gray_png
from .diffusion import ancestral_sample, schedule_from_spec
from .errors import ConfigError, StageError, ValidationError


# ---------------------------------------------------------------------------
# patch masks and mixing


@dataclass(frozen=True)
class PatchMask:
    grid: np.ndarray  # binary, image shape
    alpha: float
    patch_size: int
    grid_dims: tuple


def generate_random_patch(alpha, patch_size, image_shape, rng):
    """Random binary patch mask: P(cell = 1) = alpha, constant per cell."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    h, w = image_shape
    if not 1 <= patch_size <= max(h, w):
        raise ValueError(f"patch_size must be in [1, {max(h, w)}], got {patch_size}")
    grid_dims = (math.ceil(h / patch_size), math.ceil(w / patch_size))
    draws = rng.uniform(0.0, 1.0, size=grid_dims)
    cells = (draws < alpha).astype(np.float64)
    full = np.repeat(np.repeat(cells, patch_size, axis=0), patch_size, axis=1)
    return PatchMask(grid=full[:h, :w], alpha=float(alpha), patch_size=int(patch_size),
                     grid_dims=grid_dims)


def mix(x0, xi, mask: PatchMask | np.ndarray):
    """Patchwise combination m*x0 + (1-m)*xi."""
    m = mask.grid if isinstance(mask, PatchMask) else np.asarray(mask, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if not (x0.shape == xi.shape == m.shape):
        raise ValueError(f"shape mismatch: x0 {x0.shape}, xi {xi.shape}, mask {m.shape}")
    return m * x0 + (1.0 - m) * xi


# ---------------------------------------------------------------------------
# diffusion-variant cache


@dataclass
class CacheEntry:
    case_id: str
    variants: np.ndarray  # (n, H, W) in [0, 1]
    aug_tokens: list
    seed_key: list


@dataclass
class AugmentationCache:
    n: int
    entries: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __contains__(self, case_id):
        return case_id in self.entries

    def variants(self, case_id):
        try:
            return self.entries[case_id].variants
        except KeyError:
            raise ValidationError(f"cache has no variants for case {case_id!r}") from None

    def check_covers(self, records):
        missing = [r.case_id for r in records if r.case_id not in self.entries]
        if missing:
            raise ValidationError(f"cache is missing variants for: {missing}")


def _case_seed(master_seed, case_id):
    digest = hashlib.sha256(case_id.encode("utf-8")).digest()
    return [int(master_seed), int.from_bytes(digest[:8], "little")]


def build_augmentation_cache(records, ckpt: Checkpoint, n, aug_texts=DEFAULT_AUG_TEXTS,
                             seed=0, cache_dir=None, vocab: Vocabulary | None = None):
    """Generate n diffusion variants per record, conditioned on the record's
    mask boundary and its prompt extended with one cycled augmentation text.

    Sampling is batched per image with a per-image seed derived from
    (master seed, case id), so the cache content does not depend on record
    order and rebuilds are identical.
    """
    from .denoiser import make_denoiser_fn, model_from_checkpoint

    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if ckpt.stage != "finetuned":
        raise StageError(
            f"augmentation cache needs a finetuned checkpoint, got {ckpt.stage!r}",
            missing_stage="finetune",
        )
    vocab = vocab or Vocabulary.default()
    model = model_from_checkpoint(ckpt, vocab)
    table = model.export_embedding_table()
    schedule = schedule_from_spec(ckpt.schedule_spec)
    aug_texts = list(aug_texts)

    cache = AugmentationCache(
        n=int(n),
        meta={
            "seed": int(seed),
            "n": int(n),
            "aug_texts": aug_texts,
            "checkpoint_digest": checkpoint_digest(ckpt),
            "schedule": dict(ckpt.schedule_spec),
        },
    )
    for rec in records:
        if rec.mask is None:
            raise ValidationError(f"{rec.case_id}: cache building requires masks")
        edge = edges_from_mask(rec.mask)
        tokens = [aug_texts[i % len(aug_texts)] for i in range(n)] if aug_texts else [None] * n
        text = np.stack([
            encode_prompt(rec.triplet.with_aug(tok) if tok else rec.triplet, table)
            for tok in tokens
        ])
        fn = make_denoiser_fn(model, text, np.repeat(edge[None], n, axis=0))
        seed_key = _case_seed(seed, rec.case_id)
        rng = np.random.default_rng(seed_key)
        samples = ancestral_sample(fn, None, schedule, (n,) + rec.image.shape, rng)
        variants = quantize(samples)
        cache.entries[rec.case_id] = CacheEntry(
            case_id=rec.case_id, variants=variants, aug_tokens=tokens, seed_key=seed_key
        )

    if cache_dir is not None:
        save_augmentation_cache(cache, records, cache_dir)
    return cache


def save_augmentation_cache(cache: AugmentationCache, records, cache_dir):
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.case_id: r for r in records}
    cases = {}
    for case_id, entry in cache.entries.items():
        case_dir = cache_dir / case_id
        save_gray_png(by_id[case_id].image, case_dir / "original.png")
        paths = []
        for i in range(cache.n):
            rel = f"{case_id}/variant_{i:03d}.png"
            save_gray_png(entry.variants[i], cache_dir / rel)
            paths.append(rel)
        cases[case_id] = {
            "variants": paths,
            "aug_tokens": entry.aug_tokens,
            "seed_key": entry.seed_key,
        }
    with open(cache_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump({**cache.meta, "cases": cases}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_augmentation_cache(cache_dir):
    cache_dir = Path(cache_dir)
    manifest_path = cache_dir / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no cache manifest under {cache_dir}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    cases = payload.pop("cases")
    cache = AugmentationCache(n=int(payload["n"]), meta=payload)
    for case_id, info in cases.items():
        variants = np.stack([load_gray_png(cache_dir / rel) for rel in info["variants"]])
        cache.entries[case_id] = CacheEntry(
            case_id=case_id, variants=variants,
            aug_tokens=info["aug_tokens"], seed_key=info["seed_key"],
        )
    return cache


# ---------------------------------------------------------------------------
# classical augmentation baselines

CLASSIC_KINDS = (
    "contrast", "gamma", "brightness", "noise", "resolution",
    "mirror", "rotate", "scale", "deep-stack",
)

# Composition order for deep-stack (spatial first, then intensity).
DEEP_STACK_ORDER = (
    "mirror", "rotate", "scale", "resolution", "contrast", "brightness", "gamma", "noise",
)


@dataclass(frozen=True)
class ClassicTransformSpec:
    """One classical augmentation with its parameter ranges."""

    kind: str
    rotate_degrees: float = 15.0
    scale_range: tuple = (0.85, 1.15)
    contrast_limit: float = 0.2
    brightness_limit: float = 0.2
    gamma_range: tuple = (0.7, 1.5)
    noise_sigma: float = 0.05
    resolution_range: tuple = (0.5, 1.0)
    stack_probability: float = 0.5

    def __post_init__(self):
        if self.kind not in CLASSIC_KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r} (choose from {CLASSIC_KINDS})")


def _nearest_resize(arr, shape):
    ys = np.minimum((np.arange(shape[0]) * arr.shape[0] / shape[0]).astype(int), arr.shape[0] - 1)
    xs = np.minimum((np.arange(shape[1]) * arr.shape[1] / shape[1]).astype(int), arr.shape[1] - 1)
    return arr[np.ix_(ys, xs)]


def _apply_one(image, mask, kind, spec: ClassicTransformSpec, rng):
    if kind == "contrast":
        factor = 1.0 + rng.uniform(-spec.contrast_limit, spec.contrast_limit)
        center = image.mean()
        image = (image - center) * factor + center
    elif kind == "brightness":
        image = image + rng.uniform(-spec.brightness_limit, spec.brightness_limit)
    elif kind == "gamma":
        image = np.clip(image, 0.0, 1.0) ** rng.uniform(*spec.gamma_range)
    elif kind == "noise":
        sigma = rng.uniform(0.0, spec.noise_sigma)
        image = image + sigma * rng.standard_normal(image.shape)
    elif kind == "resolution":
        factor = rng.uniform(*spec.resolution_range)
        small_shape = (max(1, round(image.shape[0] * factor)),
                       max(1, round(image.shape[1] * factor)))
        small = ndimage.zoom(image, (small_shape[0] / image.shape[0],
                                     small_shape[1] / image.shape[1]), order=1)
        image = _nearest_resize(small, image.shape)
        if mask is not None:
            small_mask = _nearest_resize(mask, small_shape)
            mask = _nearest_resize(small_mask, image.shape)
    elif kind == "mirror":
        axis = int(rng.integers(2))
        image = np.flip(image, axis=axis).copy()
        if mask is not None:
            mask = np.flip(mask, axis=axis).copy()
    elif kind == "rotate":
        angle = rng.uniform(-spec.rotate_degrees, spec.rotate_degrees)
        image = ndimage.rotate(image, angle, reshape=False, order=1, mode="nearest")
        if mask is not None:
            mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="nearest")
    elif kind == "scale":
        factor = rng.uniform(*spec.scale_range)
        center = (np.asarray(image.shape) - 1) / 2.0
        matrix = np.diag([1.0 / factor, 1.0 / factor])
        offset = center - center / factor
        image = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="nearest")
        if mask is not None:
            mask = ndimage.affine_transform(mask.astype(np.float64), matrix, offset=offset,
                                            order=0, mode="nearest")
    else:
        raise ConfigError(f"unknown transform kind {kind!r}")
    return image, mask


def apply_classic(record: SampleRecord, spec: ClassicTransformSpec, rng):
    """Transformed copy of a record.  Spatial kinds move image and mask
    together; intensity kinds touch the image only; deep-stack composes every
    kind in DEEP_STACK_ORDER, each applied with probability 0.5."""
    image = np.asarray(record.image, dtype=np.float64)
    mask = None if record.mask is None else np.asarray(record.mask)

    if spec.kind == "deep-stack":
        for kind in DEEP_STACK_ORDER:
            if rng.uniform() < spec.stack_probability:
                image, mask = _apply_one(image, mask, kind, spec, rng)
    else:
        image, mask = _apply_one(image, mask, spec.kind, spec, rng)

    image = np.clip(image, 0.0, 1.0)
    if mask is not None:
        mask = (np.asarray(mask) > 0.5).astype(np.uint8)
    return SampleRecord(
        case_id=record.case_id,
        image=image,
        triplet=record.triplet,
        edge=extract_edges(image),
        split=record.split,
        mask=mask,
        source_volume_id=record.source_volume_id,
        spacing=record.spacing,
    )
