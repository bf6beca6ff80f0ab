"""Synthetic dataset generation and external dataset ingestion.

The corpus generator emits small grayscale images with pseudo-modalities
(distinct intensity/texture/noise profiles), pseudo-organs (shape families)
and pseudo-pathologies, each labeled with a prompt triplet.  The
segmentation-task generator additionally produces binary masks.  Everything
is a pure function of (spec, seed) and round-trips through 8-bit PNG files
byte-identically because images are quantized to 8 bits at generation time.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .conditioning import PromptTriplet, Vocabulary, extract_edges
from .errors import ConfigError, ValidationError

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# records and manifests


@dataclass
class SampleRecord:
    """One image (optionally with mask) plus its conditioning inputs."""

    case_id: str
    image: np.ndarray
    triplet: PromptTriplet
    edge: np.ndarray
    split: str
    mask: np.ndarray | None = None
    source_volume_id: str | None = None
    spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        if self.image.shape != self.edge.shape:
            raise ValidationError(
                f"{self.case_id}: image {self.image.shape} vs edge {self.edge.shape}"
            )
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValidationError(
                    f"{self.case_id}: image {self.image.shape} vs mask {self.mask.shape}"
                )
            vals = np.unique(self.mask)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValidationError(f"{self.case_id}: mask is not binary ({vals[:8]})")


@dataclass
class DatasetManifest:
    """Ordered case list with generation provenance."""

    kind: str
    seed: int | None
    records: list = field(default_factory=list)
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.case_id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate case ids in manifest")
        by_volume = {}
        for r in self.records:
            if r.source_volume_id is not None:
                by_volume.setdefault(r.source_volume_id, set()).add(r.split)
        for vol, splits in by_volume.items():
            if len(splits) > 1:
                raise ValidationError(f"volume {vol!r} appears in several splits: {sorted(splits)}")

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# 8-bit image I/O (PNG)


def quantize(image):
    """Snap a [0,1] float image to the 8-bit grid it will be stored on."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def save_gray_png(image, path):
    """Store a [0,1] image as 8-bit grayscale PNG."""
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def load_gray_png(path):
    """Load an 8-bit grayscale PNG into a [0,1] float array."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# shape rasterization (signed distances in pixel units, 1-pixel feather)


def _coords(size):
    ys, xs = np.mgrid[0:size, 0:size]
    return ys.astype(np.float64), xs.astype(np.float64)


def _sd_ellipse(size, cy, cx, a, b, theta):
    ys, xs = _coords(size)
    u = (xs - cx) * math.cos(theta) + (ys - cy) * math.sin(theta)
    v = -(xs - cx) * math.sin(theta) + (ys - cy) * math.cos(theta)
    d = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return (d - 1.0) * min(a, b)


def _sd_blob(size, cy, cx, r0, coeffs):
    ys, xs = _coords(size)
    dy, dx = ys - cy, xs - cx
    dist = np.hypot(dy, dx)
    phi = np.arctan2(dy, dx)
    radius = np.full_like(dist, r0)
    for k, (amp, phase) in enumerate(coeffs, start=2):
        radius += r0 * amp * np.cos(k * phi + phase)
    return dist - radius


def _sd_ring(size, cy, cx, r_in, r_out):
    ys, xs = _coords(size)
    dist = np.hypot(ys - cy, xs - cx)
    return np.maximum(dist - r_out, r_in - dist)


def _sd_polygon(size, vertices):
    # Convex polygon as intersection of half planes.  Vertices are ordered by
    # increasing angle around the centroid, which in (row, col) coordinates
    # makes the outward edge normal (-ex, ey) after normalization.
    ys, xs = _coords(size)
    sd = np.full((size, size), -np.inf)
    n = len(vertices)
    for i in range(n):
        y0, x0 = vertices[i]
        y1, x1 = vertices[(i + 1) % n]
        ey, ex = y1 - y0, x1 - x0
        norm = math.hypot(ey, ex)
        ny, nx = -ex / norm, ey / norm
        sd = np.maximum(sd, (ys - y0) * ny + (xs - x0) * nx)
    return sd


def _sample_shape(organ, size, rng):
    """Signed distance field for one random instance of a shape family."""
    cy = size / 2 + rng.uniform(-0.12, 0.12) * size
    cx = size / 2 + rng.uniform(-0.12, 0.12) * size
    if organ == "ellipse":
        a = rng.uniform(0.14, 0.3) * size
        b = rng.uniform(0.14, 0.3) * size
        return _sd_ellipse(size, cy, cx, a, b, rng.uniform(0, math.pi))
    if organ == "blob":
        r0 = rng.uniform(0.16, 0.28) * size
        coeffs = [(rng.uniform(0.05, 0.2), rng.uniform(0, 2 * math.pi)) for _ in range(3)]
        return _sd_blob(size, cy, cx, r0, coeffs)
    if organ == "ring":
        r_out = rng.uniform(0.2, 0.33) * size
        return _sd_ring(size, cy, cx, r_out * rng.uniform(0.45, 0.65), r_out)
    if organ == "polygon":
        k = int(rng.integers(5, 9))
        # Points on a circle are always in convex position; jittered regular
        # angles keep the polygon from degenerating into a sliver.
        angles = np.sort(2 * math.pi * np.arange(k) / k + rng.uniform(-0.3, 0.3, size=k))
        radius = rng.uniform(0.18, 0.3) * size
        verts = [(cy + radius * math.sin(t), cx + radius * math.cos(t)) for t in angles]
        return _sd_polygon(size, verts)
    raise ConfigError(f"unknown organ family {organ!r}")


# Per-case appearance is drawn from these ranges.  The spread is deliberate:
# a small training split cannot cover the appearance family, which is the
# regime where resampled-appearance augmentation has something to offer.
MODALITY_PROFILES = {
    "xray": {"base": (0.22, 0.36), "fg_delta": (0.3, 0.45), "noise": (0.015, 0.03),
             "texture": "gradient"},
    "echo": {"base": (0.35, 0.60), "fg_delta": (0.2, 0.45), "noise": (0.03, 0.08),
             "texture": "speckle"},
    "scan": {"base": (0.60, 0.76), "fg_delta": (-0.4, -0.25), "noise": (0.01, 0.025),
             "texture": "smooth"},
}

FG_FRACTION_RANGE = (0.05, 0.40)


def _background(size, profile, rng):
    img = np.full((size, size), rng.uniform(*profile["base"]))
    texture = profile["texture"]
    if texture == "gradient":
        direction = rng.uniform(0, 2 * math.pi)
        ys, xs = _coords(size)
        ramp = (ys * math.sin(direction) + xs * math.cos(direction)) / size
        img += rng.uniform(0.05, 0.12) * (ramp - ramp.mean())
    elif texture == "speckle":
        amp = rng.uniform(0.06, 0.16)
        img += amp * gaussian_filter(rng.standard_normal((size, size)), rng.uniform(0.7, 2.0))
        ys, _ = _coords(size)
        img -= rng.uniform(0.0, 0.12) * (ys / size - 0.5)  # depth attenuation
    elif texture == "smooth":
        amp = rng.uniform(0.08, 0.16)
        img += amp * gaussian_filter(rng.standard_normal((size, size)), rng.uniform(2.0, 4.0))
    return img


def _render_case(size, modality, organ, category, rng):
    """One (image, mask) pair; resamples shape parameters until the
    foreground fraction falls inside FG_FRACTION_RANGE."""
    profile = MODALITY_PROFILES[modality]
    for _ in range(200):
        sd = _sample_shape(organ, size, rng)
        mask = sd < 0
        frac = mask.mean()
        if FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]:
            break
    else:
        raise RuntimeError(f"could not sample a {organ!r} within the foreground budget")

    alpha = np.clip(0.5 - sd, 0.0, 1.0)  # 1-pixel feather
    delta = rng.uniform(*profile["fg_delta"])
    img = _background(size, profile, rng) + delta * alpha

    # Category structure scales with the case's own contrast so low-contrast
    # cases keep a distinguishable interior.
    if category == "inclusion":
        r_inc = rng.uniform(0.05, 0.09) * size
        off = rng.uniform(-0.08, 0.08, size=2) * size
        sd_inc = _sd_ellipse(size, size / 2 + off[0], size / 2 + off[1], r_inc, r_inc, 0.0)
        inc_alpha = np.clip(0.5 - sd_inc, 0.0, 1.0) * mask
        img += -rng.uniform(0.5, 0.75) * delta * inc_alpha
    elif category == "rim thickening":
        width = rng.uniform(1.5, 2.5)
        band = np.clip(1.0 - np.abs(sd) / width, 0.0, 1.0)
        img += rng.uniform(0.4, 0.6) * delta * band

    img += rng.uniform(*profile["noise"]) * rng.standard_normal((size, size))
    return quantize(img), mask.astype(np.uint8)


def _assign_tokens(tokens, n, rng):
    """Random token per item, with the first len(tokens) items cycling through
    every token so small corpora still cover the vocabulary."""
    out = [tokens[i] if i < len(tokens) else tokens[rng.integers(len(tokens))] for i in range(n)]
    return out


def _split_for_index(i, n_train, n_val):
    if i < n_train:
        return "train"
    return "val" if i < n_train + n_val else "test"


# ---------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class CorpusSpec:
    """Settings for the unlabeled pretraining corpus."""

    size: int = 2000
    image_size: int = 32
    train_fraction: float = 0.9
    val_fraction: float = 0.05

    def __post_init__(self):
        if self.size < 1 or self.image_size < 8:
            raise ConfigError("corpus size must be >= 1 and image_size >= 8")
        if not 0 < self.train_fraction <= 1 or self.val_fraction < 0:
            raise ConfigError("invalid split fractions")


@dataclass(frozen=True)
class SegTaskSpec:
    """Settings for the labeled segmentation task."""

    size: int = 32
    image_size: int = 32
    modality: str = "echo"
    organ: str | None = "blob"
    category: str | None = None  # None = random over the vocabulary
    n_train: int | None = None  # None = 50% of size (16 for the default 32)
    n_val: int | None = None  # None = 25% of size (8 for the default 32)

    def __post_init__(self):
        if self.size < 1 or self.image_size < 8:
            raise ConfigError("task size must be >= 1 and image_size >= 8")
        if self.n_train is None:
            object.__setattr__(self, "n_train", max(1, int(round(0.5 * self.size))))
        if self.n_val is None:
            object.__setattr__(self, "n_val", int(round(0.25 * self.size)))
        if self.n_train + self.n_val > self.size:
            raise ConfigError("n_train + n_val exceeds the task size")


def _as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def synth_corpus(spec: CorpusSpec | None = None, rng=0, vocab: Vocabulary | None = None):
    """Generate the unlabeled pretraining corpus (no masks)."""
    spec = spec or CorpusSpec()
    vocab = vocab or Vocabulary.default()
    rng = _as_generator(rng)
    seed_note = int(rng.integers(2**31))  # provenance only
    modalities = _assign_tokens(vocab.modalities, spec.size, rng)
    organs = _assign_tokens(vocab.organs, spec.size, rng)
    categories = _assign_tokens(vocab.categories, spec.size, rng)
    item_rngs = rng.spawn(spec.size)

    n_train = int(round(spec.train_fraction * spec.size))
    n_val = int(round(spec.val_fraction * spec.size))
    records = []
    for i in range(spec.size):
        img, _ = _render_case(spec.image_size, modalities[i], organs[i], categories[i], item_rngs[i])
        edge = quantize(extract_edges(img))
        triplet = PromptTriplet(modalities[i], organs[i], categories[i]).validate(vocab)
        records.append(
            SampleRecord(
                case_id=f"corpus_{i:05d}",
                image=img,
                triplet=triplet,
                edge=edge,
                split=_split_for_index(i, n_train, n_val),
            )
        )
    return DatasetManifest(kind="corpus", seed=seed_note, records=records, spec=vars(spec).copy())


def synth_seg_task(spec: SegTaskSpec | None = None, rng=0, vocab: Vocabulary | None = None):
    """Generate the labeled segmentation task (image + binary mask pairs)."""
    spec = spec or SegTaskSpec()
    vocab = vocab or Vocabulary.default()
    rng = _as_generator(rng)
    seed_note = int(rng.integers(2**31))
    organs = (
        [spec.organ] * spec.size if spec.organ else _assign_tokens(vocab.organs, spec.size, rng)
    )
    categories = (
        [spec.category] * spec.size
        if spec.category
        else _assign_tokens(vocab.categories, spec.size, rng)
    )
    item_rngs = rng.spawn(spec.size)

    records = []
    for i in range(spec.size):
        img, mask = _render_case(spec.image_size, spec.modality, organs[i], categories[i], item_rngs[i])
        edge = quantize(extract_edges(img))
        triplet = PromptTriplet(spec.modality, organs[i], categories[i]).validate(vocab)
        records.append(
            SampleRecord(
                case_id=f"seg_{i:03d}",
                image=img,
                mask=mask,
                triplet=triplet,
                edge=edge,
                split=_split_for_index(i, spec.n_train, spec.n_val),
            )
        )
    return DatasetManifest(kind="segmentation", seed=seed_note, records=records, spec=vars(spec).copy())


# ---------------------------------------------------------------------------
# persistence


def save_manifest(manifest: DatasetManifest, root):
    """Write images/masks/edges as PNGs plus a manifest.json index."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cases = []
    for r in manifest.records:
        image_rel = f"images/{r.case_id}.png"
        edge_rel = f"edges/{r.case_id}.png"
        save_gray_png(r.image, root / image_rel)
        save_gray_png(r.edge, root / edge_rel)
        mask_rel = None
        if r.mask is not None:
            mask_rel = f"masks/{r.case_id}.png"
            save_gray_png(r.mask.astype(np.float64), root / mask_rel)
        cases.append(
            {
                "case_id": r.case_id,
                "split": r.split,
                "image": image_rel,
                "mask": mask_rel,
                "edge": edge_rel,
                "modality": r.triplet.modality,
                "organ": r.triplet.organ,
                "category": r.triplet.category,
                "aug_texts": list(r.triplet.aug_texts),
                "source_volume_id": r.source_volume_id,
                "spacing": list(r.spacing),
            }
        )
    payload = {
        "kind": manifest.kind,
        "seed": manifest.seed,
        "spec": manifest.spec,
        "cases": cases,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return root / "manifest.json"


def load_manifest(root):
    """Load a saved dataset; verifies every referenced file decodes."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no manifest.json under {root}")
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    records = []
    for case in payload["cases"]:
        image = load_gray_png(root / case["image"])
        edge = load_gray_png(root / case["edge"])
        mask = None
        if case["mask"]:
            mask = (load_gray_png(root / case["mask"]) >= 0.5).astype(np.uint8)
        triplet = PromptTriplet(
            case["modality"], case["organ"], case["category"], tuple(case["aug_texts"])
        )
        records.append(
            SampleRecord(
                case_id=case["case_id"],
                image=image,
                mask=mask,
                triplet=triplet,
                edge=edge,
                split=case["split"],
                source_volume_id=case.get("source_volume_id"),
                spacing=tuple(case.get("spacing", (1.0, 1.0))),
            )
        )
    return DatasetManifest(
        kind=payload["kind"], seed=payload.get("seed"), records=records, spec=payload.get("spec", {})
    )


# ---------------------------------------------------------------------------
# external ingestion


@dataclass(frozen=True)
class IngestLayout:
    """Directory conventions for external 2D image+mask datasets.

    Expected layout: <root>/<images_dir>/NAME.png and
    <root>/<masks_dir>/NAME.png with matching names; 8-bit grayscale images;
    mask values restricted to {0, 1, 255} (255 binarizes to 1).  When NAME
    contains ``volume_delimiter`` the prefix becomes the source volume id,
    which keeps slices of one volume in one split/fold.  Optional spacing
    sidecar: one "volume_id: sy sx" line per volume ("default" applies to
    the rest).
    """

    images_dir: str = "images"
    masks_dir: str = "masks"
    volume_delimiter: str = "_"
    spacing_file: str = "spacing.txt"
    triplet: PromptTriplet = PromptTriplet("scan", "blob", "normal")


def _parse_spacing_file(path):
    table = {}
    if not path.exists():
        return table
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'name: sy sx'")
            name, _, values = line.partition(":")
            parts = values.split()
            if len(parts) != 2:
                raise ValidationError(f"{path}:{lineno}: expected two spacing values")
            table[name.strip()] = (float(parts[0]), float(parts[1]))
    return table


def ingest_external(root, layout: IngestLayout | None = None):
    """Build a manifest from an on-disk image+mask directory pair."""
    layout = layout or IngestLayout()
    root = Path(root)
    images_dir = root / layout.images_dir
    masks_dir = root / layout.masks_dir
    image_paths = sorted(images_dir.glob("*.png")) if images_dir.exists() else []
    mask_paths = sorted(masks_dir.glob("*.png")) if masks_dir.exists() else []

    if not image_paths and not mask_paths:
        warnings.warn(f"no cases found under {root}", stacklevel=2)
        return DatasetManifest(kind="external", seed=None, records=[], spec={"root": str(root)})

    image_names = {p.stem for p in image_paths}
    mask_names = {p.stem for p in mask_paths}
    problems = []
    for name in sorted(image_names - mask_names):
        problems.append(f"image without mask: {name}")
    for name in sorted(mask_names - image_names):
        problems.append(f"mask without image: {name}")

    spacing_table = _parse_spacing_file(root / layout.spacing_file)
    default_spacing = spacing_table.get("default", (1.0, 1.0))

    records = []
    for path in image_paths:
        name = path.stem
        if name not in mask_names:
            continue
        try:
            image = load_gray_png(path)
        except Exception as exc:
            problems.append(f"undecodable image: {path.name} ({exc})")
            continue
        with Image.open(masks_dir / f"{name}.png") as handle:
            raw_mask = np.asarray(handle.convert("L"))
        values = set(np.unique(raw_mask).tolist())
        if not values <= {0, 1, 255}:
            problems.append(f"non-binary mask {name}: values {sorted(values)[:8]}")
            continue
        mask = (raw_mask > 0).astype(np.uint8)
        volume = name.split(layout.volume_delimiter)[0] if layout.volume_delimiter in name else None
        spacing = spacing_table.get(volume, default_spacing) if volume else default_spacing
        records.append(
            SampleRecord(
                case_id=name,
                image=image,
                mask=mask,
                triplet=layout.triplet,
                edge=quantize(extract_edges(image)),
                split="train",
                source_volume_id=volume,
                spacing=spacing,
            )
        )

    if problems:
        raise ValidationError("ingestion failed:\n  " + "\n  ".join(problems))
    return DatasetManifest(kind="external", seed=None, records=records, spec={"root": str(root)})
