"""Segmentation backbones and the mixed real/synthetic training loop.

The trainer consumes an :class:`~diffboost.augmentation.AugmentationCache`:
each time an image enters a batch, one of its cached diffusion variants is
chosen uniformly, a fresh random patch mask is drawn, and the network sees
``m * x0 + (1 - m) * xi``.  Random draws for augmentation live on a dedicated
stream so that baseline training (no cache) and ``alpha = 1`` training
consume identical initialization/order randomness and produce bit-identical
loss histories.
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augmentation import (
    AugmentationCache,
    ClassicTransformSpec,
    apply_classic,
    generate_random_patch,
    mix,
)
from .checkpoint import Checkpoint
from .errors import ConfigError, ValidationError
from .metrics import MetricsReport, segmentation_metrics

SEG_BACKBONES = (
    "basic-unet",
    "residual-unet",
    "attention-unet",
    "resnet-encoder-unet",
    "windowed-transformer-unet",
)

DEFAULT_SEG_EPOCHS = 100
DEFAULT_SEG_LR = 1e-3


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class ConvBlock(nn.Module):
    """Two 3x3 convolutions with group norm and SiLU."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)

    def forward(self, x):
        x = F.silu(self.norm1(self.conv1(x)))
        return F.silu(self.norm2(self.conv2(x)))


class ResidualBlock(nn.Module):
    """ConvBlock with an identity (or 1x1-projected) shortcut."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, stride=stride)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        if c_in != c_out or stride != 1:
            self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.silu(h + self.skip(x))


class AttentionGate(nn.Module):
    """Additive attention gate that reweights an encoder skip connection
    using the upsampled decoder feature as the gating signal."""

    def __init__(self, c_skip: int, c_gate: int):
        super().__init__()
        c_inter = max(1, c_skip // 2)
        self.w_skip = nn.Conv2d(c_skip, c_inter, 1)
        self.w_gate = nn.Conv2d(c_gate, c_inter, 1)
        self.psi = nn.Conv2d(c_inter, 1, 1)

    def forward(self, skip, gate):
        a = torch.sigmoid(self.psi(F.silu(self.w_skip(skip) + self.w_gate(gate))))
        return skip * a


class WindowAttentionBlock(nn.Module):
    """Self-attention over non-overlapping square windows followed by an MLP,
    both with pre-norm residual connections."""

    def __init__(self, dim: int, window: int, heads: int = 4):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.SiLU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        b, c, h, w = x.shape
        win = self.window
        if h % win != 0 or w % win != 0:
            raise ValueError(
                f"feature map {h}x{w} is not divisible by window size {win}"
            )
        t = x.reshape(b, c, h // win, win, w // win, win)
        t = t.permute(0, 2, 4, 3, 5, 1).reshape(-1, win * win, c)
        q = self.norm1(t)
        t = t + self.attn(q, q, q, need_weights=False)[0]
        t = t + self.mlp(self.norm2(t))
        t = t.reshape(b, h // win, w // win, win, win, c)
        return t.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


class _UNet(nn.Module):
    """Encoder/decoder skeleton shared by the backbone variants.

    ``kind`` selects the encoder block type, optional attention gates on the
    skip connections, and optional windowed self-attention at the two
    coarsest resolutions.  Outputs per-pixel logits with the input's spatial
    shape; ``predict_proba`` applies the sigmoid.
    """

    def __init__(self, kind: str, base_channels: int, depth: int, window: int):
        super().__init__()
        self.kind = kind
        self.depth = depth
        self.input_shape: Optional[tuple] = None
        chans = [base_channels * 2 ** level for level in range(depth + 1)]

        residual = kind in ("residual-unet", "resnet-encoder-unet")
        block = ResidualBlock if residual else ConvBlock

        self.stem = block(1, chans[0])
        self.downs = nn.ModuleList()
        self.enc_blocks = nn.ModuleList()
        for level in range(depth):
            if kind == "resnet-encoder-unet":
                self.downs.append(nn.Identity())
                self.enc_blocks.append(
                    nn.Sequential(
                        ResidualBlock(chans[level], chans[level + 1], stride=2),
                        ResidualBlock(chans[level + 1], chans[level + 1]),
                    )
                )
            else:
                self.downs.append(nn.MaxPool2d(2))
                self.enc_blocks.append(block(chans[level], chans[level + 1]))

        if kind == "windowed-transformer-unet":
            self.mixers = nn.ModuleList(
                WindowAttentionBlock(chans[level], window)
                for level in (depth - 1, depth)
            )
        else:
            self.mixers = None

        self.up_convs = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        self.gates = nn.ModuleList()
        for level in range(depth, 0, -1):
            self.up_convs.append(nn.ConvTranspose2d(chans[level], chans[level - 1], 2, stride=2))
            self.dec_blocks.append(block(2 * chans[level - 1], chans[level - 1]))
            if kind == "attention-unet":
                self.gates.append(AttentionGate(chans[level - 1], chans[level - 1]))
            else:
                self.gates.append(nn.Identity())

        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError("expected input of shape (batch, 1, height, width)")
        factor = 2 ** self.depth
        if x.shape[2] % factor != 0 or x.shape[3] % factor != 0:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} must be divisible by {factor}"
            )
        h = self.stem(x)
        skips = []
        for down, enc in zip(self.downs, self.enc_blocks):
            skips.append(h)
            h = enc(down(h))
        if self.mixers is not None:
            skips[-1] = self.mixers[0](skips[-1])
            h = self.mixers[1](h)
        for up, dec, gate, skip in zip(self.up_convs, self.dec_blocks, self.gates, reversed(skips)):
            g = up(h)
            if not isinstance(gate, nn.Identity):
                skip = gate(skip, g)
            h = dec(torch.cat([skip, g], dim=1))
        return self.head(h)


@dataclass(frozen=True)
class SegBackboneSpec:
    """Selects and sizes a segmentation backbone.

    All kinds stay well under one million parameters at the default width so
    that backbone sweeps remain tractable on a single CPU.
    """

    kind: str = "attention-unet"
    base_channels: int = 16
    depth: int = 2
    window: int = 4

    def __post_init__(self):
        if self.kind not in SEG_BACKBONES:
            raise ConfigError(
                f"unknown backbone kind {self.kind!r}; expected one of {SEG_BACKBONES}"
            )
        if self.base_channels < 4:
            raise ConfigError("base_channels must be at least 4")
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        if self.window < 1:
            raise ConfigError("window must be at least 1")

    def build(self) -> nn.Module:
        return _UNet(self.kind, self.base_channels, self.depth, self.window)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SegBackboneSpec":
        return cls(**data)


# ---------------------------------------------------------------------------
# training configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegTrainConfig:
    """Hyperparameters for segmentation training and cross-validation.

    ``alpha`` is the expected fraction of original-image patches in each
    mixed input; ``patch_size`` may be an integer, the string ``"image"``
    (single whole-image patch), or None for the image-size // 6 default.
    ``n`` caps how many cached variants per image the sampler draws from.
    ``loss_weights`` weight the (soft-overlap, cross-entropy) terms.
    """

    alpha: float = 0.5
    patch_size: object = None
    n: int = 10
    epochs: int = DEFAULT_SEG_EPOCHS
    batch_size: int = 8
    lr: float = DEFAULT_SEG_LR
    weight_decay: float = 1e-4
    loss_weights: tuple = (0.5, 0.5)
    folds: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.patch_size is not None and self.patch_size != "image":
            if not isinstance(self.patch_size, int) or self.patch_size < 1:
                raise ConfigError(
                    f"patch_size must be a positive int, 'image', or None, got {self.patch_size!r}"
                )
        if self.n < 1:
            raise ConfigError("n must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0 or sum(self.loss_weights) <= 0:
            raise ConfigError("loss_weights must be two non-negative values with positive sum")
        if self.folds < 1:
            raise ConfigError("folds must be at least 1")

    def as_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["loss_weights"] = list(self.loss_weights)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SegTrainConfig":
        data = dict(data)
        if "loss_weights" in data:
            data["loss_weights"] = tuple(data["loss_weights"])
        return cls(**data)


def resolve_patch_size(patch_size, image_shape) -> int:
    """Map the configured patch size onto pixels for a concrete image shape."""
    if patch_size == "image":
        return max(image_shape)
    if patch_size is None:
        return max(1, min(image_shape) // 6)
    return int(patch_size)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _records_of(dataset) -> list:
    records = list(dataset.records) if hasattr(dataset, "records") else list(dataset)
    if not records:
        raise ValidationError("dataset contains no records")
    return records


def _training_arrays(records):
    shape = records[0].image.shape
    images, masks = [], []
    for rec in records:
        if rec.mask is None:
            raise ValidationError(f"record {rec.case_id!r} has no segmentation mask")
        if rec.image.shape != shape:
            raise ValidationError(
                f"record {rec.case_id!r} has shape {rec.image.shape}, expected {shape}"
            )
        if rec.image.min() < 0.0 or rec.image.max() > 1.0:
            raise ValidationError(f"record {rec.case_id!r} has intensities outside [0, 1]")
        images.append(np.asarray(rec.image, dtype=np.float64))
        masks.append(np.asarray(rec.mask, dtype=np.float32))
    return images, masks, shape


def segmentation_loss(logits, targets, weights=(0.5, 0.5)):
    """Weighted sum of a soft-overlap (Dice) loss and per-pixel cross-entropy."""
    probs = torch.sigmoid(logits)
    eps = 1e-6
    inter = (probs * targets).sum(dim=(1, 2, 3))
    denom = probs.sum(dim=(1, 2, 3)) + targets.sum(dim=(1, 2, 3))
    overlap = 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()
    ce = F.binary_cross_entropy_with_logits(logits, targets)
    return weights[0] * overlap + weights[1] * ce


def _seed_streams(seed: int):
    init_ss, order_ss, aug_ss = np.random.SeedSequence(seed).spawn(3)
    torch_seed = int(np.random.default_rng(init_ss).integers(0, 2 ** 31))
    return torch_seed, np.random.default_rng(order_ss), np.random.default_rng(aug_ss)


def train_segmentation(
    dataset,
    cache: Optional[AugmentationCache],
    spec: SegBackboneSpec,
    config: SegTrainConfig,
    rng: Optional[int] = None,
    classic: Optional[ClassicTransformSpec] = None,
) -> Checkpoint:
    """Train a segmentation backbone, optionally mixing in cached variants.

    When ``cache`` is None the loop trains on original images only (the
    baseline).  Otherwise, every time an image is drawn, one of its first
    ``config.n`` cached variants is selected uniformly and blended through a
    fresh random patch mask.  Augmentation randomness lives on a stream
    separate from initialization and batch ordering, so baseline and
    ``alpha = 1`` runs consume identical model/order randomness.

    ``classic`` applies a classic transform jointly to image and mask on
    every draw (the conventional-augmentation comparison arm).  Supplying
    both a cache and ``classic`` composes them: the classic transform acts on
    the already-mixed sample.
    """
    records = _records_of(dataset)
    images, masks, shape = _training_arrays(records)
    n_train = len(records)

    if cache is not None:
        cache.check_covers(records)
        if cache.n < config.n:
            raise ValidationError(
                f"cache provides {cache.n} variants per image but config.n={config.n}"
            )
        variants = [cache.variants(rec.case_id) for rec in records]
    else:
        variants = None

    patch_px = resolve_patch_size(config.patch_size, shape)
    torch_seed, order_rng, aug_rng = _seed_streams(config.seed if rng is None else int(rng))
    torch.manual_seed(torch_seed)

    model = spec.build()
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    mask_batch_all = np.stack(masks)[:, None]

    loss_history = []
    model.train()
    for _ in range(config.epochs):
        order = order_rng.permutation(n_train)
        for start in range(0, n_train, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch, moved_masks = [], []
            for i in idx:
                img = images[i]
                if variants is not None:
                    k = int(aug_rng.integers(config.n))
                    patch = generate_random_patch(config.alpha, patch_px, shape, aug_rng)
                    img = mix(img, variants[i][k], patch)
                if classic is not None:
                    moved = apply_classic(
                        dataclasses.replace(records[i], image=img), classic, aug_rng
                    )
                    img = np.asarray(moved.image, dtype=np.float64)
                    moved_masks.append(np.asarray(moved.mask, dtype=np.float32))
                batch.append(img)
            x = torch.as_tensor(np.stack(batch)[:, None], dtype=torch.float32)
            if classic is not None:
                y = torch.as_tensor(np.stack(moved_masks)[:, None])
            else:
                y = torch.as_tensor(mask_batch_all[idx])
            optimizer.zero_grad()
            loss = segmentation_loss(model(x), y, config.loss_weights)
            loss.backward()
            optimizer.step()
            loss_history.append(float(loss.detach()))

    model.input_shape = shape
    params = {name: value.detach().cpu().numpy() for name, value in model.state_dict().items()}
    return Checkpoint(
        kind="segmentation",
        stage="segmentation",
        config={
            "backbone": spec.as_dict(),
            "train": config.as_dict(),
            "image_size": list(shape),
        },
        params=params,
        seed=config.seed if rng is None else int(rng),
        step=len(loss_history),
        loss_history=loss_history,
        extra={
            "train_case_ids": [rec.case_id for rec in records],
            "resolved_patch_size": patch_px,
            "used_cache": variants is not None,
            "classic_kind": None if classic is None else classic.kind,
        },
    )


def seg_model_from_checkpoint(ckpt: Checkpoint) -> nn.Module:
    """Rebuild a segmentation backbone from its checkpoint."""
    if ckpt.kind != "segmentation":
        raise ValidationError(f"expected a segmentation checkpoint, got kind {ckpt.kind!r}")
    spec = SegBackboneSpec.from_dict(ckpt.config["backbone"])
    model = spec.build()
    model.load_state_dict(
        {name: torch.from_numpy(value.copy()) for name, value in ckpt.params.items()}
    )
    model.input_shape = tuple(ckpt.config["image_size"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def predict_proba(model: nn.Module, image: np.ndarray) -> np.ndarray:
    """Per-pixel foreground probability map for a single image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    expected = getattr(model, "input_shape", None)
    if expected is not None and tuple(image.shape) != tuple(expected):
        raise ValueError(
            f"image shape {image.shape} does not match training resolution {tuple(expected)}"
        )
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(image[None, None], dtype=torch.float32)
        probs = torch.sigmoid(model(x))
    return probs[0, 0].numpy().astype(np.float64)


def predict(model: nn.Module, image: np.ndarray) -> np.ndarray:
    """Binary foreground mask; probability 0.5 ties break to foreground."""
    probs = predict_proba(model, image)
    return (probs >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class CrossValResult:
    """Per-fold reports plus the aggregate over all held-out predictions."""

    fold_case_ids: tuple
    fold_reports: list
    report: MetricsReport
    checkpoints: list


def fold_partition(records: Sequence, folds: int, seed: int) -> list:
    """Split records into ``folds`` groups, keeping slices of one source
    volume together.  Groups are shuffled deterministically and dealt
    round-robin, so 33 single-slice cases under 3 folds give (11, 11, 11).
    """
    if folds < 2:
        raise ConfigError("cross-validation needs at least 2 folds")
    groups = {}
    for rec in records:
        key = rec.source_volume_id if rec.source_volume_id is not None else rec.case_id
        groups.setdefault(key, []).append(rec)
    if len(groups) < folds:
        raise ConfigError(
            f"cannot build {folds} folds from {len(groups)} volume groups"
        )
    keys = sorted(groups)
    order = np.random.default_rng(np.random.SeedSequence([seed, len(keys)])).permutation(len(keys))
    parts = [[] for _ in range(folds)]
    for slot, key_index in enumerate(order):
        parts[slot % folds].extend(groups[keys[key_index]])
    return parts


def cross_validate(
    dataset,
    cache: Optional[AugmentationCache],
    spec: SegBackboneSpec,
    config: SegTrainConfig,
) -> CrossValResult:
    """Train one model per fold on the other folds and score the held-out
    fold, collecting per-case segmentation metrics into one report."""
    records = _records_of(dataset)
    parts = fold_partition(records, config.folds, config.seed)

    aggregate = MetricsReport(kind="segmentation")
    fold_reports, checkpoints = [], []
    for fold_index, held_out in enumerate(parts):
        train_records = [rec for part in parts if part is not held_out for rec in part]
        fold_seed = int(np.random.SeedSequence([config.seed, 1000 + fold_index]).generate_state(1)[0])
        ckpt = train_segmentation(train_records, cache, spec, config, rng=fold_seed)
        model = seg_model_from_checkpoint(ckpt)
        fold_report = MetricsReport(kind="segmentation")
        for rec in held_out:
            row = segmentation_metrics(predict(model, rec.image), rec.mask, spacing=rec.spacing)
            fold_report.add(rec.case_id, dict(row))
            aggregate.add(rec.case_id, dict(row))
        fold_reports.append(fold_report)
        checkpoints.append(ckpt)

    return CrossValResult(
        fold_case_ids=tuple(tuple(rec.case_id for rec in part) for part in parts),
        fold_reports=fold_reports,
        report=aggregate,
        checkpoints=checkpoints,
    )
