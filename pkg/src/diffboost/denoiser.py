"""Conditional noise predictor: a small dual-branch encoder-decoder.

The main branch is a UNet over the noisy image with sinusoidal time
conditioning at every level and one cross-attention block over the text
embedding sequence at the bottleneck.  An auxiliary edge branch runs in
parallel at matching resolutions and feeds into the main branch through
zero-initialized 1x1 projections, so a freshly initialized model is exactly
invariant to the edge input.  The output head averages across channels to
produce the single-channel noise prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conditioning import EmbeddingTable, Vocabulary, edges_from_mask
from .diffusion import make_linear_schedule, schedule_from_spec, to_internal
from .errors import CheckpointError, ConfigError, StageError, ValidationError

DEFAULT_DESK_SCHEDULE = {"steps": 200, "beta_start": 1e-4, "beta_end": 0.05}

PRETRAIN_LR = 2e-4
FINETUNE_LR = 1e-6
FINETUNE_EPOCHS = 100
PRETRAIN_ITERATIONS = 3000


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    text_embed_dim: int = 64
    edge_branch_channels: tuple | None = None  # None = base_channels//2 per level, doubling
    attention_at_bottleneck: bool = True
    head_channels: int = 8

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        for name in ("base_channels", "time_embed_dim", "text_embed_dim", "head_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if self.edge_branch_channels is None:
            widths = tuple(max(4, self.base_channels // 2) * 2**l for l in range(self.depth))
            object.__setattr__(self, "edge_branch_channels", widths)
        else:
            object.__setattr__(self, "edge_branch_channels", tuple(self.edge_branch_channels))
        if len(self.edge_branch_channels) != self.depth:
            raise ConfigError(
                f"edge_branch_channels must have one width per level "
                f"({self.depth}), got {self.edge_branch_channels}"
            )
        if any(c < 1 for c in self.edge_branch_channels):
            raise ConfigError("edge branch widths must be positive")

    @property
    def channels(self):
        return tuple(self.base_channels * 2**l for l in range(self.depth))

    def as_dict(self):
        return {
            "base_channels": self.base_channels,
            "depth": self.depth,
            "time_embed_dim": self.time_embed_dim,
            "text_embed_dim": self.text_embed_dim,
            "edge_branch_channels": list(self.edge_branch_channels),
            "attention_at_bottleneck": self.attention_at_bottleneck,
            "head_channels": self.head_channels,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("edge_branch_channels") is not None:
            d["edge_branch_channels"] = tuple(d["edge_branch_channels"])
        return cls(**d)


def _groups(channels):
    return math.gcd(channels, 8)


def sinusoidal_time_embedding(t, dim, dtype=torch.float32):
    """Standard sin/cos position features of the step index, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    args = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    """GroupNorm-conv pair with an additive per-channel time conditioning."""

    def __init__(self, c_in, c_out, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head attention from feature-map pixels to the token sequence."""

    def __init__(self, channels, text_dim):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Linear(text_dim, channels)
        self.v = nn.Linear(text_dim, channels)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x, text):
        b, c, h, w = x.shape
        q = self.q(self.norm(x)).reshape(b, c, h * w).permute(0, 2, 1)
        k = self.k(text)
        v = self.v(text)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = (attn @ v).permute(0, 2, 1).reshape(b, c, h, w)
        return x + self.out(out)


class DualBranchDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig, vocab: Vocabulary):
        super().__init__()
        self.config = config
        self.tokens = vocab.tokens()
        self.token_index = {tok: i for i, tok in enumerate(self.tokens)}
        self.vocab_hash = vocab.content_hash()
        ch = config.channels
        ech = config.edge_branch_channels
        td = config.time_embed_dim

        self.embedding = nn.Embedding(len(self.tokens), config.text_embed_dim)
        self.time_dense1 = nn.Linear(td, 2 * td)
        self.time_dense2 = nn.Linear(2 * td, td)

        self.stem = nn.Conv2d(1, ch[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(ResBlock(ch[l], ch[l], td) for l in range(config.depth))
        self.downs = nn.ModuleList(
            nn.Conv2d(ch[l], ch[l + 1], 3, stride=2, padding=1) for l in range(config.depth - 1)
        )

        self.edge_stem = nn.Conv2d(1, ech[0], 3, padding=1)
        self.edge_blocks = nn.ModuleList(
            nn.Conv2d(ech[l], ech[l], 3, padding=1) for l in range(config.depth)
        )
        self.edge_downs = nn.ModuleList(
            nn.Conv2d(ech[l], ech[l + 1], 3, stride=2, padding=1) for l in range(config.depth - 1)
        )
        self.fusions = nn.ModuleList(
            nn.Conv2d(ech[l], ch[l], 1) for l in range(config.depth)
        )
        for fusion in self.fusions:
            nn.init.zeros_(fusion.weight)
            nn.init.zeros_(fusion.bias)

        self.mid1 = ResBlock(ch[-1], ch[-1], td)
        self.attn = CrossAttention(ch[-1], config.text_embed_dim) if config.attention_at_bottleneck else None
        self.mid2 = ResBlock(ch[-1], ch[-1], td)

        self.up_convs = nn.ModuleList(
            nn.Conv2d(ch[l + 1], ch[l], 3, padding=1) for l in reversed(range(config.depth - 1))
        )
        self.dec_blocks = nn.ModuleList(
            ResBlock(2 * ch[l], ch[l], td) for l in reversed(range(config.depth - 1))
        )
        self.head_norm = nn.GroupNorm(_groups(ch[0]), ch[0])
        self.head = nn.Conv2d(ch[0], config.head_channels, 3, padding=1)

    # -- input plumbing -----------------------------------------------------

    def _dtype(self):
        return self.stem.weight.dtype

    def _prepare(self, xt, t, text, edge):
        squeeze_batch = False
        if isinstance(xt, np.ndarray):
            xt = torch.from_numpy(np.ascontiguousarray(xt))
        if isinstance(edge, np.ndarray):
            edge = torch.from_numpy(np.ascontiguousarray(edge))
        if isinstance(text, np.ndarray):
            text = torch.from_numpy(np.ascontiguousarray(text))
        if xt.ndim == 2:
            xt = xt[None]
            squeeze_batch = True
        if xt.ndim == 3:
            xt = xt[:, None]
        if edge.ndim == 2:
            edge = edge[None]
        if edge.ndim == 3:
            edge = edge[:, None]
        if text.ndim == 2:
            text = text[None]
        if xt.shape[-2:] != edge.shape[-2:]:
            raise ValueError(f"xt {tuple(xt.shape[-2:])} vs edge {tuple(edge.shape[-2:])}")
        if edge.shape[0] == 1 and xt.shape[0] > 1:
            edge = edge.expand(xt.shape[0], -1, -1, -1)
        if text.shape[0] == 1 and xt.shape[0] > 1:
            text = text.expand(xt.shape[0], -1, -1)
        if text.shape[-1] != self.config.text_embed_dim:
            raise ValueError(
                f"text embedding dim {text.shape[-1]} != {self.config.text_embed_dim}"
            )
        stride = 2 ** (self.config.depth - 1)
        if xt.shape[-1] % stride or xt.shape[-2] % stride:
            raise ValueError(f"spatial shape {tuple(xt.shape[-2:])} not divisible by {stride}")
        if not torch.is_tensor(t):
            t = torch.as_tensor(np.atleast_1d(np.asarray(t, dtype=np.int64)))
        if t.ndim == 0:
            t = t[None]
        if t.shape[0] == 1 and xt.shape[0] > 1:
            t = t.expand(xt.shape[0])
        dtype = self._dtype()
        return xt.to(dtype), t, text.to(dtype), edge.to(dtype), squeeze_batch

    def forward(self, xt, t, text, edge):
        was_numpy = isinstance(xt, np.ndarray)
        in_ndim = xt.ndim
        xt_t, t_t, text_t, edge_t, _ = self._prepare(xt, t, text, edge)

        temb = self.time_dense2(F.silu(self.time_dense1(
            sinusoidal_time_embedding(t_t, self.config.time_embed_dim, self._dtype())
        )))

        h = self.stem(xt_t)
        e = F.silu(self.edge_stem(edge_t))
        skips = []
        for level in range(self.config.depth):
            h = self.enc_blocks[level](h, temb)
            e = F.silu(self.edge_blocks[level](e))
            h = h + self.fusions[level](e)
            if level < self.config.depth - 1:
                skips.append(h)
                h = self.downs[level](h)
                e = self.edge_downs[level](e)

        h = self.mid1(h, temb)
        if self.attn is not None:
            h = self.attn(h, text_t)
        h = self.mid2(h, temb)

        for i, level in enumerate(reversed(range(self.config.depth - 1))):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up_convs[i](h)
            h = self.dec_blocks[i](torch.cat([h, skips[level]], dim=1), temb)

        out = self.head(F.silu(self.head_norm(h))).mean(dim=1, keepdim=True)

        if was_numpy:
            arr = out.detach().cpu().numpy().astype(np.float64)
            return arr[0, 0] if in_ndim == 2 else arr[:, 0]
        if in_ndim == 2:
            return out[0, 0]
        if in_ndim == 3:
            return out[:, 0]
        return out

    # -- conditioning helpers -------------------------------------------------

    def edge_branch_modules(self):
        """The conditioning branch: edge stem/blocks/downsamples plus the
        zero-initialized fusion convolutions."""
        return (self.edge_stem, self.edge_blocks, self.edge_downs, self.fusions)

    def token_ids(self, triplets):
        """(B, L) index tensor for a batch of equal-length prompt triplets."""
        from .errors import VocabularyError

        rows = []
        for triplet in triplets:
            try:
                rows.append([self.token_index[tok] for tok in triplet.tokens()])
            except KeyError as exc:
                raise VocabularyError(f"unknown token {exc.args[0]!r}") from None
        if len({len(r) for r in rows}) != 1:
            raise ValueError("triplets in one batch must have equal token counts")
        return torch.as_tensor(rows, dtype=torch.int64)

    def export_embedding_table(self):
        return EmbeddingTable(
            tokens=self.tokens,
            vectors=self.embedding.weight.detach().cpu().numpy().astype(np.float32),
        )


def expected_param_count(config: DenoiserConfig, vocab_size: int):
    """Closed-form parameter count of DualBranchDenoiser (documented formula)."""

    def conv(i, o, k):
        return i * o * k * k + o

    def lin(i, o):
        return i * o + o

    def gn(c):
        return 2 * c

    def res(i, o, d):
        extra = conv(i, o, 1) if i != o else 0
        return gn(i) + conv(i, o, 3) + lin(d, o) + gn(o) + conv(o, o, 3) + extra

    ch = config.channels
    ech = config.edge_branch_channels
    td = config.time_embed_dim
    total = vocab_size * config.text_embed_dim
    total += lin(td, 2 * td) + lin(2 * td, td)
    total += conv(1, ch[0], 3)
    total += sum(res(c, c, td) for c in ch)
    total += sum(conv(ch[l], ch[l + 1], 3) for l in range(config.depth - 1))
    total += conv(1, ech[0], 3)
    total += sum(conv(c, c, 3) for c in ech)
    total += sum(conv(ech[l], ech[l + 1], 3) for l in range(config.depth - 1))
    total += sum(conv(ech[l], ch[l], 1) for l in range(config.depth))
    total += 2 * res(ch[-1], ch[-1], td)
    if config.attention_at_bottleneck:
        total += gn(ch[-1]) + 2 * conv(ch[-1], ch[-1], 1) + 2 * lin(config.text_embed_dim, ch[-1])
    total += sum(conv(ch[l + 1], ch[l], 3) for l in range(config.depth - 1))
    total += sum(res(2 * ch[l], ch[l], td) for l in range(config.depth - 1))
    total += gn(ch[0]) + conv(ch[0], config.head_channels, 3)
    return total


# ---------------------------------------------------------------------------
# checkpoint plumbing


def checkpoint_from_model(model, stage, seed, step, schedule_spec, loss_history=None, extra=None):
    params = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return Checkpoint(
        kind="denoiser",
        stage=stage,
        config=model.config.as_dict(),
        params=params,
        seed=seed,
        step=step,
        schedule_spec=dict(schedule_spec),
        vocab_hash=model.vocab_hash,
        loss_history=list(loss_history or []),
        extra={"tokens": list(model.tokens), **(extra or {})},
    )


def model_from_checkpoint(ckpt: Checkpoint, vocab: Vocabulary):
    if ckpt.kind != "denoiser":
        raise CheckpointError(f"expected a denoiser checkpoint, got kind {ckpt.kind!r}")
    if ckpt.vocab_hash != vocab.content_hash():
        raise CheckpointError("vocabulary hash mismatch between checkpoint and vocabulary")
    model = DualBranchDenoiser(DenoiserConfig.from_dict(ckpt.config), vocab)
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in ckpt.params.items()}
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# diffusion training


@dataclass
class TrainSettings:
    """Optimizer/loop settings; ``None`` fields fall back to stage defaults
    (pretrain: 3000 iterations at lr 2e-4; finetune: 100 epochs at lr 1e-6).

    ``freeze_main`` restricts finetuning to the edge branch and its fusion
    convolutions, leaving the pretrained main branch untouched."""

    batch_size: int = 16
    iterations: int | None = None
    epochs: int | None = None
    lr: float | None = None
    weight_decay: float = 0.01
    schedule: dict = field(default_factory=lambda: dict(DEFAULT_DESK_SCHEDULE))
    freeze_main: bool = False

    def resolve(self, stage, n_train):
        lr = self.lr if self.lr is not None else (PRETRAIN_LR if stage == "pretrain" else FINETUNE_LR)
        epochs = self.epochs
        iterations = self.iterations
        if stage == "finetune" and iterations is None:
            if epochs is None:
                epochs = FINETUNE_EPOCHS
            iterations = epochs * math.ceil(n_train / self.batch_size)
        if stage == "pretrain" and iterations is None:
            iterations = PRETRAIN_ITERATIONS
        return {"lr": lr, "epochs": epochs, "iterations": iterations}


def _stack_training_arrays(dataset, stage, model):
    images = []
    edges = []
    for rec in dataset:
        img = np.asarray(rec.image, dtype=np.float64)
        if img.min() < 0 or img.max() > 1:
            raise ValidationError(f"{rec.case_id}: image values outside [0, 1]")
        images.append(to_internal(img))
        if stage == "finetune":
            if rec.mask is None:
                raise ValidationError(f"{rec.case_id}: finetuning requires a mask")
            edges.append(edges_from_mask(rec.mask))
        else:
            edges.append(np.asarray(rec.edge, dtype=np.float64))
    token_ids = model.token_ids([rec.triplet for rec in dataset])
    return np.stack(images), np.stack(edges), token_ids


def train_diffusion(dataset, config: DenoiserConfig, stage, init: Checkpoint | None = None,
                    seed=0, settings: TrainSettings | None = None, vocab: Vocabulary | None = None):
    """Noise-prediction training; returns a Checkpoint with the loss history.

    ``stage`` is "pretrain" (edge maps from the records' stored soft edges)
    or "finetune" (edge maps recomputed from the segmentation masks; requires
    a pretrained ``init`` checkpoint).
    """
    if stage not in ("pretrain", "finetune"):
        raise ConfigError(f"unknown stage {stage!r}")
    if stage == "finetune":
        if init is None:
            raise ConfigError("finetune requires a pretrained init checkpoint")
        if init.stage != "pretrained":
            raise StageError("finetune init must be a pretrained checkpoint",
                             missing_stage="pretrain")
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("empty training dataset")
    settings = settings or TrainSettings()
    vocab = vocab or Vocabulary.default()

    torch.manual_seed(int(np.random.default_rng(seed).integers(2**31)))
    if init is not None:
        model = model_from_checkpoint(init, vocab)
        config = model.config
    else:
        model = DualBranchDenoiser(config, vocab)
    model.train()

    if settings.freeze_main:
        if stage != "finetune":
            raise ConfigError("freeze_main only applies to the finetune stage")
        for param in model.parameters():
            param.requires_grad_(False)
        for module in model.edge_branch_modules():
            for param in module.parameters():
                param.requires_grad_(True)

    schedule = schedule_from_spec(settings.schedule)
    images, edges, token_ids = _stack_training_arrays(dataset, stage, model)
    n = len(dataset)
    resolved = settings.resolve(stage, n)
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=resolved["lr"], weight_decay=settings.weight_decay,
    )

    if resolved["epochs"] is not None and settings.iterations is None and stage == "finetune":
        batch_plan = []
        for _ in range(resolved["epochs"]):
            order = rng.permutation(n)
            for start in range(0, n, settings.batch_size):
                batch_plan.append(order[start : start + settings.batch_size])
    else:
        batch_plan = [
            rng.integers(0, n, size=min(settings.batch_size, n))
            for _ in range(resolved["iterations"])
        ]

    alpha_bars = schedule.alpha_bars
    loss_history = []
    edge_tensor = torch.from_numpy(edges.astype(np.float32))[:, None]
    for batch in batch_plan:
        t = rng.integers(1, schedule.steps + 1, size=len(batch))
        eps = rng.standard_normal((len(batch),) + images.shape[1:])
        ab = alpha_bars[t][:, None, None]
        xt = np.sqrt(ab) * images[batch] + np.sqrt(1.0 - ab) * eps

        xt_t = torch.from_numpy(xt.astype(np.float32))[:, None]
        eps_t = torch.from_numpy(eps.astype(np.float32))[:, None]
        text = model.embedding(token_ids[batch])
        pred = model(xt_t, torch.from_numpy(t), text, edge_tensor[batch])
        loss = ((pred - eps_t) ** 2).mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        loss_history.append(float(loss.detach()))

    model.eval()
    stage_tag = "pretrained" if stage == "pretrain" else "finetuned"
    return checkpoint_from_model(
        model, stage_tag, seed=int(seed), step=len(batch_plan),
        schedule_spec=settings.schedule, loss_history=loss_history,
        extra={"resolved": resolved, "batch_size": settings.batch_size,
               "freeze_main": settings.freeze_main},
    )


# ---------------------------------------------------------------------------
# sampling adapter


def make_denoiser_fn(model: DualBranchDenoiser, text, edge):
    """Bind conditioning and wrap the model for the numpy ancestral sampler.

    ``text``: (L, D) or (B, L, D); ``edge``: (H, W) or (B, H, W).  The
    returned callable takes (xt, t, conditioning) and returns the predicted
    noise as float64 numpy with xt's shape.
    """
    model.eval()
    text = np.asarray(text, dtype=np.float32)
    edge = np.asarray(edge, dtype=np.float32)

    def fn(xt, t, _cond=None):
        with torch.no_grad():
            return model(np.asarray(xt, dtype=np.float64), int(t), text, edge)

    return fn
