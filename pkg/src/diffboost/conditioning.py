"""Conditioning inputs for the denoiser: text prompt triplets and edge maps.

The text side uses a closed vocabulary (modality / organ / category plus a
small set of augmentation texts) encoded through a learned embedding table.
The edge side is a soft gradient-magnitude map for raw images, or an exact
label-boundary indicator when a segmentation mask is available.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError, VocabularyError

ROLES = ("modality", "organ", "category", "augmentation")

DEFAULT_AUG_TEXTS = ("enhanced contrast", "high resolution", "low noise", "sharp detail")


@dataclass(frozen=True)
class Vocabulary:
    """Closed token vocabulary, grouped by prompt role."""

    modalities: tuple
    organs: tuple
    categories: tuple
    augmentations: tuple = DEFAULT_AUG_TEXTS

    def __post_init__(self):
        seen = set()
        for role in ROLES:
            group = self.group(role)
            if not group:
                raise VocabularyError(f"role {role!r} has no tokens")
            for token in group:
                if not isinstance(token, str) or not token.strip():
                    raise VocabularyError(f"invalid token {token!r} in role {role!r}")
                if token in seen:
                    raise VocabularyError(f"duplicate token {token!r}")
                seen.add(token)

    def group(self, role):
        return {
            "modality": self.modalities,
            "organ": self.organs,
            "category": self.categories,
            "augmentation": self.augmentations,
        }[role]

    def tokens(self):
        """All tokens in deterministic role order."""
        out = []
        for role in ROLES:
            out.extend(self.group(role))
        return tuple(out)

    def content_hash(self):
        """Stable digest of the vocabulary contents (used to pin checkpoints)."""
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def serialize(self):
        lines = []
        for role in ROLES:
            lines.append(f"[{role}]")
            lines.extend(self.group(role))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path):
        groups = {role: [] for role in ROLES}
        current = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line:
                    continue
                if line.startswith("[") and line.endswith("]"):
                    role = line[1:-1]
                    if role not in groups:
                        raise VocabularyError(f"{path}:{lineno}: unknown role header {line!r}")
                    current = role
                elif current is None:
                    raise VocabularyError(f"{path}:{lineno}: token before any role header")
                else:
                    groups[current].append(line)
        return cls(
            modalities=tuple(groups["modality"]),
            organs=tuple(groups["organ"]),
            categories=tuple(groups["category"]),
            augmentations=tuple(groups["augmentation"]),
        )

    @classmethod
    def default(cls):
        """Vocabulary matching the synthetic corpus generator."""
        return cls(
            modalities=("xray", "echo", "scan"),
            organs=("ellipse", "blob", "ring", "polygon"),
            categories=("normal", "inclusion", "rim thickening"),
            augmentations=DEFAULT_AUG_TEXTS,
        )


@dataclass(frozen=True)
class PromptTriplet:
    """(modality, organ, category) prompt plus optional augmentation texts."""

    modality: str
    organ: str
    category: str
    aug_texts: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "aug_texts", tuple(self.aug_texts))

    def tokens(self):
        return (self.modality, self.organ, self.category) + self.aug_texts

    def validate(self, vocab: Vocabulary):
        pairs = [
            (self.modality, vocab.modalities),
            (self.organ, vocab.organs),
            (self.category, vocab.categories),
        ] + [(t, vocab.augmentations) for t in self.aug_texts]
        for token, group in pairs:
            if token not in group:
                raise VocabularyError(f"unknown token {token!r}")
        return self

    def with_aug(self, *texts):
        return PromptTriplet(self.modality, self.organ, self.category, self.aug_texts + tuple(texts))


@dataclass(frozen=True)
class EdgeConfig:
    """Settings for the gradient-magnitude edge extractor.

    ``blur_sigmas`` lists Gaussian pre-smoothing scales whose gradient
    magnitudes are combined by elementwise maximum.  The default applies no
    smoothing, which keeps the response support within one pixel of an
    intensity step.
    """

    blur_sigmas: tuple = ()
    eps: float = 1e-12


def extract_edges(image, config: EdgeConfig | None = None):
    """Soft edge map of a grayscale image, normalized to [0, 1].

    Central-difference gradient magnitude (optionally at several blur
    scales, combined by maximum), divided by its global maximum.  A constant
    image maps to all zeros.
    """
    config = config or EdgeConfig()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"image must be 2D, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValidationError("image contains non-finite values")

    combined = np.zeros_like(image)
    for sigma in config.blur_sigmas or (0.0,):
        base = gaussian_filter(image, sigma, mode="nearest") if sigma > 0 else image
        gy, gx = np.gradient(base)
        np.maximum(combined, np.hypot(gx, gy), out=combined)
    peak = combined.max()
    if peak <= config.eps:
        return np.zeros_like(image)
    return combined / peak


def edges_from_mask(mask):
    """Binary boundary indicator of a label mask.

    A pixel is set to 1 when its label differs from any existing 4-neighbor,
    so the indicator marks both sides of every label boundary; border pixels
    only compare against neighbors inside the grid.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    if mask.dtype == bool:
        mask = mask.astype(np.int64)
    if not np.issubdtype(mask.dtype, np.integer):
        as_int = mask.astype(np.int64)
        if not np.array_equal(as_int, mask):
            raise ValueError("mask must hold integer labels")
        mask = as_int
    if mask.min() < 0:
        raise ValueError("mask labels must be nonnegative")

    out = np.zeros(mask.shape, dtype=bool)
    diff_v = mask[:-1, :] != mask[1:, :]
    out[:-1, :] |= diff_v
    out[1:, :] |= diff_v
    diff_h = mask[:, :-1] != mask[:, 1:]
    out[:, :-1] |= diff_h
    out[:, 1:] |= diff_h
    return out.astype(np.float64)


@dataclass(frozen=True)
class EmbeddingTable:
    """Token -> vector lookup table backing the text conditioning."""

    tokens: tuple
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.tokens):
            raise ValueError(
                f"vectors shape {vectors.shape} does not match {len(self.tokens)} tokens"
            )
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def dim(self):
        return self.vectors.shape[1]

    def index(self, token):
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def assert_injective(self):
        """Fail if two tokens share an embedding vector (collision check)."""
        n = len(self.tokens)
        for i in range(n):
            for j in range(i + 1, n):
                if np.array_equal(self.vectors[i], self.vectors[j]):
                    raise VocabularyError(
                        f"embedding collision between {self.tokens[i]!r} and {self.tokens[j]!r}"
                    )
        return self

    @classmethod
    def initialize(cls, vocab: Vocabulary, dim=64, rng=None):
        rng = rng or np.random.default_rng(0)
        tokens = vocab.tokens()
        vectors = rng.standard_normal((len(tokens), dim)).astype(np.float32)
        return cls(tokens=tokens, vectors=vectors).assert_injective()


def encode_prompt(triplet: PromptTriplet, table: EmbeddingTable):
    """Encode a prompt triplet into a (3 + n_aug, dim) embedding sequence."""
    rows = [table.index(token) for token in triplet.tokens()]
    return table.vectors[rows].copy()
