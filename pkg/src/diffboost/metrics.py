"""Evaluation metrics: mask overlap, surface distances, pixel error, SSIM.

Every metric here has a brute-force-checkable definition; the test suite
pins each one against an independent oracle (exhaustive pixel counts,
all-pairs boundary distances, windowed-loop SSIM).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .errors import ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# Standard five-scale weights for the multi-scale variant.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _as_binary(name, arr):
    arr = np.asarray(arr)
    if arr.dtype == bool:
        return arr
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValidationError(f"{name} must be binary, found values {vals[:8]}")
    return arr.astype(bool)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def region_metrics(pred, gt):
    """Dice / precision / recall between two binary masks.

    Empty-set conventions: dice(empty, empty) = 1; a ratio with an empty
    denominator is 1 when both masks are empty and 0 otherwise.
    """
    pred = _as_binary("pred", pred)
    gt = _as_binary("gt", gt)
    _check_same_shape(pred, gt)
    inter = float(np.logical_and(pred, gt).sum())
    p = float(pred.sum())
    g = float(gt.sum())
    both_empty = p == 0 and g == 0
    dice = 1.0 if both_empty else 2.0 * inter / (p + g)
    precision = (1.0 if both_empty else 0.0) if p == 0 else inter / p
    recall = (1.0 if both_empty else 0.0) if g == 0 else inter / g
    return {"dice": dice, "precision": precision, "recall": recall}


def mask_boundary(mask):
    """Foreground pixels whose label differs from an existing 4-neighbor."""
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros(mask.shape, dtype=bool)
    diff_v = mask[:-1, :] != mask[1:, :]
    out[:-1, :] |= diff_v
    out[1:, :] |= diff_v
    diff_h = mask[:, :-1] != mask[:, 1:]
    out[:, :-1] |= diff_h
    out[:, 1:] |= diff_h
    return out & mask


def _diagonal(shape, spacing):
    return math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing)))


def surface_metrics(pred, gt, spacing=(1.0, 1.0)):
    """95th-percentile Hausdorff distance and average symmetric surface distance.

    Boundaries are foreground pixels with a 4-neighbor of the other class;
    distances are Euclidean in the units given by ``spacing``.  hd95 is the
    max of the two directed 95th percentiles (linear interpolation); assd
    pools both directed distance sets before averaging.  If either mask has
    an empty boundary the image-diagonal length is returned for both values
    and the ``warning`` flag is set.
    """
    pred = _as_binary("pred", pred)
    gt = _as_binary("gt", gt)
    _check_same_shape(pred, gt)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != pred.ndim or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be {pred.ndim} positive values, got {spacing}")

    bp = mask_boundary(pred)
    bg = mask_boundary(gt)
    if not bp.any() or not bg.any():
        sentinel = _diagonal(pred.shape, spacing)
        return {"hd95": sentinel, "assd": sentinel, "warning": True}

    # Distance of every pixel to the nearest boundary pixel of each mask.
    dist_to_bg = distance_transform_edt(~bg, sampling=spacing)
    dist_to_bp = distance_transform_edt(~bp, sampling=spacing)
    d_pred_to_gt = dist_to_bg[bp]
    d_gt_to_pred = dist_to_bp[bg]

    hd95 = max(
        float(np.percentile(d_pred_to_gt, 95)),
        float(np.percentile(d_gt_to_pred, 95)),
    )
    assd = float(np.concatenate([d_pred_to_gt, d_gt_to_pred]).mean())
    return {"hd95": hd95, "assd": assd, "warning": False}


def _check_unit_range(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.size and (arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9):
        raise ValidationError(
            f"{name} values must lie in [0, 1], got range [{arr.min()}, {arr.max()}]"
        )
    return arr


def pixel_metrics(a, b):
    """Mean absolute error, mean squared error, and its root, on [0,1] images.

    Sums use correctly-rounded accumulation so the results are independent
    of pixel ordering.
    """
    a = _check_unit_range("a", a)
    b = _check_unit_range("b", b)
    _check_same_shape(a, b)
    diff = (a - b).ravel()
    mae = math.fsum(np.abs(diff)) / diff.size
    mse = math.fsum(diff**2) / diff.size
    return {"mae": mae, "mse": mse, "rmse": math.sqrt(mse)}


def _ssim_maps(a, b, data_range=1.0):
    """Per-pixel SSIM and contrast-structure maps (Gaussian window)."""
    truncate = 3.5  # radius int(3.5 * 1.5 + 0.5) = 5, i.e. an 11x11 window
    filt = lambda x: gaussian_filter(x, SSIM_SIGMA, truncate=truncate, mode="nearest")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    pad = (SSIM_WINDOW - 1) // 2
    crop = (slice(pad, -pad), slice(pad, -pad))
    return (lum * cs)[crop], cs[crop]


def ssim(a, b):
    """Mean structural similarity, unit data range, 11x11 Gaussian window."""
    a = _check_unit_range("a", a)
    b = _check_unit_range("b", b)
    _check_same_shape(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image sides must be >= {SSIM_WINDOW}, got {a.shape}")
    full, _ = _ssim_maps(a, b)
    return float(full.mean())


def _downsample(x):
    h, w = x.shape
    x = x[: h - h % 2, : w - w % 2]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_scale_count(shape, max_scales=len(MS_SSIM_WEIGHTS)):
    """Number of usable scales: the coarsest scale must keep both sides
    at least twice the window size."""
    scales = 1
    side = min(shape)
    while scales < max_scales and side // 2 >= 2 * SSIM_WINDOW:
        side //= 2
        scales += 1
    return scales


def ms_ssim(a, b):
    """Multi-scale SSIM with the standard five-scale weights.

    Small images use fewer scales (see ``ms_ssim_scale_count``) with the
    retained weights renormalized to sum to one.  Negative intermediate
    terms are clamped at zero so the fractional powers stay defined.
    """
    a = _check_unit_range("a", a)
    b = _check_unit_range("b", b)
    _check_same_shape(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image sides must be >= {SSIM_WINDOW}, got {a.shape}")
    n_scales = ms_ssim_scale_count(a.shape)
    weights = np.asarray(MS_SSIM_WEIGHTS[:n_scales])
    weights = weights / weights.sum()
    value = 1.0
    for level in range(n_scales):
        full, cs = _ssim_maps(a, b)
        term = full.mean() if level == n_scales - 1 else cs.mean()
        value *= max(float(term), 0.0) ** weights[level]
        if level < n_scales - 1:
            a = _downsample(a)
            b = _downsample(b)
    return float(value)


def structural_metrics(a, b):
    """SSIM and multi-scale SSIM on [0,1] images."""
    return {"ssim": ssim(a, b), "ms_ssim": ms_ssim(a, b)}


GENERATION_METRICS = ("mae", "mse", "rmse", "ssim", "ms_ssim")
SEGMENTATION_METRICS = ("dice", "precision", "recall", "hd95", "assd")


def generation_metrics(pred_image, ref_image):
    """Full image-similarity row (pixel + structural)."""
    row = pixel_metrics(pred_image, ref_image)
    row.update(structural_metrics(pred_image, ref_image))
    return row


def segmentation_metrics(pred_mask, gt_mask, spacing=(1.0, 1.0)):
    """Full mask-quality row (overlap + surface)."""
    row = region_metrics(pred_mask, gt_mask)
    surface = surface_metrics(pred_mask, gt_mask, spacing)
    row.update({"hd95": surface["hd95"], "assd": surface["assd"]})
    row["warning"] = surface["warning"]
    return row


@dataclass
class MetricsReport:
    """Per-case metric rows plus derived aggregates.

    ``kind`` tags the metric family ("generation" or "segmentation");
    ``spacing`` records the units surface metrics were computed in.
    """

    kind: str
    spacing: tuple | None = None
    rows: dict = field(default_factory=dict)
    warnings: dict = field(default_factory=dict)

    def add(self, case_id, values, warning=False):
        if case_id in self.rows:
            raise ValueError(f"duplicate case id {case_id!r}")
        values = dict(values)
        warning = bool(values.pop("warning", warning))
        self.rows[case_id] = {k: float(v) for k, v in values.items()}
        self.warnings[case_id] = warning

    @property
    def metric_names(self):
        names = []
        for row in self.rows.values():
            for key in row:
                if key not in names:
                    names.append(key)
        return tuple(names)

    def values(self, metric):
        return np.array([row[metric] for row in self.rows.values() if metric in row])

    def mean(self, metric):
        return float(self.values(metric).mean())

    def std(self, metric):
        vals = self.values(metric)
        return float(vals.std(ddof=1)) if len(vals) > 1 else 0.0

    def summary(self):
        return {m: (self.mean(m), self.std(m)) for m in self.metric_names}

    def to_csv(self, path):
        names = self.metric_names
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("case_id",) + names + ("warning",))
            for case_id, row in self.rows.items():
                writer.writerow(
                    [case_id]
                    + [repr(row[m]) if m in row else "" for m in names]
                    + [int(self.warnings[case_id])]
                )

    @classmethod
    def from_csv(cls, path, kind, spacing=None):
        """Rebuild a report from a per-case table written by :meth:`to_csv`.

        Float values round-trip exactly because ``to_csv`` writes ``repr``.
        """
        report = cls(kind=kind, spacing=spacing)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "case_id" or header[-1] != "warning":
                raise ValueError(f"{path} is not a per-case metrics table")
            names = header[1:-1]
            for line in reader:
                values = {
                    name: float(cell) for name, cell in zip(names, line[1:-1]) if cell != ""
                }
                report.add(line[0], values, warning=bool(int(line[-1])))
        return report

    def summary_text(self):
        lines = [f"metric set: {self.kind}", f"cases: {len(self.rows)}"]
        if self.spacing is not None:
            lines.append(f"spacing: {tuple(self.spacing)}")
        n_warn = sum(self.warnings.values())
        if n_warn:
            lines.append(f"warnings: {n_warn} case(s) hit the empty-boundary sentinel")
        for m, (mean, std) in self.summary().items():
            lines.append(f"{m}: {mean:.6f} +/- {std:.6f}")
        return "\n".join(lines) + "\n"
