"""Tests for overlap, surface-distance, pixel, and structural metrics."""

import csv
import math

import numpy as np
import pytest

from diffboost.errors import ValidationError
from diffboost.metrics import (
    MS_SSIM_WEIGHTS,
    MetricsReport,
    mask_boundary,
    ms_ssim,
    ms_ssim_scale_count,
    pixel_metrics,
    region_metrics,
    segmentation_metrics,
    ssim,
    structural_metrics,
    surface_metrics,
)


class TestRegionMetrics:
    def test_perfect_match(self):
        m = np.zeros((8, 8), dtype=int)
        m[2:6, 2:6] = 1
        out = region_metrics(m, m)
        assert out == {"dice": 1.0, "precision": 1.0, "recall": 1.0}

    def test_disjoint(self):
        a = np.zeros((8, 8), dtype=int)
        b = np.zeros((8, 8), dtype=int)
        a[0, 0] = 1
        b[7, 7] = 1
        out = region_metrics(a, b)
        assert out == {"dice": 0.0, "precision": 0.0, "recall": 0.0}

    def test_half_block_pixel_counts(self):
        gt = np.zeros((8, 8), dtype=int)
        gt[2:6, 2:6] = 1  # 16 px
        pred = np.zeros((8, 8), dtype=int)
        pred[2:4, 2:6] = 1  # top half, 8 px
        out = region_metrics(pred, gt)
        assert out["dice"] == pytest.approx(2 * 8 / 24)
        assert out["precision"] == 1.0
        assert out["recall"] == 0.5

    def test_empty_conventions(self):
        empty = np.zeros((4, 4), dtype=int)
        full = np.ones((4, 4), dtype=int)
        both = region_metrics(empty, empty)
        assert both == {"dice": 1.0, "precision": 1.0, "recall": 1.0}
        pred_empty = region_metrics(empty, full)
        assert pred_empty == {"dice": 0.0, "precision": 0.0, "recall": 0.0}
        gt_empty = region_metrics(full, empty)
        assert gt_empty == {"dice": 0.0, "precision": 0.0, "recall": 0.0}

    def test_symmetry_and_duality(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            a = rng.integers(0, 2, size=(10, 10))
            b = rng.integers(0, 2, size=(10, 10))
            ab = region_metrics(a, b)
            ba = region_metrics(b, a)
            assert ab["dice"] == pytest.approx(ba["dice"])
            assert ab["precision"] == pytest.approx(ba["recall"])
            for v in ab.values():
                assert 0.0 <= v <= 1.0

    def test_non_binary_rejected(self):
        with pytest.raises(ValidationError, match="binary"):
            region_metrics(np.full((3, 3), 2), np.zeros((3, 3), dtype=int))


def surface_oracle(pred, gt, spacing=(1.0, 1.0)):
    """O(B^2) all-pairs boundary-distance computation."""
    bp = [(i, j) for i, j in zip(*np.nonzero(mask_boundary(pred)))]
    bg = [(i, j) for i, j in zip(*np.nonzero(mask_boundary(gt)))]
    sy, sx = spacing

    def directed(src, dst):
        out = []
        for (i, j) in src:
            best = min(
                math.sqrt(((i - k) * sy) ** 2 + ((j - l) * sx) ** 2) for (k, l) in dst
            )
            out.append(best)
        return np.array(out)

    d_pg = directed(bp, bg)
    d_gp = directed(bg, bp)
    hd95 = max(float(np.percentile(d_pg, 95)), float(np.percentile(d_gp, 95)))
    assd = float(np.concatenate([d_pg, d_gp]).mean())
    hd_max = float(max(d_pg.max(), d_gp.max()))
    return hd95, assd, hd_max


class TestSurfaceMetrics:
    def test_identical_masks(self):
        m = np.zeros((16, 16), dtype=int)
        m[4:9, 5:12] = 1
        out = surface_metrics(m, m)
        assert out["hd95"] == 0.0 and out["assd"] == 0.0 and not out["warning"]

    def test_single_pixels_three_apart(self):
        a = np.zeros((8, 8), dtype=int)
        b = np.zeros((8, 8), dtype=int)
        a[4, 2] = 1
        b[4, 5] = 1
        out = surface_metrics(a, b)
        assert out["hd95"] == pytest.approx(3.0)
        assert out["assd"] == pytest.approx(3.0)

    def test_shifted_square_matches_oracle(self):
        gt = np.zeros((16, 16), dtype=int)
        gt[4:12, 4:12] = 1
        pred = np.roll(gt, 2, axis=1)
        out = surface_metrics(pred, gt)
        hd95, assd, _ = surface_oracle(pred, gt)
        assert out["hd95"] == pytest.approx(hd95, abs=1e-9)
        assert out["assd"] == pytest.approx(assd, abs=1e-9)

    def test_random_masks_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            pred = (rng.uniform(size=(32, 32)) < 0.3).astype(int)
            gt = (rng.uniform(size=(32, 32)) < 0.3).astype(int)
            if not pred.any() or not gt.any():
                continue
            out = surface_metrics(pred, gt)
            hd95, assd, hd_max = surface_oracle(pred, gt)
            assert out["hd95"] == pytest.approx(hd95, abs=1e-9)
            assert out["assd"] == pytest.approx(assd, abs=1e-9)
            assert 0.0 <= out["hd95"] <= hd_max + 1e-9

    def test_anisotropic_spacing(self):
        a = np.zeros((8, 8), dtype=int)
        b = np.zeros((8, 8), dtype=int)
        a[4, 2] = 1
        b[4, 5] = 1
        out = surface_metrics(a, b, spacing=(1.0, 2.5))
        assert out["hd95"] == pytest.approx(7.5)
        rng = np.random.default_rng(3)
        pred = (rng.uniform(size=(20, 20)) < 0.25).astype(int)
        gt = (rng.uniform(size=(20, 20)) < 0.25).astype(int)
        out = surface_metrics(pred, gt, spacing=(0.7, 1.3))
        hd95, assd, _ = surface_oracle(pred, gt, spacing=(0.7, 1.3))
        assert out["hd95"] == pytest.approx(hd95, abs=1e-9)
        assert out["assd"] == pytest.approx(assd, abs=1e-9)

    def test_empty_mask_sentinel(self):
        empty = np.zeros((8, 8), dtype=int)
        m = np.zeros((8, 8), dtype=int)
        m[2, 2] = 1
        out = surface_metrics(empty, m)
        assert out["warning"]
        assert out["hd95"] == pytest.approx(math.sqrt(2) * 8)
        assert out["assd"] == pytest.approx(math.sqrt(2) * 8)

    def test_full_mask_has_no_boundary(self):
        # An all-foreground mask never differs from a neighbor, so it also
        # trips the sentinel path.
        full = np.ones((8, 8), dtype=int)
        m = np.zeros((8, 8), dtype=int)
        m[2, 2] = 1
        out = surface_metrics(full, m)
        assert out["warning"]

    def test_bad_spacing(self):
        m = np.zeros((4, 4), dtype=int)
        m[1, 1] = 1
        with pytest.raises(ValueError, match="spacing"):
            surface_metrics(m, m, spacing=(1.0, -1.0))


class TestPixelMetrics:
    def test_identical(self):
        a = np.random.default_rng(0).uniform(size=(8, 8))
        assert pixel_metrics(a, a) == {"mae": 0.0, "mse": 0.0, "rmse": 0.0}

    def test_zeros_vs_ones(self):
        out = pixel_metrics(np.zeros((4, 4)), np.ones((4, 4)))
        assert out == {"mae": 1.0, "mse": 1.0, "rmse": 1.0}

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(6, 7))
        b = rng.uniform(size=(6, 7))
        mae = mse = 0.0
        for i in range(6):
            for j in range(7):
                mae += abs(a[i, j] - b[i, j])
                mse += (a[i, j] - b[i, j]) ** 2
        out = pixel_metrics(a, b)
        assert out["mae"] == pytest.approx(mae / 42, rel=1e-12)
        assert out["mse"] == pytest.approx(mse / 42, rel=1e-12)
        assert out["rmse"] == pytest.approx(math.sqrt(mse / 42), rel=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        a = rng.uniform(size=(8, 8))
        b = rng.uniform(size=(8, 8))
        perm = rng.permutation(64)
        pa = a.ravel()[perm].reshape(8, 8)
        pb = b.ravel()[perm].reshape(8, 8)
        assert pixel_metrics(a, b) == pixel_metrics(pa, pb)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError, match=r"\[0, 1\]"):
            pixel_metrics(np.full((3, 3), 1.5), np.zeros((3, 3)))


def brute_gaussian_filter(x, sigma=1.5, radius=5):
    """Explicit windowed convolution with edge padding (oracle route)."""
    offsets = np.arange(-radius, radius + 1)
    k1 = np.exp(-0.5 * (offsets / sigma) ** 2)
    k1 /= k1.sum()
    kernel = np.outer(k1, k1)
    padded = np.pad(x, radius, mode="edge")
    h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            out[i, j] = (padded[i : i + 2 * radius + 1, j : j + 2 * radius + 1] * kernel).sum()
    return out


def brute_ssim(a, b):
    """SSIM recomputed with the loop-convolution filter."""
    c1, c2 = 0.01**2, 0.03**2
    mu_a, mu_b = brute_gaussian_filter(a), brute_gaussian_filter(b)
    var_a = brute_gaussian_filter(a * a) - mu_a**2
    var_b = brute_gaussian_filter(b * b) - mu_b**2
    cov = brute_gaussian_filter(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(smap[5:-5, 5:-5].mean())


class TestStructuralMetrics:
    def test_identical_images(self):
        a = np.random.default_rng(0).uniform(size=(32, 32))
        out = structural_metrics(a, a)
        assert out["ssim"] == pytest.approx(1.0, abs=1e-6)
        assert out["ms_ssim"] == pytest.approx(1.0, abs=1e-6)

    def test_constant_images_closed_form(self):
        # Constant images have zero variance/covariance, so SSIM reduces to
        # the luminance term c1 / (mu_b^2 + c1) with mu_a = 0, mu_b = 1.
        a = np.zeros((16, 16))
        b = np.ones((16, 16))
        c1 = 0.01**2
        assert ssim(a, b) == pytest.approx(c1 / (1 + c1), rel=1e-9)
        assert ssim(a, b) < 1e-3

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(size=(24, 24))
        b = rng.uniform(size=(24, 24))
        assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-12)
        assert ms_ssim(a, b) == pytest.approx(ms_ssim(b, a), rel=1e-12)

    def test_matches_reference_implementation(self):
        from skimage.metrics import structural_similarity

        rng = np.random.default_rng(12)
        for _ in range(5):
            a = rng.uniform(size=(32, 32))
            b = np.clip(a + rng.normal(0, 0.1, size=(32, 32)), 0, 1)
            ref = structural_similarity(
                a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                data_range=1.0, win_size=11,
            )
            assert ssim(a, b) == pytest.approx(float(ref), abs=1e-10)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(21)
        a = rng.uniform(size=(16, 16))
        b = np.clip(a + rng.normal(0, 0.2, size=(16, 16)), 0, 1)
        assert ssim(a, b) == pytest.approx(brute_ssim(a, b), abs=1e-10)

    def test_scale_count_rule(self):
        assert ms_ssim_scale_count((32, 32)) == 1
        assert ms_ssim_scale_count((44, 44)) == 2
        assert ms_ssim_scale_count((64, 64)) == 2
        assert ms_ssim_scale_count((176, 176)) == 4
        assert ms_ssim_scale_count((1024, 1024)) == 5

    def test_single_scale_reduces_to_ssim(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(32, 32))
        b = rng.uniform(size=(32, 32))
        assert ms_ssim(a, b) == pytest.approx(max(ssim(a, b), 0.0), rel=1e-12)

    def test_two_scale_oracle(self):
        # Recompute the 64x64 two-scale value from loop-convolution SSIM
        # pieces and the renormalized weight pair.
        rng = np.random.default_rng(8)
        a = rng.uniform(size=(64, 64))
        b = np.clip(a + rng.normal(0, 0.15, size=(64, 64)), 0, 1)

        def brute_cs(x, y):
            c2 = 0.03**2
            mu_x, mu_y = brute_gaussian_filter(x), brute_gaussian_filter(y)
            var_x = brute_gaussian_filter(x * x) - mu_x**2
            var_y = brute_gaussian_filter(y * y) - mu_y**2
            cov = brute_gaussian_filter(x * y) - mu_x * mu_y
            return float(((2 * cov + c2) / (var_x + var_y + c2))[5:-5, 5:-5].mean())

        def pool(x):
            return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])

        w = np.array(MS_SSIM_WEIGHTS[:2])
        w = w / w.sum()
        expected = max(brute_cs(a, b), 0.0) ** w[0] * max(
            brute_ssim(pool(a), pool(b)), 0.0
        ) ** w[1]
        assert ms_ssim(a, b) == pytest.approx(expected, abs=1e-9)

    def test_too_small_image(self):
        with pytest.raises(ValueError, match=">="):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestMetricsReport:
    def _sample_report(self):
        report = MetricsReport(kind="segmentation", spacing=(1.0, 1.0))
        rng = np.random.default_rng(0)
        for i in range(7):
            report.add(
                f"case_{i:03d}",
                {"dice": rng.uniform(), "hd95": rng.uniform(0, 10)},
                warning=(i == 3),
            )
        return report

    def test_aggregates_match_recomputation(self):
        report = self._sample_report()
        dice_vals = np.array([row["dice"] for row in report.rows.values()])
        assert report.mean("dice") == pytest.approx(dice_vals.mean(), abs=1e-9)
        assert report.std("dice") == pytest.approx(dice_vals.std(ddof=1), abs=1e-9)

    def test_duplicate_case_rejected(self):
        report = self._sample_report()
        with pytest.raises(ValueError, match="duplicate"):
            report.add("case_000", {"dice": 1.0})

    def test_csv_round_trip(self, tmp_path):
        report = self._sample_report()
        path = tmp_path / "rows.csv"
        report.to_csv(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 7
        for row in rows:
            stored = report.rows[row["case_id"]]
            assert float(row["dice"]) == stored["dice"]
            assert float(row["hd95"]) == stored["hd95"]
        assert rows[3]["warning"] == "1"

    def test_from_csv_restores_exact_values(self, tmp_path):
        report = self._sample_report()
        path = tmp_path / "rows.csv"
        report.to_csv(path)
        loaded = MetricsReport.from_csv(path, kind="segmentation")
        assert loaded.rows == report.rows
        assert loaded.warnings == report.warnings
        assert loaded.summary() == report.summary()

    def test_from_csv_rejects_other_tables(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("name,value\nx,1\n")
        with pytest.raises(ValueError, match="per-case"):
            MetricsReport.from_csv(path, kind="segmentation")

    def test_summary_text(self):
        text = self._sample_report().summary_text()
        assert "metric set: segmentation" in text
        assert "cases: 7" in text
        assert "dice:" in text and "hd95:" in text
        assert "warnings: 1" in text

    def test_segmentation_row_shape(self):
        gt = np.zeros((16, 16), dtype=int)
        gt[4:10, 4:10] = 1
        pred = np.roll(gt, 1, axis=0)
        row = segmentation_metrics(pred, gt)
        assert set(row) == {"dice", "precision", "recall", "hd95", "assd", "warning"}
