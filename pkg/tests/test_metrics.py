import math

import numpy as np
import pytest

from helpers import naive_ssim

from ctmar.errors import ConfigError
from ctmar.metrics import (
    EvalReport,
    PatientMetrics,
    histogram_stats,
    hu_correlation,
    psnr,
    roi_difference_map,
    roi_metrics,
    ssim_index,
)
from ctmar.volume import Modality, Volume


def vol(data, modality=Modality.KVCT):
    return Volume(np.asarray(data, dtype=np.float32), modality)


class TestPsnr:
    def test_identical_inputs_infinite(self):
        x = np.random.default_rng(0).normal(size=(2, 16, 16))
        assert psnr(x, x, 2.0) == math.inf

    def test_closed_form_maxval_one(self):
        x = np.zeros((10, 10))
        y = np.full((10, 10), 0.1)  # MSE 0.01
        assert psnr(x, y, 1.0) == pytest.approx(20.0, abs=1e-9)

    def test_closed_form_maxval_two(self):
        x = np.zeros((10, 10))
        y = np.full((10, 10), 0.2)  # MSE 0.04
        assert psnr(x, y, 2.0) == pytest.approx(20.0, abs=1e-9)

    def test_monotone_in_mse(self):
        x = np.zeros((8, 8))
        vals = [psnr(x, np.full((8, 8), e), 2.0) for e in (0.05, 0.1, 0.2, 0.4)]
        assert vals == sorted(vals, reverse=True)


class TestRoiMetrics:
    def test_full_mask_equals_unmasked(self):
        rng = np.random.default_rng(1)
        pred = rng.uniform(-1, 1, size=(2, 24, 24))
        target = rng.uniform(-1, 1, size=(2, 24, 24))
        mask = np.ones_like(pred, dtype=bool)
        p, s = roi_metrics(pred, target, mask)
        assert p == pytest.approx(psnr(pred, target, 2.0), abs=1e-9)
        assert s == pytest.approx(ssim_index(pred, target), abs=1e-7)

    def test_errors_outside_mask_ignored(self):
        rng = np.random.default_rng(2)
        target = rng.uniform(-1, 1, size=(1, 24, 24))
        pred = target.copy()
        mask = np.zeros_like(target, dtype=bool)
        mask[0, 4:20, 4:20] = True
        pred[0, 0, 0] = 5.0  # large error outside the mask
        p, s = roi_metrics(pred, target, mask)
        assert p == math.inf

    def test_masked_mse_matches_bruteforce(self):
        rng = np.random.default_rng(3)
        pred = rng.uniform(-1, 1, size=(2, 24, 24))
        target = rng.uniform(-1, 1, size=(2, 24, 24))
        mask = rng.random((2, 24, 24)) > 0.4
        p, _ = roi_metrics(pred, target, mask)
        acc = []
        for z in range(2):
            for i in range(24):
                for j in range(24):
                    if mask[z, i, j]:
                        acc.append((pred[z, i, j] - target[z, i, j]) ** 2)
        mse = float(np.mean(acc))
        assert p == pytest.approx(10 * math.log10(4.0 / mse), abs=1e-7)

    def test_empty_mask_rejected(self):
        with pytest.raises(ConfigError):
            roi_metrics(np.zeros((1, 16, 16)), np.zeros((1, 16, 16)), np.zeros((1, 16, 16), bool))


class TestHuCorrelation:
    def _pair(self, kv_data):
        kv = vol(kv_data)
        mv_data = 0.5 * np.asarray(kv_data) + 10.0
        return kv, Volume(mv_data.astype(np.float32), Modality.MVCT)

    def test_perfect_linear_relation(self):
        rng = np.random.default_rng(4)
        kv, mv = self._pair(rng.uniform(-500, 1500, size=(1, 4, 16, 16)))
        assert hu_correlation(kv, mv, "all") == pytest.approx(1.0, abs=1e-9)

    def test_independent_noise_near_zero(self):
        rng = np.random.default_rng(5)
        kv = vol(rng.uniform(-500, 1500, size=(1, 8, 64, 64)))
        mv = Volume(rng.uniform(0, 800, size=(1, 8, 64, 64)).astype(np.float32), Modality.MVCT)
        assert hu_correlation(kv, mv, "all") < 0.05

    def test_bounded_and_affine_invariant(self):
        rng = np.random.default_rng(6)
        kv_data = rng.uniform(-500, 1500, size=(1, 4, 32, 32))
        kv = vol(kv_data)
        mv_data = (0.3 * kv_data + rng.normal(0, 100, size=kv_data.shape)).astype(np.float32)
        mv = Volume(mv_data, Modality.MVCT)
        r2 = hu_correlation(kv, mv, "all")
        assert 0.0 <= r2 <= 1.0
        kv_scaled = vol(2.0 * kv_data - 300.0)
        assert hu_correlation(kv_scaled, mv, "all") == pytest.approx(r2, abs=1e-9)

    def test_subset_selection(self):
        data = np.zeros((1, 4, 16, 16), dtype=np.float32)
        data[0, 2, 8, 8] = 2500.0  # slice 2 is an artifact slice
        kv = vol(data)
        mv = Volume(np.ones_like(data), Modality.MVCT)
        with pytest.raises(ConfigError):
            hu_correlation(kv, mv, "nonsense")
        # degenerate fits return 0 rather than raising
        assert hu_correlation(kv, mv, "clean") == 0.0

    def test_ordering_on_synthetic_case(self):
        from ctmar.phantom import PhantomConfig, generate_patient_case

        case = generate_patient_case(PhantomConfig(seed=5))
        r2_clean = hu_correlation(case.kvct, case.mvct, "clean", case.body_mask)
        r2_art = hu_correlation(case.kvct, case.mvct, "artifact", case.body_mask)
        assert r2_clean > r2_art


class TestHistogramStats:
    def test_symmetric_distribution_near_zero_skew(self):
        rng = np.random.default_rng(7)
        data = rng.normal(500, 100, size=(1, 8, 128, 128)).astype(np.float32)
        stats = histogram_stats(vol(data))
        assert abs(stats.skewness) < 0.05

    def test_constant_volume_skew_zero(self):
        stats = histogram_stats(vol(np.full((1, 2, 16, 16), 100.0)))
        assert stats.skewness == 0.0
        assert stats.std == 0.0

    def test_bins_span_window(self):
        stats = histogram_stats(vol(np.zeros((1, 1, 16, 16))))
        assert len(stats.counts) == 256
        assert stats.bin_edges[0] == -1024.0
        assert stats.bin_edges[-1] == 3071.0

    def test_right_tail_increases_skew(self):
        rng = np.random.default_rng(8)
        base = rng.normal(0, 50, size=(1, 4, 64, 64)).astype(np.float32)
        spiked = base.copy()
        spiked[0, 0, :8, :8] = 3000.0
        assert histogram_stats(vol(spiked)).skewness > histogram_stats(vol(base)).skewness


class TestRoiDifferenceMap:
    def test_zero_on_identical(self):
        x = np.random.default_rng(9).normal(size=(2, 8, 8))
        assert np.all(roi_difference_map(x, x) == 0.0)

    def test_clipping_at_250(self):
        a = np.zeros((1, 4, 4))
        b = np.full((1, 4, 4), 300.0)
        assert np.all(roi_difference_map(a, b) == 250.0)

    def test_in_range_value_passes_through(self):
        a = np.zeros((1, 4, 4))
        b = np.full((1, 4, 4), 100.0)
        assert np.all(roi_difference_map(a, b) == 100.0)

    def test_box_selection(self):
        a = np.zeros((4, 8, 8))
        b = np.full((4, 8, 8), 50.0)
        patch = roi_difference_map(a, b, roi_box=(1, 3, 2, 6, 0, 4))
        assert patch.shape == (2, 4, 4)


class TestEvalReport:
    def test_aggregate_is_mean_of_patients(self):
        patients = [
            PatientMetrics("a", psnr_all=30.0, ssim_all=0.9, r2_all=0.8),
            PatientMetrics("b", psnr_all=20.0, ssim_all=0.7, r2_all=0.6),
        ]
        report = EvalReport(patients)
        report.compute_aggregate()
        assert report.aggregate["psnr_all"] == pytest.approx(25.0, abs=1e-9)
        assert report.aggregate["ssim_all"] == pytest.approx(0.8, abs=1e-9)
        assert report.aggregate["r2_all"] == pytest.approx(0.7, abs=1e-9)

    def test_infinite_psnr_serialized_as_inf(self, tmp_path):
        patients = [PatientMetrics("a", psnr_all=math.inf, ssim_all=1.0)]
        report = EvalReport(patients)
        report.compute_aggregate()
        text_path, csv_path = report.write(tmp_path)
        assert "psnr_all=inf" in text_path.read_text()
        assert ",inf," in csv_path.read_text()

    def test_csv_header_documented(self, tmp_path):
        report = EvalReport([PatientMetrics("a", 1.0, 0.5)])
        report.compute_aggregate()
        _, csv_path = report.write(tmp_path)
        header = csv_path.read_text().splitlines()[0]
        assert header.startswith("patient_id,psnr_all,ssim_all")


class TestSsimIndexOracle:
    def test_matches_naive_on_volumes(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(-1, 1, size=(2, 20, 20))
        y = rng.uniform(-1, 1, size=(2, 20, 20))
        ref = np.mean([naive_ssim(x[z], y[z]) for z in range(2)])
        assert ssim_index(x, y) == pytest.approx(ref, abs=1e-6)
