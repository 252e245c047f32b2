import math

import numpy as np
import pytest

from wedgefill.core.config import ScheduleConfig
from wedgefill.core.errors import InvalidInputError
from wedgefill.diffusion.schedule import build_schedule
from wedgefill.evaluation.harness import (
    PROXY_DISCLAIMER,
    RESULT_COLUMNS,
    Method,
    TimingRow,
    fbp_method,
    format_results_csv,
    format_timing_csv,
    parse_results_csv,
    run_ablations,
    run_comparison,
    run_table,
    run_timing,
)
from wedgefill.evaluation.metrics import MetricReport, capped_psnr, evaluate, mean_report, psnr, ssim
from wedgefill.evaluation.tv import (
    _MaskedProjector,
    divergence,
    gradient,
    total_variation,
    tv_objective,
    tv_reconstruct,
)
from wedgefill.neural.network import init_params
from wedgefill.pipeline.data import build_dataset
from wedgefill.pipeline.models import ScoreModel, StudentModel, score_spec, student_spec
from wedgefill.tomo.geometry import AngleMask, ScanGeometry
from wedgefill.tomo.operators import apply_mask, fbp, radon_forward
from wedgefill.tomo.phantoms import random_ellipse_phantom, shepp_logan


@pytest.fixture
def tiny_dataset(tiny_config):
    return build_dataset(tiny_config, seed=7)


class TestMetrics:
    """PSNR, SSIM and the report helpers"""

    def test_psnr_reference_values(self, rng):
        a = rng.uniform(0.2, 0.8, size=(16, 16))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
        assert psnr(a, a) == math.inf

    def test_psnr_matches_loop(self, rng):
        a, b = rng.uniform(size=(2, 12, 12))
        total = 0.0
        for i in range(12):
            for j in range(12):
                total += (a[i, j] - b[i, j]) ** 2
        assert psnr(a, b) == pytest.approx(10.0 * math.log10(144.0 / total), rel=1e-12)

    def test_ssim_identity_and_symmetry(self, rng):
        a, b = rng.uniform(size=(2, 24, 24))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
        assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-12)
        assert ssim(a, 1.0 - a) < 0.5

    def test_ssim_shift_invariance(self, rng):
        """Adding 0.05 to both images barely moves SSIM away from dark regions"""
        a = 0.3 + 0.4 * random_ellipse_phantom(64, 2)
        b = a + rng.normal(0.0, 0.02, size=a.shape)
        assert abs(ssim(a + 0.05, b + 0.05) - ssim(a, b)) <= 1e-3

    def test_ssim_window_size(self):
        with pytest.raises(InvalidInputError):
            ssim(np.zeros((10, 12)), np.zeros((10, 12)))

    def test_metric_inputs_checked(self):
        with pytest.raises(InvalidInputError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(InvalidInputError):
            psnr(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)))
        bad = np.zeros((4, 4))
        bad[1, 1] = np.nan
        with pytest.raises(InvalidInputError):
            psnr(bad, np.zeros((4, 4)))

    def test_evaluate_clips_estimate(self, rng):
        """Values outside [0, 1] are clipped before scoring"""
        gt = rng.uniform(size=(16, 16))
        report = evaluate(gt + 2.0 * (gt > 0.5), gt)
        np.testing.assert_allclose(report.psnr, psnr(np.clip(gt + 2.0 * (gt > 0.5), 0, 1), gt))
        assert evaluate(gt, gt).proxy == 0.0

    def test_mean_report_caps_psnr(self):
        reports = [MetricReport(math.inf, 1.0, 0.0), MetricReport(30.0, 0.5, 0.2)]
        mean = mean_report(reports, cap_db=99.0)
        assert mean.psnr == pytest.approx(64.5)
        assert mean.ssim == pytest.approx(0.75)
        assert capped_psnr(math.inf) == 99.0
        with pytest.raises(InvalidInputError):
            mean_report([])


class TestTotalVariation:
    """Discrete gradient and the primal-dual solver"""

    def test_divergence_is_negative_adjoint(self, rng):
        x = rng.standard_normal((2, 9, 9))
        p = rng.standard_normal((2, 2, 9, 9))
        assert np.sum(gradient(x) * p) == pytest.approx(-np.sum(x * divergence(p)), rel=1e-12)

    def test_total_variation_of_an_edge(self):
        """A vertical unit step across n rows has TV = n"""
        x = np.zeros((8, 8))
        x[:, 4:] = 1.0
        assert total_variation(x) == pytest.approx(8.0)
        assert total_variation(np.full((8, 8), 0.3)) == 0.0

    def test_objective_drops_below_warm_start(self, tiny_geometry):
        mask = AngleMask.trailing(tiny_geometry, 60.0)
        truth = random_ellipse_phantom(16, 1)
        y = apply_mask(radon_forward(truth, tiny_geometry), mask)
        result = tv_reconstruct(y, mask, 0.01, 100)
        projector = _MaskedProjector(tiny_geometry, mask)
        start = np.clip(fbp(y, tiny_geometry), 0.0, 1.0)
        assert tv_objective(result.image, y, projector, 0.01) < tv_objective(start, y, projector, 0.01)
        assert result.image.min() >= 0.0 and result.image.max() <= 1.0
        assert [c.iteration for c in result.history] == list(range(10, 101, 10))
        assert result.operator_norm > 0

    def test_returns_ergodic_average(self, tiny_geometry):
        """The returned image is the average the last checkpoint was scored on"""
        mask = AngleMask.trailing(tiny_geometry, 60.0)
        y = radon_forward(random_ellipse_phantom(16, 4), tiny_geometry)
        result = tv_reconstruct(y, mask, 0.05, 40)
        projector = _MaskedProjector(tiny_geometry, mask)
        last = result.history[-1]
        assert last.iteration == 40
        assert tv_objective(result.image, apply_mask(y, mask), projector, 0.05) == pytest.approx(float(last.objective[0]), rel=1e-12)

    def test_least_squares_residual_decreases(self, tiny_geometry):
        """lambda_tv = 0 with every angle kept drives the residual down at each checkpoint"""
        mask = AngleMask.full(tiny_geometry)
        y = radon_forward(random_ellipse_phantom(16, 6), tiny_geometry)
        result = tv_reconstruct(y, mask, 0.0, 200, warm_start=False)
        residuals = np.array([float(c.residual[0]) for c in result.history])
        assert np.all(np.diff(residuals) <= 1e-3 * residuals[0])
        assert residuals[-1] <= 0.5 * residuals[0]

    def test_constant_phantom_recovered(self, tiny_geometry):
        """A constant image is the zero-TV exact-data optimum"""
        mask = AngleMask.full(tiny_geometry)
        truth = np.full(tiny_geometry.image_shape, 0.5)
        result = tv_reconstruct(radon_forward(truth, tiny_geometry), mask, 0.01, 500)
        assert np.mean(np.abs(result.image - truth)) <= 1e-2

    def test_batch_matches_single(self, tiny_geometry):
        mask = AngleMask.trailing(tiny_geometry, 90.0)
        images = np.stack([random_ellipse_phantom(16, 2), random_ellipse_phantom(16, 3)])
        y = radon_forward(images, tiny_geometry)
        batch = tv_reconstruct(y, mask, 0.05, 30)
        single = tv_reconstruct(y[1], mask, 0.05, 30)
        assert batch.image.shape == (2, 16, 16)
        np.testing.assert_allclose(batch.image[1], single.image, atol=1e-10)

    def test_arguments_checked(self, tiny_geometry):
        mask = AngleMask.trailing(tiny_geometry, 60.0)
        y = np.zeros(tiny_geometry.sinogram_shape)
        with pytest.raises(InvalidInputError):
            tv_reconstruct(y, mask, -1.0, 10)
        with pytest.raises(InvalidInputError):
            tv_reconstruct(y, mask, 0.1, 0)
        with pytest.raises(InvalidInputError):
            tv_reconstruct(np.zeros((30, 23)), mask, 0.1, 10)


def perfect_method(dataset):
    def reconstruct(sinograms, mask, seed):
        return np.asarray(dataset.test_images[:len(sinograms)], dtype=np.float64)
    return Method("perfect", reconstruct)


def noisy_method(dataset):
    def reconstruct(sinograms, mask, seed):
        noise = np.random.default_rng(seed).normal(0.0, 0.1, size=(len(sinograms),) + dataset.geometry.image_shape)
        return np.asarray(dataset.test_images[:len(sinograms)], dtype=np.float64) + noise
    return Method("noisy", reconstruct, stochastic=True)


class TestHarness:
    """Table assembly and CSV output"""

    def test_row_layout(self, tiny_dataset):
        """One aggregate row per (method, scenario); stochastic methods run `runs` times"""
        methods = [perfect_method(tiny_dataset), noisy_method(tiny_dataset)]
        aggregate, per_run = run_table(tiny_dataset, methods, [60.0, 120.0], runs=3, seed=5, threads=2)
        assert [(r.method, r.scenario_deg, r.run_seed) for r in aggregate] == [
            ("perfect", "60", "mean"), ("perfect", "120", "mean"),
            ("noisy", "60", "mean"), ("noisy", "120", "mean"),
        ]
        assert len(per_run) == 2 * 1 + 2 * 3
        assert per_run[0].run_seed == "-"
        noisy_seeds = [r.run_seed for r in per_run if r.method == "noisy" and r.scenario_deg == "60"]
        assert len(set(noisy_seeds)) == 3

    def test_csv_is_reproducible(self, tiny_dataset):
        """Same seeds, any thread count: identical bytes"""
        methods = [noisy_method(tiny_dataset), fbp_method(tiny_dataset.geometry)]
        first, _ = run_table(tiny_dataset, methods, [90.0], runs=2, seed=1, threads=1)
        second, _ = run_table(tiny_dataset, methods, [90.0], runs=2, seed=1, threads=4)
        assert format_results_csv(first) == format_results_csv(second)

    def test_csv_format(self, tiny_dataset):
        aggregate, _ = run_table(tiny_dataset, [perfect_method(tiny_dataset)], [60.0], runs=1, seed=0, test_limit=1)
        text = format_results_csv(aggregate, cap_db=99.0)
        lines = text.splitlines()
        assert lines[0] == PROXY_DISCLAIMER
        assert lines[1] == ",".join(RESULT_COLUMNS)
        assert lines[2] == "perfect,60,mean,99.000000,1.000000,0.00000000"
        rows = parse_results_csv(text)
        assert rows[0]["psnr_db"] == "99.000000"

    def test_comparison_and_ablation_tables(self, tiny_dataset):
        """Both tables share the run_table layout and seeding"""
        methods = [perfect_method(tiny_dataset), noisy_method(tiny_dataset)]
        expected, _ = run_table(tiny_dataset, methods, [90.0], runs=2, seed=4, threads=1)
        comparison, comparison_runs = run_comparison(tiny_dataset, methods, [90.0], runs=2, seed=4)
        ablations, _ = run_ablations(tiny_dataset, methods, [90.0], runs=2, seed=4)
        assert format_results_csv(comparison) == format_results_csv(expected)
        assert format_results_csv(ablations) == format_results_csv(expected)
        assert len(comparison_runs) == 1 + 2

    def test_timing_csv(self):
        text = format_timing_csv([TimingRow("student", 2, 0.25)])
        assert text == "method,network_passes,seconds\nstudent,2,0.250000\n"


class TestTiming:
    def test_network_pass_counts(self, tiny_dataset, rng):
        """The teacher needs T passes, the student one stacked pair"""
        schedule = build_schedule(ScheduleConfig(T=8))
        score = ScoreModel(init_params(score_spec(4), rng), score_spec(4), schedule)
        student = StudentModel(init_params(student_spec(4), rng), student_spec(4), schedule)
        rows = run_timing(score, student, tiny_dataset, 60.0, seed=1)
        assert [(row.method, row.network_passes) for row in rows] == [("teacher-ode-ddim", 8), ("student", 2)]
        assert all(row.seconds >= 0 for row in rows)


@pytest.mark.slow
class TestBaselines:
    def test_tv_beats_fbp_on_shepp_logan(self):
        """With 60 deg missing, TV gains at least 2 dB over FBP"""
        geometry = ScanGeometry(image_size=64, num_angles=90, angle_step_deg=2.0, detector_bins=96)
        mask = AngleMask.trailing(geometry, 60.0)
        truth = shepp_logan(64)
        y = apply_mask(radon_forward(truth, geometry), mask)
        fbp_report = evaluate(fbp(y, geometry), truth)
        tv_report = evaluate(tv_reconstruct(y, mask, 0.1, 500).image, truth)
        assert tv_report.psnr >= fbp_report.psnr + 2.0
