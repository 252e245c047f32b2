import numpy as np
import pytest
from scipy import ndimage

from wedgefill.core.config import ScheduleConfig, StageTrainingConfig
from wedgefill.core.errors import InvalidInputError, MissingArtifactError, TrainingDivergedError
from wedgefill.core.tensor_store import get_store, read_tensors
from wedgefill.diffusion.schedule import build_schedule, marginal_params
from wedgefill.neural.losses import perceptual_proxy
from wedgefill.neural.network import ModelParams, init_params
from wedgefill.pipeline.data import SinogramDataset, build_dataset, low_fidelity_inpaint
from wedgefill.pipeline.distill import (
    PairSet,
    direct_predict,
    distill_loss_and_grad,
    distill_student,
    generate_pairs,
    rectify_rnsd,
    student_predict,
    teacher_restore_from,
    teacher_restore_ode,
)
from wedgefill.pipeline.models import (
    DirectModel,
    PostprocModel,
    RestorationModels,
    ScoreModel,
    StudentModel,
    postproc_spec,
    score_spec,
    student_spec,
)
from wedgefill.pipeline.restore import (
    data_consistency_error,
    ensemble_sample,
    ensemble_statistics,
    full_restore,
    postproc_refine,
)
from wedgefill.pipeline.stages import PipelineRunner
from wedgefill.pipeline.training import fresh_params, run_training, train_score
from wedgefill.tomo.geometry import AngleMask
from wedgefill.tomo.operators import apply_mask, fbp, radon_forward
from wedgefill.tomo.phantoms import random_ellipse_phantom


@pytest.fixture
def tiny_dataset(tiny_config):
    return build_dataset(tiny_config, seed=7)


@pytest.fixture
def tiny_schedule():
    return build_schedule(ScheduleConfig(T=8))


@pytest.fixture
def zero_student(tiny_schedule, rng):
    """Freshly initialized student: its residual is exactly zero"""
    return StudentModel(init_params(student_spec(4), rng), student_spec(4), tiny_schedule)


class TestDataset:
    """Phantoms, sinograms and masks of a run"""

    def test_contents(self, tiny_dataset):
        assert tiny_dataset.train_sinograms.shape == (4, 30, 24)
        assert tiny_dataset.test_images.shape == (2, 16, 16)
        assert list(tiny_dataset.masks) == ["60", "90", "120"]
        assert tiny_dataset.sinogram_scale == pytest.approx(float(tiny_dataset.train_sinograms.max()))
        assert tiny_dataset.mask_for(90).missing_rows == 15

    def test_deterministic(self, tiny_config, tiny_dataset):
        again = build_dataset(tiny_config, seed=7)
        assert again.train_sinograms.tobytes() == tiny_dataset.train_sinograms.tobytes()
        other = build_dataset(tiny_config, seed=8)
        assert not np.array_equal(other.train_images, tiny_dataset.train_images)

    def test_tensor_round_trip(self, tiny_config, tiny_dataset):
        again = SinogramDataset.from_tensors(tiny_dataset.to_tensors(), tiny_config)
        assert again.sinogram_scale == tiny_dataset.sinogram_scale
        assert list(again.masks) == list(tiny_dataset.masks)
        for key, mask in tiny_dataset.masks.items():
            np.testing.assert_array_equal(again.masks[key].kept, mask.kept)

    def test_unknown_scenario(self, tiny_dataset):
        with pytest.raises(InvalidInputError):
            tiny_dataset.mask_for(45)


class TestLowFidelity:
    """Angular interpolation across the missing wedge"""

    def test_linear_in_angle_is_reproduced(self, small_geometry):
        """Rows that vary linearly with the angle are filled exactly"""
        mask = AngleMask(geometry=small_geometry, missing_deg=60.0, missing_start_deg=30.0)
        profile = np.linspace(0.5, 1.5, small_geometry.detector_bins)
        sino = np.arange(small_geometry.num_angles, dtype=np.float64)[:, None] * profile[None, :]
        filled = low_fidelity_inpaint(apply_mask(sino, mask), mask)
        np.testing.assert_allclose(filled, sino, rtol=1e-12)

    def test_wrap_uses_flipped_rows(self, wedge_mask, small_geometry):
        """A trailing wedge interpolates toward row 0 with the detector reversed"""
        t = small_geometry.detector_positions()
        sino = np.tile(t ** 2, (small_geometry.num_angles, 1))
        filled = low_fidelity_inpaint(apply_mask(sino, wedge_mask), wedge_mask)
        np.testing.assert_allclose(filled, sino, rtol=1e-12)

    def test_beats_masked_zeros(self, small_geometry):
        """On a smooth phantom the filled sinogram is closer to the full one than the zero-filled one"""
        image = ndimage.gaussian_filter(random_ellipse_phantom(32, 3), 2.0)
        mask = AngleMask.trailing(small_geometry, 60.0)
        sino = radon_forward(image, small_geometry)
        masked = apply_mask(sino, mask)

        def sino_psnr(estimate):
            return 10.0 * np.log10(sino.max() ** 2 / np.mean((estimate - sino) ** 2))

        assert sino_psnr(low_fidelity_inpaint(masked, mask)) > sino_psnr(masked)

    def test_kept_rows_untouched(self, wedge_mask, small_geometry, rng):
        sino = rng.uniform(size=small_geometry.sinogram_shape)
        filled = low_fidelity_inpaint(sino, wedge_mask)
        kept = wedge_mask.kept
        assert filled[kept].tobytes() == sino[kept].tobytes()

    def test_full_mask_is_identity(self, small_geometry, rng):
        sino = rng.uniform(size=small_geometry.sinogram_shape)
        np.testing.assert_array_equal(low_fidelity_inpaint(sino, AngleMask.full(small_geometry)), sino)


class TestRectification:
    """Observed rows come from the measurement"""

    def test_kept_rows_bit_exact(self, wedge_mask, small_geometry, rng):
        y = apply_mask(rng.uniform(size=small_geometry.sinogram_shape), wedge_mask)
        x0_hat = rng.uniform(size=small_geometry.sinogram_shape)
        rectified = rectify_rnsd(x0_hat, y, wedge_mask)
        kept = wedge_mask.kept
        assert rectified[kept].tobytes() == y[kept].tobytes()
        assert rectified[~kept].tobytes() == x0_hat[~kept].tobytes()
        assert data_consistency_error(rectified[None], y, wedge_mask) == 0.0

    def test_shape_mismatch(self, wedge_mask):
        with pytest.raises(InvalidInputError):
            rectify_rnsd(np.zeros((60, 48)), np.zeros((60, 47)), wedge_mask)


class TestEnsemble:
    """One-step sampling and its statistics"""

    def test_statistics(self, rng):
        """Unbiased std; a single member has zero spread"""
        images = rng.standard_normal((5, 4, 4))
        mean, std = ensemble_statistics(images)
        np.testing.assert_allclose(mean, images.mean(axis=0))
        np.testing.assert_allclose(std, images.std(axis=0, ddof=1))
        _, single = ensemble_statistics(images[:1])
        assert not single.any()

    def test_members_match_observation(self, tiny_dataset, zero_student):
        mask = tiny_dataset.mask_for(60)
        y = apply_mask(tiny_dataset.test_sinograms[0], mask)
        members = ensemble_sample(zero_student, y, mask, 3, seed=11, sinogram_scale=tiny_dataset.sinogram_scale)
        assert members.shape == (3, 30, 24)
        assert data_consistency_error(members, y, mask) == 0.0
        assert not np.array_equal(members[0], members[1])

    def test_seeded(self, tiny_dataset, zero_student):
        """Member i only depends on (seed, i)"""
        mask = tiny_dataset.mask_for(90)
        y = apply_mask(tiny_dataset.test_sinograms[1], mask)
        a = ensemble_sample(zero_student, y, mask, 3, seed=5)
        b = ensemble_sample(zero_student, y, mask, 2, seed=5)
        assert a[:2].tobytes() == b.tobytes()

    def test_spread_inside_the_wedge(self, tiny_dataset, zero_student):
        """Members differ on missing rows only"""
        mask = tiny_dataset.mask_for(60)
        y = apply_mask(tiny_dataset.test_sinograms[0], mask)
        members = ensemble_sample(zero_student, y, mask, 10, seed=3, sinogram_scale=tiny_dataset.sinogram_scale)
        _, std = ensemble_statistics(members)
        assert std[~mask.kept].max() > 0.0
        assert not std[mask.kept].any()

    def test_empty_ensemble_rejected(self, tiny_dataset, zero_student):
        mask = tiny_dataset.mask_for(60)
        with pytest.raises(InvalidInputError):
            ensemble_sample(zero_student, tiny_dataset.test_sinograms[0], mask, 0, seed=1)
        assert data_consistency_error(np.zeros((0, 30, 24)), tiny_dataset.test_sinograms[0], mask) == 0.0

    def test_zero_student_predicts_zero_residual(self, zero_student, rng):
        x_T = rng.standard_normal((2, 30, 24))
        assert not student_predict(zero_student, x_T, x_T).any()


class TestModels:
    """Direct inpainter, post-processor and the full restoration"""

    def test_zero_direct_is_low_fidelity(self, tiny_dataset, rng):
        mask = tiny_dataset.mask_for(120)
        mu = tiny_dataset.normalize(apply_mask(tiny_dataset.test_sinograms[0], mask))
        direct = DirectModel(init_params(student_spec(4), rng), student_spec(4))
        np.testing.assert_allclose(direct_predict(direct, mu, mask), low_fidelity_inpaint(mu, mask))

    def test_postproc_shapes(self, rng):
        tau = PostprocModel(init_params(postproc_spec(4), rng, zero_output=False), postproc_spec(4))
        assert postproc_refine(tau, np.zeros((16, 16)), np.zeros((16, 16))).shape == (16, 16)
        assert postproc_refine(tau, np.zeros((2, 16, 16)), np.zeros((2, 16, 16))).shape == (2, 16, 16)
        with pytest.raises(InvalidInputError):
            postproc_refine(tau, np.zeros((16, 16)), np.zeros((15, 16)))

    def test_restore_without_sinogram_stage(self, tiny_dataset, rng):
        """The nosino post-processor sees masked FBP and a zero std"""
        tau = PostprocModel(init_params(postproc_spec(4), rng), postproc_spec(4), "postproc-nosino")
        models = RestorationModels(student=None, postproc=tau, sinogram_scale=tiny_dataset.sinogram_scale)
        mask = tiny_dataset.mask_for(60)
        y = tiny_dataset.test_sinograms[0]
        result = full_restore(models, tiny_dataset.geometry, y, mask, 4, seed=3)
        np.testing.assert_allclose(result.fbp_mean, fbp(apply_mask(y, mask), tiny_dataset.geometry))
        assert not result.fbp_std.any()
        assert result.ensemble.size == 0

    def test_full_restore_intermediates(self, tiny_dataset, zero_student, rng):
        tau = PostprocModel(init_params(postproc_spec(4), rng), postproc_spec(4))
        models = RestorationModels(student=zero_student, postproc=tau, sinogram_scale=tiny_dataset.sinogram_scale)
        mask = tiny_dataset.mask_for(90)
        result = full_restore(models, tiny_dataset.geometry, tiny_dataset.test_sinograms[0], mask, 3, seed=2)
        assert result.ensemble.shape == (3, 30, 24)
        assert result.fbp_images.shape == (3, 16, 16)
        assert np.all(result.fbp_std >= 0)
        # zero-initialized refiner
        assert not result.image.any()


class TestDistillation:
    """Pairs and the distillation objective"""

    def test_loss_gradient(self, rng):
        """The boundary term only pulls on missing rows"""
        shape = (2, 6, 5)
        r_hat, x_T, x0_hat, y, gt = rng.standard_normal((5,) + shape)
        kept = np.ones((2, 6), dtype=bool)
        kept[:, 4:] = False
        _, grad = distill_loss_and_grad(r_hat, x_T, x0_hat, y, kept, gt, 0.3, 0.5)

        def loss(r):
            return distill_loss_and_grad(r, x_T, x0_hat, y, kept, gt, 0.3, 0.5)[0]

        h = 1e-6
        for index in [(0, 1, 2), (1, 5, 4), (0, 4, 0)]:
            plus, minus = r_hat.copy(), r_hat.copy()
            plus[index] += h
            minus[index] -= h
            assert grad[index] == pytest.approx((loss(plus) - loss(minus)) / (2 * h), rel=1e-5, abs=1e-9)

    def test_without_boundary_term(self, rng):
        r_hat, x_T, x0_hat = rng.standard_normal((3, 1, 4, 4))
        kept = np.ones((1, 4), dtype=bool)
        value, _ = distill_loss_and_grad(r_hat, x_T, x0_hat, x_T, kept, x0_hat, 0.0, 0.5)
        assert value == pytest.approx(perceptual_proxy(r_hat, x_T - x0_hat, 0.5))

    def test_pair_generation(self, tiny_dataset, tiny_schedule, rng):
        """Pairs are float32, seeded, and survive a tensor round trip"""
        score = ScoreModel(init_params(score_spec(4), rng), score_spec(4), tiny_schedule)
        keys = ["60", "90", "120"]
        pairs = generate_pairs(score, tiny_dataset, 5, seed=3, scenario_keys=keys, batch_size=2)
        assert len(pairs) == 5
        assert pairs.x_T.dtype == np.float32
        assert set(pairs.scenarios) <= set(keys)
        again = generate_pairs(score, tiny_dataset, 5, seed=3, scenario_keys=keys, batch_size=2)
        assert again.x0_hat.tobytes() == pairs.x0_hat.tobytes()

        loaded = PairSet.from_tensors(pairs.to_tensors(), tiny_dataset)
        assert loaded.scenarios == pairs.scenarios
        record = loaded[4]
        np.testing.assert_array_equal(record.mask.kept, tiny_dataset.masks[pairs.scenarios[4]].kept)
        kept = record.mask.kept
        assert record.mu[~kept].max() == 0.0

    def test_pairs_replay_from_stored_inputs(self, tiny_dataset, tiny_schedule, rng):
        """The teacher run again on a stored batch of (x_T, mu) gives the stored x0_hat bit for bit"""
        score = ScoreModel(init_params(score_spec(4), rng, zero_output=False), score_spec(4), tiny_schedule)
        pairs = generate_pairs(score, tiny_dataset, 4, seed=9, scenario_keys=["60", "90"], batch_size=2)
        for begin in (0, 2):
            batch = slice(begin, begin + 2)
            masks = [pairs.masks[key] for key in pairs.scenarios[batch]]
            replayed = teacher_restore_from(score, pairs.x_T[batch].astype(np.float64),
                                            pairs.mu[batch].astype(np.float64), masks)
            assert replayed.astype(np.float32).tobytes() == pairs.x0_hat[batch].tobytes()

    def test_terminal_draws_center_on_mu(self, tiny_dataset, tiny_schedule, rng):
        """Over all pairs, x_T - mu averages to zero within three standard errors"""
        score = ScoreModel(init_params(score_spec(4), rng), score_spec(4), tiny_schedule)
        pairs = generate_pairs(score, tiny_dataset, 8, seed=4, scenario_keys=["60", "90", "120"], batch_size=4)
        assert len(pairs) == 8
        _, std_T = marginal_params(tiny_schedule, tiny_schedule.T)
        diff = pairs.x_T.astype(np.float64) - pairs.mu.astype(np.float64)
        assert abs(diff.mean()) <= 3.0 * float(std_T) / np.sqrt(diff.size)

    def test_teacher_restoration_is_seeded(self, tiny_dataset, tiny_schedule, rng):
        """Same seed, same x0_hat; a single sinogram keeps its shape"""
        score = ScoreModel(init_params(score_spec(4), rng), score_spec(4), tiny_schedule)
        mask = tiny_dataset.masks["90"]
        mu = apply_mask(tiny_dataset.normalize(tiny_dataset.test_sinograms[:2]), mask)
        first = teacher_restore_ode(score, mu, mask, seed=11)
        assert first.shape == mu.shape
        assert np.all(np.isfinite(first))
        assert teacher_restore_ode(score, mu, mask, seed=11).tobytes() == first.tobytes()
        assert not np.array_equal(teacher_restore_ode(score, mu, mask, seed=12), first)
        single = teacher_restore_ode(score, mu[0], mask, seed=11)
        assert single.shape == mu[0].shape


class TestTrainingStages:
    """Score and distillation stages on the tiny dataset"""

    def test_train_score(self, tiny_config, tiny_dataset, tiny_schedule):
        cfg = tiny_config.training_config("score")
        params, rows = train_score(tiny_dataset, cfg, tiny_schedule, ["60", "90", "120"])
        assert [step for step, _ in rows] == list(range(1, cfg.section.iterations + 1))
        assert params.step_count == cfg.section.iterations
        assert all(np.isfinite(loss) for _, loss in rows)
        initial = fresh_params("score", score_spec(cfg.section.hidden_channels), cfg.seed)
        assert any(not np.array_equal(params[name], initial[name]) for name in initial.names)

    def test_distill_student(self, tiny_config, tiny_dataset, tiny_schedule, rng):
        """Distillation from teacher pairs is seeded and moves the weights"""
        score = ScoreModel(init_params(score_spec(4), rng), score_spec(4), tiny_schedule)
        pairs = generate_pairs(score, tiny_dataset, 4, seed=2, scenario_keys=["60", "90"], batch_size=2)
        cfg = tiny_config.training_config("distill")
        params, rows = distill_student(pairs, cfg, tiny_schedule)
        again, rows_again = distill_student(pairs, cfg, tiny_schedule)
        assert len(rows) == cfg.section.iterations
        assert rows == rows_again
        assert all(params[name].tobytes() == again[name].tobytes() for name in params.names)
        initial = fresh_params("distill", student_spec(cfg.section.hidden_channels), cfg.seed)
        assert any(not np.array_equal(params[name], initial[name]) for name in initial.names)


class TestTrainingLoop:
    """Seeded optimizer loop"""

    @staticmethod
    def quadratic_step(calls, fail_at=None):
        def step_fn(params, rng):
            calls.append(1)
            if fail_at is not None and len(calls) == fail_at:
                raise RuntimeError("interrupted")
            target = rng.standard_normal(3)
            diff = params["w"] - target
            return float(np.mean(diff ** 2)), {"w": 2.0 * diff / diff.size}
        return step_fn

    @staticmethod
    def fresh():
        return ModelParams.from_tensors({"param/w": np.array([1.0, -1.0, 0.5])}, dtype=np.float64)

    def test_resume_matches_uninterrupted(self):
        """Stop after 3 steps, checkpoint, resume: same parameters and loss rows as one run"""
        section = StageTrainingConfig(iterations=6, lr=0.05, log_every=1)
        full = self.fresh()
        full_rows = run_training("score", full, section, 6, 9, self.quadratic_step([]))
        assert [step for step, _ in full_rows] == [1, 2, 3, 4, 5, 6]

        partial = self.fresh()
        with pytest.raises(RuntimeError):
            run_training("score", partial, section, 6, 9, self.quadratic_step([], fail_at=4))
        assert partial.step_count == 3
        restored = ModelParams.from_tensors(partial.to_tensors(), dtype=np.float64)
        rows = run_training("score", restored, section, 6, 9, self.quadratic_step([]), full_rows[:3])

        assert rows == full_rows
        assert restored["w"].tobytes() == full["w"].tobytes()

    def test_finished_run_is_a_no_op(self):
        section = StageTrainingConfig(iterations=2)
        params = self.fresh()
        params.step_count = 2
        calls = []
        assert run_training("score", params, section, 2, 0, self.quadratic_step(calls), [(1, 0.5), (2, 0.4)]) \
            == [(1, 0.5), (2, 0.4)]
        assert not calls

    def test_non_finite_loss(self):
        section = StageTrainingConfig(iterations=3)
        with pytest.raises(TrainingDivergedError):
            run_training("score", self.fresh(), section, 3, 0, lambda params, rng: (float("nan"), {}))

    def test_initial_weights_are_seeded(self):
        spec = score_spec(4)
        a = fresh_params("score", spec, 3)
        b = fresh_params("score", spec, 3)
        c = fresh_params("direct", spec, 3)
        assert a["conv0.weight"].tobytes() == b["conv0.weight"].tobytes()
        assert not np.array_equal(a["conv0.weight"], c["conv0.weight"])


class TestPipelineRunner:
    """Stage prerequisites and a tiny end-to-end run"""

    def test_missing_dataset(self, tiny_config, tmp_path):
        runner = PipelineRunner(tiny_config, get_store(tmp_path / "run"))
        with pytest.raises(MissingArtifactError) as excinfo:
            runner.train("score")
        assert "gen-dataset" in str(excinfo.value)

    def test_missing_prerequisite(self, tiny_config, tmp_path):
        runner = PipelineRunner(tiny_config, get_store(tmp_path / "run"))
        runner.generate_dataset()
        with pytest.raises(MissingArtifactError) as excinfo:
            runner.train("distill")
        assert "score" in str(excinfo.value)

    @pytest.mark.slow
    def test_all_stages(self, tiny_config, tmp_path):
        """Every stage trains on the tiny config and writes its artifacts"""
        store = get_store(tmp_path / "run")
        runner = PipelineRunner(tiny_config, store)
        runner.generate_dataset()
        for stage in ("score", "pairs", "distill", "direct", "postproc", "postproc-noproxy", "postproc-nosino"):
            runner.train(stage)
        assert set(store.existing_stages()) == set(store.STAGES)

        manifest = store.read_manifest(store.stage("score").manifest)
        assert manifest["config_hash"] == tiny_config.config_hash
        assert manifest["step_count"] == "6"
        assert len(read_tensors(store.pairs_path)["pairs/x_T"]) == 4

        runner.train("score", resume=True)
        assert store.read_manifest(store.stage("score").manifest)["step_count"] == "6"

        models = runner.restoration_models()
        mask = runner.load_dataset().mask_for(90)
        y = runner.load_dataset().test_sinograms[0]
        result = full_restore(models, runner.load_dataset().geometry, y, mask, 2, seed=1)
        assert data_consistency_error(result.ensemble, apply_mask(y, mask), mask) == 0.0
        assert np.all(np.isfinite(result.image))
