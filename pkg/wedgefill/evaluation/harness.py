"""
Comparison and ablation tables.

A table is a list of methods evaluated on the test set under each missing-wedge
scenario. Every (method, scenario, run) cell is independent, so cells run on
a thread pool capped by WEDGEFILL_THREADS; rows are assembled in a fixed order
afterwards, so the CSV bytes only depend on the seeds.
"""

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from wedgefill.core.config import settings
from wedgefill.diffusion.sampling import derive_seed, make_rng, terminal_sample
from wedgefill.evaluation.metrics import MetricReport, capped_psnr, evaluate, mean_report
from wedgefill.evaluation.tv import tv_reconstruct
from wedgefill.pipeline.data import SinogramDataset, scenario_key
from wedgefill.pipeline.distill import direct_predict, rectify_rnsd, student_predict, teacher_restore_ode
from wedgefill.pipeline.models import DirectModel, RestorationModels, ScoreModel, StudentModel
from wedgefill.pipeline.restore import ensemble_sample, ensemble_statistics, full_restore
from wedgefill.tomo.geometry import AngleMask, ScanGeometry
from wedgefill.tomo.operators import apply_mask, fbp

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("method", "scenario_deg", "run_seed", "psnr_db", "ssim", "proxy")
TIMING_COLUMNS = ("method", "network_passes", "seconds")
PROXY_DISCLAIMER = (
    "# proxy = MSE + 0.5 * MSE of image gradients, a stand-in for a learned perceptual "
    "metric; its values are not comparable to LPIPS"
)

# (test sinograms (N, A, bins) raw units, mask, run seed) -> (N, n, n) images
BatchReconstructor = Callable[[np.ndarray, AngleMask, int], np.ndarray]


@dataclass(frozen=True)
class Method:
    """One table row family"""

    name: str
    reconstruct: BatchReconstructor
    stochastic: bool = False


@dataclass(frozen=True)
class ResultRow:
    method: str
    scenario_deg: str
    run_seed: str
    report: MetricReport

    def as_csv_fields(self, cap_db: float) -> List[str]:
        return [
            self.method,
            self.scenario_deg,
            self.run_seed,
            f"{capped_psnr(self.report.psnr, cap_db):.6f}",
            f"{self.report.ssim:.6f}",
            f"{self.report.proxy:.8f}",
        ]


# Method factories

def fbp_method(geometry: ScanGeometry) -> Method:
    def reconstruct(sinograms, mask, seed):
        return fbp(apply_mask(sinograms, mask), geometry)
    return Method("fbp", reconstruct)


def tv_method(geometry: ScanGeometry, lambda_tv: float, iterations: int) -> Method:
    def reconstruct(sinograms, mask, seed):
        result = tv_reconstruct(apply_mask(sinograms, mask), mask, lambda_tv, iterations, geometry)
        if result.stalled:
            logger.warning(f"TV baseline did not converge at {mask.missing_deg:g} deg missing")
        return result.image
    return Method("tv", reconstruct)


def pipeline_method(models: RestorationModels, geometry: ScanGeometry, ensemble_size: int,
                    name: str = "pipeline") -> Method:
    """Full restoration; image j of a run uses ensemble seed derive_seed(run seed, j)"""
    def reconstruct(sinograms, mask, seed):
        return np.stack([
            full_restore(models, geometry, y, mask, ensemble_size, derive_seed(seed, index)).image
            for index, y in enumerate(sinograms)
        ])
    return Method(name, reconstruct, stochastic=models.postproc.uses_ensemble)


def distilled_fbp_method(student: StudentModel, geometry: ScanGeometry, ensemble_size: int,
                         sinogram_scale: float) -> Method:
    """FBP-stage image of the distilled inpainter: mean FBP over the ensemble, no post-processing"""
    def reconstruct(sinograms, mask, seed):
        images = []
        for index, y in enumerate(sinograms):
            y = apply_mask(y, mask)
            members = ensemble_sample(student, y, mask, ensemble_size, derive_seed(seed, index), sinogram_scale)
            images.append(ensemble_statistics(fbp(members, geometry))[0])
        return np.stack(images)
    return Method("distilled-fbp", reconstruct, stochastic=True)


def direct_fbp_method(direct: DirectModel, geometry: ScanGeometry, sinogram_scale: float) -> Method:
    """FBP-stage image of the plain-MSE inpainter"""
    def reconstruct(sinograms, mask, seed):
        y = apply_mask(sinograms, mask)
        restored = direct_predict(direct, y / sinogram_scale, mask) * sinogram_scale
        return fbp(rectify_rnsd(restored, y, mask), geometry)
    return Method("direct-mse-fbp", reconstruct)


# Table assembly

def _run_seeds(method: Method, runs: int, seed: int) -> List[Tuple[str, int]]:
    if not method.stochastic:
        return [("-", seed)]
    return [(str(run_seed), run_seed) for run_seed in (derive_seed(seed, run) for run in range(runs))]


def _evaluate_cell(method: Method, images: np.ndarray, sinograms: np.ndarray, mask: AngleMask,
                   run_seed: int) -> MetricReport:
    started = time.perf_counter()
    restored = method.reconstruct(sinograms, mask, run_seed)
    report = mean_report([evaluate(image, gt) for image, gt in zip(restored, images)])
    logger.info(
        f"{method.name} @ {mask.missing_deg:g} deg (seed {run_seed}): PSNR {report.psnr:.2f} dB, "
        f"SSIM {report.ssim:.4f} ({time.perf_counter() - started:.1f}s)"
    )
    return report


def run_table(dataset: SinogramDataset, methods: Sequence[Method], scenarios_deg: Sequence[float],
              runs: int, seed: int, test_limit: int = 0, cap_db: float = 99.0,
              threads: Optional[int] = None) -> Tuple[List[ResultRow], List[ResultRow]]:
    """
    Evaluate every method under every scenario

    Deterministic methods run once (run_seed "-"); stochastic ones run `runs`
    times with run seeds derived from `seed`.

    Returns:
        (aggregate rows with run_seed "mean", per-run rows), both ordered by
        method, then scenario, then run
    """
    count = len(dataset.test_images) if test_limit <= 0 else min(test_limit, len(dataset.test_images))
    images = np.asarray(dataset.test_images[:count], dtype=np.float64)
    sinograms = np.asarray(dataset.test_sinograms[:count], dtype=np.float64)

    cells = []
    for method in methods:
        for deg in scenarios_deg:
            mask = dataset.mask_for(deg)
            for label, run_seed in _run_seeds(method, runs, seed):
                cells.append((method, deg, label, run_seed, mask))

    workers = threads or settings.WEDGEFILL_THREADS
    logger.info(f"Evaluating {len(cells)} cells on {count} test images with {workers} thread(s)")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_evaluate_cell, method, images, sinograms, mask, run_seed)
                   for method, _, _, run_seed, mask in cells]
        reports = [future.result() for future in futures]

    per_run: List[ResultRow] = []
    aggregate: List[ResultRow] = []
    position = 0
    for method in methods:
        for deg in scenarios_deg:
            group = []
            for _ in _run_seeds(method, runs, seed):
                _, _, label, _, _ = cells[position]
                per_run.append(ResultRow(method.name, scenario_key(deg), label, reports[position]))
                group.append(reports[position])
                position += 1
            aggregate.append(ResultRow(method.name, scenario_key(deg), "mean", mean_report(group, cap_db)))
    return aggregate, per_run


def run_comparison(dataset: SinogramDataset, methods: Sequence[Method], scenarios_deg: Sequence[float],
                   runs: int = 10, seed: int = 1234, test_limit: int = 0,
                   cap_db: float = 99.0) -> Tuple[List[ResultRow], List[ResultRow]]:
    """Baselines against the full pipeline"""
    return run_table(dataset, methods, scenarios_deg, runs, seed, test_limit, cap_db)


def run_ablations(dataset: SinogramDataset, methods: Sequence[Method], scenarios_deg: Sequence[float],
                  runs: int = 10, seed: int = 1234, test_limit: int = 0,
                  cap_db: float = 99.0) -> Tuple[List[ResultRow], List[ResultRow]]:
    """Distilled vs direct-MSE inpainter at the FBP stage and the post-processing variants"""
    return run_table(dataset, methods, scenarios_deg, runs, seed, test_limit, cap_db)


def format_results_csv(rows: Sequence[ResultRow], cap_db: float = 99.0) -> str:
    """Disclaimer line, header, then one line per row"""
    buffer = io.StringIO()
    buffer.write(PROXY_DISCLAIMER + "\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in rows:
        writer.writerow(row.as_csv_fields(cap_db))
    return buffer.getvalue()


def parse_results_csv(text: str) -> List[dict]:
    lines = [line for line in text.splitlines() if not line.startswith("#")]
    return list(csv.DictReader(lines))


# Timing

@dataclass(frozen=True)
class TimingRow:
    method: str
    network_passes: int
    seconds: float


def run_timing(score: ScoreModel, student: StudentModel, dataset: SinogramDataset, missing_deg: float,
               seed: int, solver: str = "ddim") -> List[TimingRow]:
    """Wall-clock of the multi-step teacher against the one-step student on the first test sinogram"""
    mask = dataset.mask_for(missing_deg)
    mu = dataset.normalize(apply_mask(dataset.test_sinograms[0], mask))

    started = time.perf_counter()
    teacher_restore_ode(score, mu, mask, seed, solver)
    teacher_seconds = time.perf_counter() - started

    x_T = terminal_sample(student.schedule, mu, make_rng(seed, 0))
    started = time.perf_counter()
    student_predict(student, x_T, mu)
    student_seconds = time.perf_counter() - started

    rows = [
        TimingRow(f"teacher-ode-{solver}", score.schedule.T * score.spec.stacking_depth, teacher_seconds),
        TimingRow("student", student.spec.stacking_depth, student_seconds),
    ]
    for row in rows:
        logger.info(f"{row.method}: {row.network_passes} network passes, {row.seconds:.3f}s")
    return rows


def format_timing_csv(rows: Sequence[TimingRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TIMING_COLUMNS)
    for row in rows:
        writer.writerow([row.method, row.network_passes, f"{row.seconds:.6f}"])
    return buffer.getvalue()
