import argparse
import logging
from typing import Callable, List, Optional

from wedgefill.commands.options import add_hash_option, add_run_options, open_run
from wedgefill.core.errors import MissingArtifactError
from wedgefill.evaluation.harness import (
    Method,
    direct_fbp_method,
    distilled_fbp_method,
    fbp_method,
    format_results_csv,
    format_timing_csv,
    pipeline_method,
    run_ablations,
    run_comparison,
    run_timing,
    tv_method,
)
from wedgefill.pipeline.models import STAGE_VERSION
from wedgefill.pipeline.stages import PipelineRunner

logger = logging.getLogger(__name__)


def _optional(label: str, build: Callable[[], Method]) -> Optional[Method]:
    """Build a method whose artifacts may be absent; a missing artifact skips its rows"""
    try:
        return build()
    except MissingArtifactError as e:
        logger.warning(f"Skipping '{label}' rows: {e}")
        return None


class EvalCommand:
    """eval: comparison and ablation tables over the test set"""

    name = "eval"

    def register(self, subparsers) -> argparse.ArgumentParser:
        parser = subparsers.add_parser(self.name, help="write the comparison and ablation tables")
        parser.add_argument("--timing", action="store_true",
                            help="also time the teacher against the student (timing.csv, not reproducible)")
        add_run_options(parser)
        add_hash_option(parser)
        parser.set_defaults(handler=self.run)
        return parser

    def _comparison_methods(self, runner: PipelineRunner) -> List[Method]:
        config = runner.config
        geometry = runner.load_dataset().geometry
        methods: List[Optional[Method]] = []
        for name in config.eval.methods:
            if name == "fbp":
                methods.append(fbp_method(geometry))
            elif name == "tv":
                methods.append(tv_method(geometry, config.eval.tv_lambda, config.eval.tv_iterations))
            elif name == "pipeline":
                methods.append(_optional(name, lambda: pipeline_method(
                    runner.restoration_models(), geometry, config.eval.ensemble_size)))
        return [method for method in methods if method is not None]

    def _ablation_methods(self, runner: PipelineRunner) -> List[Method]:
        dataset = runner.load_dataset()
        geometry = dataset.geometry
        n = runner.config.eval.ensemble_size
        scale = dataset.sinogram_scale
        candidates = [
            _optional("distilled-fbp", lambda: distilled_fbp_method(runner.student_model(), geometry, n, scale)),
            _optional("direct-mse-fbp", lambda: direct_fbp_method(runner.direct_model(), geometry, scale)),
        ]
        for variant in ("postproc-noproxy", "postproc-nosino", "postproc"):
            name = variant.replace("postproc", "pipeline")
            candidates.append(_optional(name, lambda variant=variant, name=name: pipeline_method(
                runner.restoration_models(variant), geometry, n, name)))
        return [method for method in candidates if method is not None]

    def run(self, args: argparse.Namespace) -> int:
        config, store = open_run(args)
        runner = PipelineRunner(config, store, ignore_config_hash=args.ignore_config_hash)
        dataset = runner.load_dataset()
        section = config.eval
        seed = section.seed if args.seed is None else args.seed
        table_args = dict(runs=section.runs, seed=seed, test_limit=section.test_limit, cap_db=section.psnr_cap_db)
        written = []

        comparison = self._comparison_methods(runner)
        if comparison:
            aggregate, per_run = run_comparison(dataset, comparison, section.scenarios_deg, **table_args)
            store.write_text(store.eval_dir / "comparison.csv", format_results_csv(aggregate, section.psnr_cap_db))
            store.write_text(store.eval_dir / "comparison_runs.csv", format_results_csv(per_run, section.psnr_cap_db))
            written += ["comparison.csv", "comparison_runs.csv"]
        else:
            logger.warning("No comparison method available, comparison.csv not written")

        ablations = self._ablation_methods(runner)
        if ablations:
            aggregate, per_run = run_ablations(dataset, ablations, section.scenarios_deg, **table_args)
            store.write_text(store.eval_dir / "ablations.csv", format_results_csv(aggregate, section.psnr_cap_db))
            store.write_text(store.eval_dir / "ablations_runs.csv", format_results_csv(per_run, section.psnr_cap_db))
            written += ["ablations.csv", "ablations_runs.csv"]
        else:
            logger.warning("No trained ablation stage found, ablations.csv not written")

        if args.timing:
            rows = run_timing(runner.score_model(), runner.student_model(), dataset, section.scenarios_deg[0],
                              seed, config.schedule.ode_solver)
            store.write_text(store.eval_dir / "timing.csv", format_timing_csv(rows))
            written.append("timing.csv")

        store.write_manifest(store.eval_dir / "manifest.txt", {
            "stage": "eval",
            "stage_version": STAGE_VERSION,
            "config_hash": config.config_hash,
            "seed": seed,
            "runs": section.runs,
            "scenarios_deg": ",".join(f"{deg:g}" for deg in section.scenarios_deg),
            "comparison_methods": ",".join(method.name for method in comparison),
            "ablation_methods": ",".join(method.name for method in ablations),
            "files": ",".join(written),
        })
        logger.info(f"Wrote {', '.join(written) or 'no tables'} to {store.eval_dir}")
        return 0


# Global instance
eval_command = EvalCommand()
