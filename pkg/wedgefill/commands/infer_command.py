import argparse
import logging
from collections import OrderedDict
from pathlib import Path

import numpy as np

from wedgefill.commands.options import add_hash_option, add_run_options, open_run
from wedgefill.core.errors import InvalidInputError, TensorFormatError
from wedgefill.core.tensor_store import read_tensors, write_pgm16, write_tensors
from wedgefill.evaluation.metrics import evaluate
from wedgefill.pipeline.data import scenario_key
from wedgefill.pipeline.models import STAGE_VERSION
from wedgefill.pipeline.restore import data_consistency_error, full_restore
from wedgefill.pipeline.stages import PipelineRunner
from wedgefill.tomo.geometry import AngleMask
from wedgefill.tomo.operators import apply_mask

logger = logging.getLogger(__name__)


class InferCommand:
    """infer: full restoration of one sinogram with every intermediate exported"""

    name = "infer"

    def register(self, subparsers) -> argparse.ArgumentParser:
        parser = subparsers.add_parser(self.name, help="restore one limited-angle sinogram")
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument("--phantom-id", type=int, help="index into the test set of the dataset")
        source.add_argument("--input", help="TensorContainer holding a 'sinogram' entry in raw units")
        parser.add_argument("--missing-deg", type=float, default=None,
                            help="missing wedge in degrees (default: first [eval] scenario)")
        add_run_options(parser)
        add_hash_option(parser)
        parser.set_defaults(handler=self.run)
        return parser

    def _load_input(self, args, dataset):
        if args.phantom_id is not None:
            if not 0 <= args.phantom_id < len(dataset.test_sinograms):
                raise InvalidInputError(
                    f"--phantom-id {args.phantom_id} outside the test set (0..{len(dataset.test_sinograms) - 1})"
                )
            index = args.phantom_id
            return f"phantom{index}", dataset.test_sinograms[index], dataset.test_images[index]
        tensors = read_tensors(args.input)
        if "sinogram" not in tensors:
            raise TensorFormatError(f"{args.input} has no 'sinogram' entry (found {list(tensors)})")
        return Path(args.input).stem, tensors["sinogram"], None

    def run(self, args: argparse.Namespace) -> int:
        config, store = open_run(args)
        runner = PipelineRunner(config, store, ignore_config_hash=args.ignore_config_hash)
        dataset = runner.load_dataset()
        geometry = dataset.geometry
        seed = config.eval.seed if args.seed is None else args.seed
        missing_deg = config.eval.scenarios_deg[0] if args.missing_deg is None else args.missing_deg
        key = scenario_key(missing_deg)
        mask = dataset.masks.get(key) or AngleMask.from_config(geometry, config.geometry, missing_deg)

        label, sinogram, ground_truth = self._load_input(args, dataset)
        y = apply_mask(np.asarray(sinogram, dtype=np.float64), mask)
        models = runner.restoration_models()
        result = full_restore(models, geometry, y, mask, config.eval.ensemble_size, seed)

        consistency = data_consistency_error(result.ensemble, y, mask)
        logger.info(f"Observed rows reproduced with max error {consistency:.3e}")

        out_dir = store.infer_dir / f"{label}_{key}deg_seed{seed}"
        for name, image in (("final", result.image), ("fbp_mean", result.fbp_mean),
                            ("fbp_std", result.fbp_std), ("masked_fbp", result.masked_fbp)):
            write_pgm16(out_dir / f"{name}.pgm", image)

        sinograms: "OrderedDict[str, np.ndarray]" = OrderedDict()
        sinograms["input/masked"] = y
        sinograms["input/kept"] = mask.kept.astype(np.float32)
        sinograms["ensemble/sinograms"] = result.ensemble
        write_tensors(out_dir / "sinograms.sinotn", sinograms)

        images: "OrderedDict[str, np.ndarray]" = OrderedDict()
        images["final"] = result.image
        images["fbp_mean"] = result.fbp_mean
        images["fbp_std"] = result.fbp_std
        images["masked_fbp"] = result.masked_fbp
        images["ensemble/fbp"] = result.fbp_images
        write_tensors(out_dir / "images.sinotn", images)

        fields = {
            "stage": "infer",
            "stage_version": STAGE_VERSION,
            "config_hash": config.config_hash,
            "seed": seed,
            "input": label,
            "missing_deg": key,
            "ensemble_size": config.eval.ensemble_size,
            "data_consistency_max_error": repr(consistency),
        }
        if ground_truth is not None:
            write_pgm16(out_dir / "ground_truth.pgm", ground_truth)
            for name, image in (("final", result.image), ("masked_fbp", result.masked_fbp)):
                report = evaluate(image, ground_truth)
                fields[f"{name}_psnr_db"] = f"{min(report.psnr, config.eval.psnr_cap_db):.6f}"
                fields[f"{name}_ssim"] = f"{report.ssim:.6f}"
        store.write_manifest(out_dir / "manifest.txt", fields)
        logger.info(f"Wrote restoration of {label} ({key} deg missing) to {out_dir}")
        return 0


# Global instance
infer_command = InferCommand()
