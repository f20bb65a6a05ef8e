# cli.py
"""
 Copyright 2025 Google LLC

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
 """

import argparse
import logging
import math
import os
import sys

from colorcapsnet import capsnet, checkpoint, metrics, pipeline
from colorcapsnet.config import LOG_FORMAT, RunConfig, resolve_run_config, set_logging_level
from colorcapsnet.data_io import load_image, write_image
from colorcapsnet.errors import (CheckpointError, ConfigurationError, DomainError, ImageFormatError,
                                 ManifestError, PaddingError, ShapeError, UsageError, WeightImportError)

cli_logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3

GRADCHECK_THRESHOLD = 1e-3
BUFFER_SUFFIXES = (".running_mean", ".running_var")
DATA_ERRORS = (ImageFormatError, CheckpointError, ManifestError, ShapeError, PaddingError, DomainError,
               WeightImportError, OSError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _format_number(value: float, digits: int) -> str:
    return "inf" if math.isinf(value) else str(round(value, digits))


# --- commands ---

def cmd_train(run: RunConfig) -> int:
    if not run.manifest and run.epochs > 0 and not run.resume:
        raise UsageError("train needs --manifest")
    state = pipeline.run_training(run)
    print(f"Trained to epoch {state.epoch} (stage {state.stage}); checkpoints in {run.out_dir}")
    return EXIT_OK


def cmd_colorize(checkpoint_path: str, input_path: str, output_path: str, batch_size: int = 64) -> int:
    model = pipeline.load_model(checkpoint_path)
    gray = load_image(input_path)
    if gray.shape[0] != 1:
        raise ImageFormatError(f"{input_path}: colorize expects a P5 grayscale image")
    rgb = pipeline.colorize_image(model, gray, batch_size)
    write_image(output_path, rgb)
    print(f"Wrote {rgb.shape[2]}x{rgb.shape[1]} colorized image to {output_path}")
    return EXIT_OK


def cmd_evaluate(pairs: list[tuple[str, str]], verbose: bool = False) -> int:
    """Prints `name,psnr,ssim` rows and a trailing `mean` row over rows with finite PSNR."""
    print("name,psnr,ssim,ssim_global" if verbose else "name,psnr,ssim")
    status = EXIT_OK
    finite = []
    for ref_path, est_path in pairs:
        name = os.path.basename(est_path)
        try:
            report = metrics.quality_report(load_image(ref_path), load_image(est_path), include_global=verbose)
        except DATA_ERRORS as e:
            cli_logger.error(f"Cannot evaluate {ref_path} vs {est_path}: {e}")
            print(f"{name}: error: {e}", file=sys.stderr)
            status = EXIT_DATA
            continue
        row = f"{name},{_format_number(report.psnr, 4)},{_format_number(report.ssim, 6)}"
        if verbose:
            row += f",{_format_number(report.ssim_global, 6)}"
        print(row)
        if math.isfinite(report.psnr):
            finite.append(report)
    if finite:
        mean_psnr = sum(r.psnr for r in finite) / len(finite)
        mean_ssim = sum(r.ssim for r in finite) / len(finite)
        print(f"mean,{_format_number(mean_psnr, 4)},{_format_number(mean_ssim, 6)}")
    return status


def cmd_gradcheck(scale: str = "reduced", seed: int = 0) -> int:
    if scale == "reduced":
        worst = capsnet.end_to_end_gradcheck(capsnet.reduced_config(), seed=seed, max_coords=16)
    else:
        worst = capsnet.end_to_end_gradcheck(capsnet.ColorCapsNetConfig(), seed=seed, max_coords=4)
    passed = worst < GRADCHECK_THRESHOLD
    print(f"{'PASS' if passed else 'FAIL'} scale={scale} worst_relative_error={worst:.3e}")
    return EXIT_OK if passed else EXIT_CHECK


def cmd_inspect(checkpoint_path: str) -> int:
    ckpt = checkpoint.load(checkpoint_path)
    print(f"format_version: {ckpt.format_version}")
    for name, value in ckpt.entries:
        print(f"{name} {list(value.shape)} {value.size}")
    for key, value in ckpt.metadata.items():
        print(f"meta {key}={value}")
    expected = capsnet.count_parameters(pipeline.stored_config(ckpt))
    trainable = [(name, value) for name, value in ckpt.entries
                 if not name.startswith("adam.") and not name.endswith(BUFFER_SUFFIXES)]
    stored = sum(value.size for _, value in trainable)
    for layer, count in expected.breakdown.items():
        held = sum(value.size for name, value in trainable if name.startswith(f"{layer}."))
        print(f"layer {layer} expected={count} stored={held}")
    print(f"trainable_parameters: {stored}")
    print(f"expected_parameters: {expected.total}")
    if stored != expected.total:
        cli_logger.error(f"Checkpoint holds {stored} trainable parameters, config implies {expected.total}")
        return EXIT_CHECK
    return EXIT_OK


# --- argument parsing ---

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="colorcapsnet", description="Capsule-network image colorizer.")
    parser.add_argument("--verbose", action="store_true", help="DEBUG logging and extra report columns")
    parser.add_argument("--config", help="JSON file setting any run flag (train, colorize --batch-size, gradcheck --seed)")
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    train = verbs.add_parser("train", help="train on a manifest")
    train.add_argument("--manifest")
    train.add_argument("--out-dir", dest="out_dir")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--beta1", type=float)
    train.add_argument("--beta2", type=float)
    train.add_argument("--routing-iterations", dest="routing_iterations", type=int)
    train.add_argument("--num-output-capsules", dest="num_output_capsules", type=int)
    train.add_argument("--patch-size", dest="patch_size", type=int)
    train.add_argument("--loss", choices=["mse", "margin"])
    train.add_argument("--feature-detector", dest="feature_detector", choices=["vgg", "capsnet"])
    train.add_argument("--no-batchnorm", dest="batchnorm", action="store_const", const=False)
    train.add_argument("--vgg-weights", dest="vgg_weights")
    train.add_argument("--resume")
    train.add_argument("--timing", action="store_const", const=True)

    colorize = verbs.add_parser("colorize", help="colorize a PGM image")
    colorize.add_argument("--checkpoint", required=True)
    colorize.add_argument("--input", required=True)
    colorize.add_argument("--output", required=True)
    colorize.add_argument("--batch-size", dest="batch_size", type=int)

    evaluate = verbs.add_parser("evaluate", help="PSNR/SSIM of estimate vs reference PPMs")
    evaluate.add_argument("--pairs", nargs="+", default=[], metavar="PPM")
    evaluate.add_argument("--pairs-file", dest="pairs_file")

    gradcheck = verbs.add_parser("gradcheck", help="end-to-end finite-difference check")
    gradcheck.add_argument("--scale", choices=["reduced", "full-ish"], default="reduced")
    gradcheck.add_argument("--seed", type=int)

    inspect = verbs.add_parser("inspect", help="dump a checkpoint")
    inspect.add_argument("--checkpoint", required=True)
    return parser


def _evaluation_pairs(args) -> list[tuple[str, str]]:
    if len(args.pairs) % 2:
        raise UsageError("--pairs takes reference/estimate paths in pairs")
    pairs = list(zip(args.pairs[::2], args.pairs[1::2]))
    if args.pairs_file:
        with open(args.pairs_file, "r") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("reference,"):
                    continue
                ref, _, est = line.partition(",")
                pairs.append((ref.strip(), est.strip()))
    if not pairs:
        raise UsageError("evaluate needs --pairs or --pairs-file")
    return pairs


TRAIN_FLAGS = ("manifest", "out_dir", "epochs", "batch_size", "seed", "lr", "beta1", "beta2",
               "routing_iterations", "num_output_capsules", "patch_size", "loss", "feature_detector",
               "batchnorm", "vgg_weights", "resume", "timing")


def run(argv: list[str] | None = None) -> int:
    """Parses `argv`, dispatches the verb and maps failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            set_logging_level("DEBUG")
        if args.verb == "train":
            flags = {key: getattr(args, key) for key in TRAIN_FLAGS}
            run_config = resolve_run_config(flags, args.config)
            if not args.verbose:
                set_logging_level(run_config.log_level)
            return cmd_train(run_config)
        if args.verb == "colorize":
            run_config = resolve_run_config({"batch_size": args.batch_size}, args.config)
            return cmd_colorize(args.checkpoint, args.input, args.output, run_config.batch_size)
        if args.verb == "evaluate":
            return cmd_evaluate(_evaluation_pairs(args), verbose=args.verbose)
        if args.verb == "gradcheck":
            run_config = resolve_run_config({"seed": args.seed}, args.config)
            # seed 0 unless a flag, config file or environment variable names one
            seed = run_config.seed if "seed" in run_config.model_fields_set else 0
            return cmd_gradcheck(args.scale, seed)
        return cmd_inspect(args.checkpoint)
    except (UsageError, ConfigurationError) as e:
        cli_logger.error(f"Usage error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        cli_logger.exception("Data error")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    logging.basicConfig(level=os.getenv("COLORCAPS_LOG_LEVEL", "WARNING").upper(), format=LOG_FORMAT)
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()
