"""Command-line entry point for sopseg-cli."""

import argparse
import logging
import sys
from pathlib import Path

from rich.console import Console

from sopseg.api import SopsegError
from sopseg.cli_lib import cmd_ablate, cmd_annotate, cmd_eval, cmd_infer, cmd_synth, cmd_train, cmd_visualize
from sopseg.config import resolve_config
from sopseg.utils import find_and_load_dotenv, setup_logging
from sopseg_console import ConsoleObserver, render_ablation, render_provenance, render_report, render_review

logger = logging.getLogger(__name__)


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', type=str, default=None,
                        help="YAML config file or `module:resource`, e.g. `sopseg:desk-config.yaml`.")
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help="Override a config value, e.g. `train.epochs=4`. Can be used multiple times.")
    parser.add_argument('--seed', type=int, default=None, help="Shortcut for `--set seed=N`.")
    parser.add_argument('--device', choices=['auto', 'cpu', 'cuda'], default=None,
                        help="Shortcut for `--set device=...`.")
    parser.add_argument('--show-config', action='store_true', help="Print non-default config values and their source.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Prompted small-object segmentation: synthetic data, training, evaluation and annotation."
    )
    parser.add_argument('--verbose', action='count', default=0, help="Enable verbose output. Can be used multiple times to increase verbosity.")
    parser.add_argument('--debug', action='count', default=0, help="Enable debug mode. Can be used multiple times to increase verbosity.")
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help="Generate the seeded synthetic train/val dataset.")
    _add_config_arguments(synth)
    synth.add_argument('--out', type=str, default=None, help="Dataset directory, defaults to `data.root`.")

    train = commands.add_parser('train', help="Train a model on the configured annotation files.")
    _add_config_arguments(train)
    train.add_argument('--run-dir', type=str, required=True, help="Directory for checkpoints and logs.")
    train.add_argument('--resume', action='store_true', help="Continue from the trainer state in the run directory.")

    evaluate = commands.add_parser('eval', help="Evaluate a checkpoint (IoU and boundary IoU).")
    _add_config_arguments(evaluate)
    evaluate.add_argument('--checkpoint', type=str, required=True)
    evaluate.add_argument('--annotations', type=str, default=None, help="Defaults to `data.val_annotations`.")
    evaluate.add_argument('--run-dir', type=str, required=True)

    infer = commands.add_parser('infer', help="Segment a single object given by an oriented box.")
    _add_config_arguments(infer)
    infer.add_argument('--checkpoint', type=str, required=True)
    infer.add_argument('--image', type=str, required=True)
    infer.add_argument('--obb', type=float, nargs='+', required=True,
                       help="Four corners (x1 y1 x2 y2 x3 y3 x4 y4) or cx cy w h theta.")
    infer.add_argument('--run-dir', type=str, required=True)

    annotate = commands.add_parser('annotate', help="Produce masks for box-only annotations with a review list.")
    _add_config_arguments(annotate)
    annotate.add_argument('--checkpoint', type=str, required=True)
    annotate.add_argument('--annotations', type=str, required=True)
    annotate.add_argument('--run-dir', type=str, required=True)
    annotate.add_argument('--tau', type=float, default=None, help="Review threshold, defaults to `annotate.tau`.")

    visualize = commands.add_parser('visualize', help="Render overlays for an exported mask manifest.")
    _add_config_arguments(visualize)
    visualize.add_argument('--manifest', type=str, required=True)
    visualize.add_argument('--out', type=str, required=True)
    visualize.add_argument('--alpha', type=float, default=None, help="Mask opacity, defaults to `annotate.overlay_alpha`.")

    ablate = commands.add_parser('ablate', help="Train and evaluate with and without edge supervision.")
    _add_config_arguments(ablate)
    ablate.add_argument('--run-dir', type=str, required=True)
    ablate.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    return parser


def run(args: argparse.Namespace, console: Console) -> None:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.device is not None:
        overrides.append(f"device={args.device}")
    resolved = resolve_config(args.config, overrides)
    if args.show_config:
        render_provenance(console, resolved)

    if args.command == 'synth':
        result = cmd_synth(resolved, args.out)
        for split in result.annotations:
            console.print(f"{split}: {result.images[split]} images, {result.instances[split]} instances "
                          f"-> {result.annotations[split]}")
    elif args.command == 'train':
        cmd_train(resolved, args.run_dir, resume=args.resume, observer=ConsoleObserver(console))
    elif args.command == 'eval':
        result = cmd_eval(resolved, args.checkpoint, args.run_dir, args.annotations)
        render_report(console, result.report)
        console.print(f"Report written to {result.report_json}")
    elif args.command == 'infer':
        result = cmd_infer(resolved, args.checkpoint, args.image, args.obb, args.run_dir)
        console.print(f"mask: {result.mask_path} ({result.mask_pixels} px), predicted IoU {result.score:.4f}")
    elif args.command == 'annotate':
        result = cmd_annotate(resolved, args.checkpoint, args.annotations, args.run_dir, args.tau)
        render_review(console, result.review)
        console.print(f"{result.n_instances} of {result.n_input} instances annotated, {result.n_flagged} flagged, "
                      f"{result.n_skipped} skipped. Manifest: {result.manifest}")
    elif args.command == 'visualize':
        result = cmd_visualize(resolved, args.manifest, args.out, args.alpha)
        console.print(f"Wrote {len(result.overlays)} overlays to {args.out}")
    elif args.command == 'ablate':
        render_ablation(console, cmd_ablate(resolved, args.run_dir, args.seeds, observer=ConsoleObserver(console)))


def main():
    """Main entry point for sopseg-cli command."""
    parser = build_parser()
    args = parser.parse_args()

    find_and_load_dotenv(Path.home() / ".sopseg" / ".env")
    setup_logging(debug_level=args.debug, verbosity=args.verbose, log_filename="sopseg.log")

    console = Console(stderr=True)
    try:
        run(args, console)
    except SopsegError as e:
        logger.error("%s failed: %s", args.command, e, exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)


if __name__ == "__main__":
    main()
