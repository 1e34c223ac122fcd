import os
import sys
import json
import logging
import argparse
from typing import List, Optional

from .config import DEFAULT_CONFIG_PATH, PipelineConfig, load_config
from .errors import SLNetError
from . import pipeline

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - [%(name)s:%(lineno)d] - %(message)s'
IO_EXIT_CODE = 3


def resolve_config_path(config_arg: str) -> str:
    """Relative paths are tried from the working directory first, then from the project root."""
    if os.path.isabs(config_arg) or os.path.exists(config_arg):
        return os.path.abspath(config_arg)
    project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    return os.path.join(project_root, config_arg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='slnet', description="Scene-aware radar object detection on RAMap sequences.")
    parser.add_argument("-c", "--config", default=DEFAULT_CONFIG_PATH,
                        help=f"Path to the configuration YAML file (default: {DEFAULT_CONFIG_PATH}).")
    parser.add_argument("--seed", type=int, default=None, help="Overrides the seed in the configuration file.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help="Generate a synthetic Static/Dynamic dataset.")
    p.add_argument("--static", type=int, default=None, help="Number of Static sequences.")
    p.add_argument("--dynamic", type=int, default=None, help="Number of Dynamic sequences.")

    p = sub.add_parser('train', help="Universal training, per-scene fine-tuning and the scene classifier.")
    p.add_argument("--no-resume", action="store_true", help="Retrain the universal models even if checkpoints exist.")

    p = sub.add_parser('infer', help="Detect objects in one sequence.")
    p.add_argument("sequence", help="Sequence directory.")
    p.add_argument("-o", "--out", default=None, help="Output directory (default: <output_dir>/detections).")
    p.add_argument("--scene", choices=['static', 'dynamic', 'auto'], default='auto',
                   help="Force a scene branch instead of the classifier's vote.")
    p.add_argument("--no-postproc", action="store_true", help="Keep raw L-NMS peaks.")

    p = sub.add_parser('eval', help="Score detections against ground truth.")
    p.add_argument("--detections", required=True, help="Detection CSV or directory of <sequence_id>.csv files.")
    p.add_argument("--ground-truth", required=True, help="Dataset root or a single sequence directory.")
    p.add_argument("-o", "--out", default=None, help="Output directory (default: <output_dir>/eval).")
    p.add_argument("--compare", default=None, help="Baseline report JSON to tabulate against.")

    p = sub.add_parser('render', help="Render RAMaps and ConfMaps as PGM/PPM images.")
    p.add_argument("sequence", help="Sequence directory.")
    p.add_argument("-o", "--out", default=None, help="Output directory.")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--stop", type=int, default=None)
    p.add_argument("--confmap", default=None, help="Merged ConfMap tensor written by infer.")
    p.add_argument("--detections", default=None, help="Detection CSV to overlay.")
    p.add_argument("--augment-preview", metavar="PARTNER", default=None,
                   help="Render SceneMix before/after images against a same-scene partner sequence.")

    p = sub.add_parser('ablation', help="Vanilla vs SceneMix vs fine-tuned branches on the validation split.")
    p.add_argument("--arch-index", type=int, default=0, help="Which configured detector to ablate.")
    return parser


def run(args: argparse.Namespace, cfg: PipelineConfig) -> str:
    """Dispatches to the pipeline; returns the success message."""
    if args.command == 'gen-data':
        manifest = pipeline.cmd_gen_data(cfg, args.static, args.dynamic)
        print(json.dumps(manifest, indent=2, sort_keys=True))
        return f"{len(manifest['sequences'])} sequences written to {cfg.dataset_root}"
    if args.command == 'train':
        outputs = pipeline.cmd_train(cfg, resume=not args.no_resume)
        return f"checkpoints written to {os.path.join(cfg.output_dir, pipeline.CHECKPOINT_DIR)}, log at {outputs['history']}"
    if args.command == 'infer':
        manifest = pipeline.cmd_infer(cfg, args.sequence, args.out, args.scene, postproc=not args.no_postproc)
        return f"{manifest['num_detections']} detections ({manifest['scene']} branch) at {manifest['detections']}"
    if args.command == 'eval':
        report = pipeline.cmd_eval(cfg, args.detections, args.ground_truth, args.out, args.compare)
        return f"AP={report.ap:.4f} AR={report.ar:.4f}"
    if args.command == 'render':
        if args.augment_preview:
            paths = pipeline.cmd_augment_preview(cfg, args.sequence, args.augment_preview, args.out)
        else:
            paths = pipeline.cmd_render(cfg, args.sequence, args.out, args.start, args.stop, args.confmap,
                                        args.detections)
        return f"{len(paths)} images written to {os.path.dirname(paths[0]) if paths else args.out}"
    if args.command == 'ablation':
        rows = pipeline.cmd_ablation(cfg, args.arch_index)
        return f"{len(rows)} ablation rows written to {os.path.join(cfg.output_dir, 'ablation')}"
    raise ValueError(f"unknown command {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT,
                        handlers=[logging.StreamHandler()])
    try:
        cfg = load_config(resolve_config_path(args.config), seed=args.seed)
        if not args.verbose:
            logging.getLogger().setLevel(cfg.log_level)
        message = run(args, cfg)
    except SLNetError as e:
        logger.error(f"[MAIN] {type(e).__name__}: {e}", exc_info=True)
        return e.exit_code
    except OSError as e:
        logger.error(f"[MAIN] I/O error: {e}", exc_info=True)
        return IO_EXIT_CODE
    print(f"\nSuccess! {message}")
    return 0


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
