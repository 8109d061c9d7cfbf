#file for cli interaction
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from compseg import main as pipeline
from compseg.config import RunConfig, load_run_config, pinned_architecture_fields
from compseg.errors import CompsegError, ConfigError, MissingArtifactError

logger = logging.getLogger("compseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compseg", description="Compositional brain tumour segmentation toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory (default: $COMPSEG_OUTPUT_ROOT or ./runs)")
    common.add_argument("--data", type=Path, help="dataset directory")
    common.add_argument("--checkpoint", type=Path, action="append", help="checkpoint file (repeat for several)")
    common.add_argument("--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--label-fraction", type=float)
    training.add_argument("--task", choices=("whole", "sub"))
    training.add_argument("--weak", choices=("whole", "sub"), help="weak label granularity (default: the task)")
    training.add_argument("--lambda-weak", type=float)
    training.add_argument("--no-weak", action="store_true", help="drop the weak term (lambda_weak = 0)")
    training.add_argument("--method", choices=("compositional", "unet"))
    training.add_argument("--epochs", type=int)

    sub = parser.add_subparsers(dest="command", required=True)
    synth = sub.add_parser("synth-data", parents=[common], help="generate a synthetic dataset")
    synth.add_argument("--volumes", type=int, help="total volume count")
    synth.add_argument("--brats", type=Path, help="ingest a BraTS directory instead of synthesising")
    sub.add_parser("train", parents=[common, training], help="train a model on a dataset")
    sub.add_parser("eval", parents=[common, training], help="evaluate checkpoints on the test split")
    viz = sub.add_parser("viz-activations", parents=[common], help="export kernel activation images")
    viz.add_argument("--subject", help="subject id (default: first test volume)")
    viz.add_argument("--slice", type=int, action="append", help="slice index (repeat for several)")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    lambda_weak = 0.0 if get("no_weak") else get("lambda_weak")
    checkpoints: Optional[List[Path]] = get("checkpoint")
    return {
        "training": {
            "seed": get("seed"),
            "label_fraction": get("label_fraction"),
            "task_mode": get("task"),
            "weak_mode": get("weak"),
            "lambda_weak": lambda_weak,
            "method": get("method"),
            "epochs": get("epochs"),
        },
        "synthetic": {"seed": get("seed"), "volumes": get("volumes")},
        "out_dir": get("out"),
        "data_dir": get("data"),
        "checkpoints": checkpoints,
        "brats_root": get("brats"),
        "subject_id": get("subject"),
        "slice_indices": get("slice"),
    }


def configure_logging(verbose: bool, out_dir: Optional[Path] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out_dir / "compseg.log", encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )


def run_command(command: str, config: RunConfig, args: argparse.Namespace) -> None:
    if command == "synth-data":
        path = pipeline.synth_data(config)
        print(f"dataset written to {path}")
    elif command == "train":
        path = pipeline.train_run(config)
        print(f"run written to {path}")
    elif command == "eval":
        pinned = pinned_architecture_fields(args.config, overrides_from_args(args))
        paths = pipeline.eval_run(config, pinned=pinned)
        print(paths["table"].read_text(encoding="utf-8"))
    elif command == "viz-activations":
        exports = pipeline.viz_run(config)
        for export in exports:
            print(f"{len(export.files)} images in {export.directory}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = load_run_config(args.config, overrides_from_args(args))
        configure_logging(args.verbose, config.out_dir)
        run_command(args.command, config, args)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        logger.error("missing artifact: %s", e)
        return EXIT_MISSING
    except (CompsegError, OSError, RuntimeError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
