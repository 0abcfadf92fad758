"""``artefact-lab <stage> --config FILE [--in DIR --out DIR --seed N]``"""

from __future__ import annotations

import argparse
import sys

from .config import RunConfig, describe_defaults, load_config
from .errors import ConfigError, DependencyError
from .pipeline import STAGES, run_stage


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="artefact-lab",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Staged coin die-study and sherd analysis pipeline.",
        epilog="configuration keys (YAML) and their defaults:\n" + describe_defaults())
    ap.add_argument("stage", choices=STAGES)
    ap.add_argument("--config", help="YAML run configuration (defaults if omitted)")
    ap.add_argument("--in", dest="input_dir", help="corpus directory (overrides input_dir)")
    ap.add_argument("--out", dest="output_dir", help="work directory (overrides output_dir)")
    ap.add_argument("--seed", type=int, help="master seed (overrides seed)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.input_dir is not None:
            cfg.input_dir = args.input_dir
        if args.output_dir is not None:
            cfg.output_dir = args.output_dir
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg.seed = args.seed
        print(run_stage(cfg, args.stage))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
