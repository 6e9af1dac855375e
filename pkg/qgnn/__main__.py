import sys
from argparse import ArgumentParser, Namespace
from logging import INFO, WARNING
from pathlib import Path
from typing import Optional, Sequence

from qgnn.qg_env import DEFAULTS, Env, ExperimentConfig, defaults_env, parse_config_text
from qgnn.qg_error import ErrorCode, QGError
from qgnn.qg_handler import handler


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as e:
        raise handler.error(f"cannot read {path}: {e.strerror}", code=ErrorCode.IO)


def config_parser() -> ArgumentParser:
    """Options shared by every experiment command: --config plus one flag per key"""
    parent = ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="config file of key=value lines")
    for key in DEFAULTS:
        if key == "bt":
            continue
        parent.add_argument(f"--{key}", dest=key.replace("-", "_"), default=None, metavar=key.upper().replace("-", "_"))
    bt = parent.add_mutually_exclusive_group()
    bt.add_argument("--bt", dest="bt", action="store_const", const="bt", help="bit-tuning from --bt-source-bits")
    bt.add_argument("--bt-star", dest="bt", action="store_const", const="bt-star", help="skewness-shifted bit-tuning")
    return parent


def parse(argv: Optional[Sequence[str]] = None) -> Namespace:
    parser = ArgumentParser(prog="qgnn", description="Quantization-aware training for graph neural networks")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [config_parser()]

    p = sub.add_parser("train", parents=common, help="train a model and write a run directory")
    p.add_argument("--out", type=Path, default=None, help="run directory")

    p = sub.add_parser("eval", parents=common, help="accuracy of a checkpoint or an exported model")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--model-file", type=Path)

    p = sub.add_parser("export", parents=common, help="calibrate and write a packed model file")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("bench", parents=common, help="time packed inference")
    p.add_argument("--model-file", type=Path, required=True)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--csv", type=Path, default=None)

    p = sub.add_parser("gen", parents=common, help="write a synthetic SBM bundle")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sweep", parents=common, help="depth/bit-width grid or γ error curves")
    p.add_argument("kind", choices=("layers", "gamma"))
    p.add_argument("--grid", default="2,4,6,8,10,12", help="comma separated depths")
    p.add_argument("--bits-grid", default="fp,8,4,2", help="comma separated bit widths")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--tag", default=None, help="tensor to sweep γ on")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--csv", type=Path, default=None)

    p = sub.add_parser("convert", help="convert planetoid dumps into a bundle")
    p.add_argument("--raw", type=Path, required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("report", parents=common, help="summary tables")
    p.add_argument("kind", choices=("stats", "accuracy", "smoothness", "normality", "size"))
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--csv", type=Path, default=None)

    return parser.parse_args(argv)


def load_config(args: Namespace, base: Optional[Env] = None) -> ExperimentConfig:
    """defaults, then `base`, then the --config file, then flags"""
    env = base or defaults_env()
    if args.config is not None:
        env = env.child(parse_config_text(_read(args.config)))
    flags = {key: getattr(args, key.replace("-", "_"), None) for key in DEFAULTS}
    return ExperimentConfig.from_env(env.child({k: v for k, v in flags.items() if v is not None}))


def checkpoint_env(path: Path) -> Env:
    from qgnn.qg_train import load_checkpoint

    _, text = load_checkpoint(path)
    return defaults_env().child(parse_config_text(text))


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        return
    header = list(rows[0])
    print("\t".join(header))
    for row in rows:
        print("\t".join("" if row[k] is None else f"{row[k]:.4g}" if isinstance(row[k], float) else str(row[k]) for k in header))


def run(args: Namespace) -> int:
    from qgnn import qg_commands as commands

    match args.command:
        case "train":
            cfg = load_config(args)
            out = args.out or Path("runs") / f"{cfg.model}-{cfg.bits}-s{cfg.seed}"
            result = commands.cmd_train(cfg, out)
            if (best := result.best) is not None:
                print(f"best epoch {best.epoch}: val {best.val_acc:.4f} test {best.test_acc:.4f}")
            print(f"run written to {out}")
        case "eval":
            base = checkpoint_env(args.checkpoint) if args.checkpoint else None
            report = commands.cmd_eval(load_config(args, base), args.checkpoint, args.model_file)
            print(f"{report.label}: train {report.train:.4f} val {report.val:.4f} test {report.test:.4f}")
        case "export":
            qm = commands.cmd_export(load_config(args, checkpoint_env(args.checkpoint)), args.checkpoint, args.out)
            print(f"wrote {args.out}: {qm.nbytes} bytes")
        case "bench":
            report = commands.cmd_bench(load_config(args), args.model_file, args.repeats, args.warmup, args.threads, args.csv)
            _print_rows([report.row()])
        case "gen":
            bundle = commands.cmd_gen(load_config(args), args.out)
            print(f"wrote {bundle.name} to {args.out}")
        case "sweep" if args.kind == "layers":
            rows = commands.cmd_sweep_layers(
                load_config(args),
                commands.parse_grid(args.grid),
                commands.parse_grid(args.bits_grid, str),
                args.threads,
                args.csv,
            )
            _print_rows(rows)
        case "sweep":
            if args.checkpoint is None:
                raise handler.error("a gamma sweep needs --checkpoint", code=ErrorCode.INPUT)
            rows = commands.cmd_sweep_gamma(
                load_config(args, checkpoint_env(args.checkpoint)), args.checkpoint, args.tag, csv_path=args.csv
            )
            _print_rows([r._asdict() for r in rows])
        case "convert":
            bundle = commands.cmd_convert(args.raw, args.name, args.out)
            print(f"wrote {bundle.name} to {args.out}")
        case "report":
            options = {
                "accuracy": {"repeats": args.repeats, "threads": args.threads},
                "smoothness": {"threads": args.threads},
                "normality": {"window": args.window, "threads": args.threads},
            }.get(args.kind, {})
            _print_rows(commands.cmd_report(load_config(args), args.kind, args.csv, **options))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse(argv)
    handler.quiet(WARNING if args.quiet else INFO)
    handler.log_errors = False
    try:
        return run(args)
    except QGError as e:
        print(e.one_line(), file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    finally:
        handler.log_errors = True


if __name__ == "__main__":
    sys.exit(main())
