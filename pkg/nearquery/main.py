"""
Command-line entry point.

Subcommands:
- gen-data      write a phantom dataset (PhantomSpec fields as flags)
- train         train one configuration (TrainConfig fields as flags)
- eval          score a checkpoint on a dataset, report as CSV or JSON
- ablate        train every row of an ablation grid
- gradcheck     run the finite-difference kernel suite
- sample-stats  offset-norm statistics with and without adjustment

Every config field can be set with a flag named by its dotted path, e.g.
``--model.offset.strategy squash_scaled``. Values are parsed as JSON
literals and fall back to plain strings. The resolved configuration is echoed
to ``<out>/config.resolved.json``.

Failures print one line to stderr, ``error kind=<Class> message="<text>"``,
and exit 1; usage errors exit 2.
"""
import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type, Union

from pydantic import BaseModel

from nearquery import __version__
from nearquery.config import (
    AblationEntry,
    OffsetAdjustConfig,
    PhantomSpec,
    RuntimeSettings,
    SpreadConfig,
    TrainConfig,
    apply_overrides,
    field_paths,
    get_runtime_settings,
)
from nearquery.exceptions import ConfigError, NearQueryError, NonFiniteError
from nearquery.harness.metrics import REPORT_COLUMNS, MetricsReport
from nearquery.utils.csvlog import write_rows

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
RESOLVED_CONFIG = "config.resolved.json"
SAMPLE_STATS_CSV = "sample_stats.csv"
_FLAG_PREFIX = "cfg:"


# ---------------------------------------------------------------------------
# Logging / reporting
# ---------------------------------------------------------------------------

def configure_logging(settings: Optional[RuntimeSettings] = None) -> None:
    """Install the stderr (and optional file) handler once per process"""
    settings = settings or get_runtime_settings()
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.log_file_path:
        handlers.append(logging.FileHandler(settings.log_file_path))
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
    )


def emit_report(metrics: MetricsReport, fmt: str, path: Union[str, Path]) -> Path:
    """Write a metrics report as CSV (one row per scored class) or JSON.

    Raises:
        NonFiniteError: the report holds a non-finite value
        OSError: the path cannot be written
    """
    values = [metrics.m_dice, metrics.m_iou, metrics.m_acc, *metrics.tier_dice.values()]
    values += [v for c in metrics.per_class for v in (c.dice, c.iou, c.acc)]
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteError("emit_report: metrics contain non-finite values")
    path = Path(path)
    if fmt == "csv":
        return write_rows(path, REPORT_COLUMNS, metrics.csv_rows())
    if fmt == "json":
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(metrics.to_json() + "\n", encoding="utf-8")
        return path
    raise ConfigError(f"unknown report format {fmt!r}; use csv or json")


def _error_line(exc: BaseException) -> str:
    text = " ".join(str(exc).split())
    return f"error kind={type(exc).__name__} message={json.dumps(text)}"


# ---------------------------------------------------------------------------
# Config flags
# ---------------------------------------------------------------------------

def leaf_paths(model_cls: Type[BaseModel]) -> List[str]:
    paths = field_paths(model_cls)
    return [p for p in paths if not any(q.startswith(p + ".") for q in paths)]


def _add_config_flags(parser: argparse.ArgumentParser, model_cls: Type[BaseModel]) -> None:
    parser.add_argument("--config", type=Path, help=f"JSON document for {model_cls.__name__}")
    group = parser.add_argument_group(f"{model_cls.__name__} fields")
    for path in leaf_paths(model_cls):
        group.add_argument(f"--{path}", dest=_FLAG_PREFIX + path, metavar="VALUE", default=argparse.SUPPRESS)
    parser.set_defaults(config_root=model_cls)


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(args: argparse.Namespace) -> BaseModel:
    """Config file (if any) + dotted flag overrides, validated"""
    model_cls: Type[BaseModel] = args.config_root
    doc: Dict[str, Any] = {}
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {args.config}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
    overrides = {
        key[len(_FLAG_PREFIX):]: parse_value(value)
        for key, value in vars(args).items()
        if key.startswith(_FLAG_PREFIX)
    }
    return apply_overrides(model_cls, doc, overrides)


def write_resolved(cfg: BaseModel, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG
    path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    from nearquery.phantom import gen_phantom

    spec = resolve_config(args)
    write_resolved(spec, args.out)
    manifest = gen_phantom(spec, args.out, previews=args.previews)
    print(f"samples={len(manifest.samples)} notes={len(manifest.notes)} out={args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from nearquery.harness.trainer import train

    cfg = resolve_config(args)
    write_resolved(cfg, args.out)
    result = train(cfg, args.data, args.out)
    print(json.dumps(result.to_dict(), sort_keys=True))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from nearquery.harness.trainer import evaluate_model, model_from_checkpoint
    from nearquery.phantom import PhantomDataset

    model, ckpt = model_from_checkpoint(args.checkpoint)
    dataset = PhantomDataset(args.data, preprocess=bool(ckpt.meta.get("preprocess_trick", True)))
    if dataset.n_classes != model.config.n_classes:
        raise ConfigError(
            f"checkpoint predicts {model.config.n_classes} classes, dataset {args.data} has {dataset.n_classes}"
        )
    report = evaluate_model(model, dataset)
    path = emit_report(report, args.format, Path(args.out) / f"metrics.{args.format}")
    print(f"mDice={report.m_dice!r} mIoU={report.m_iou!r} mAcc={report.m_acc!r} report={path}")
    return 0


def load_grid(value: str) -> Union[str, List[AblationEntry]]:
    """A named grid ("default") or a JSON file holding a list of entries"""
    from nearquery.harness.ablation import NAMED_GRIDS

    if value in NAMED_GRIDS:
        return value
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"--grid must be one of {sorted(NAMED_GRIDS)} or a JSON file, got {value!r}")
    entries = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise ConfigError(f"grid file {path} must hold a JSON list")
    return [AblationEntry.model_validate(e) for e in entries]


def cmd_ablate(args: argparse.Namespace) -> int:
    from nearquery.harness.ablation import ablate

    base = resolve_config(args)
    grid = load_grid(args.grid)
    write_resolved(base, args.out)
    path = ablate(args.data, grid, args.out, base=base, timing=not args.no_timing)
    print(f"ablation={path}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from nearquery.harness.kernel_suite import run_suite

    reports = run_suite(tol=args.tol, seed=args.seed, only=args.case)
    worst = 0.0
    for name, report in reports.items():
        worst = max(worst, report.max_rel_err)
        print(f"case={name} max_rel_err={report.max_rel_err:.3e} {'ok' if report.passed else 'FAIL'}")
        if report.disconnected:
            logger.warning(f"{name}: parameters without gradient: {report.disconnected}")
    passed = all(r.passed for r in reports.values())
    print(f"{'PASS' if passed else 'FAIL'} max_rel_err={worst:.3e}")
    return 0 if passed else 1


def cmd_sample_stats(args: argparse.Namespace) -> int:
    from nearquery.model.deformattn import SPREAD_COLUMNS, sampling_spread_stats

    cfg: SpreadConfig = resolve_config(args)
    write_resolved(cfg, args.out)
    strategies = [OffsetAdjustConfig()]
    if cfg.offset.strategy != "none":
        strategies.append(cfg.offset)
    rows = []
    for offset_cfg in strategies:
        report = sampling_spread_stats(
            offset_cfg,
            n_draws=cfg.n_draws,
            seed=cfg.seed,
            sigma=cfg.sigma,
            n_levels=cfg.n_levels,
            n_points=cfg.n_points,
        )
        rows.extend(report.to_rows())
    path = write_rows(Path(args.out) / SAMPLE_STATS_CSV, SPREAD_COLUMNS, rows)
    for row in rows:
        print(f"level={row['level']} strategy={row['strategy']} mean_norm={row['mean_norm']:.4f}")
    print(f"sample_stats={path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nearquery",
        description="Offset-adjusted mask-transformer segmentation on synthetic phantoms",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a phantom dataset", allow_abbrev=False)
    p.add_argument("--out", required=True, type=Path, help="dataset directory")
    p.add_argument("--previews", action="store_true", help="also write PNG previews")
    _add_config_flags(p, PhantomSpec)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration", allow_abbrev=False)
    p.add_argument("--data", required=True, type=Path, help="dataset directory")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    _add_config_flags(p, TrainConfig)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint", allow_abbrev=False)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path, help="dataset directory")
    p.add_argument("--out", required=True, type=Path, help="report directory")
    p.add_argument("--format", choices=["csv", "json"], default="json")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="train every row of an ablation grid", allow_abbrev=False)
    p.add_argument("--data", required=True, type=Path, help="dataset directory")
    p.add_argument("--out", required=True, type=Path, help="ablation directory")
    p.add_argument("--grid", default="default", help='"default" or a JSON file of {name, overrides} entries')
    p.add_argument("--no-timing", action="store_true", help="write 0.0 in the seconds column")
    _add_config_flags(p, TrainConfig)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference kernel suite", allow_abbrev=False)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--case", action="append", help="run only this case (repeatable)")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("sample-stats", help="offset-norm statistics", allow_abbrev=False)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    _add_config_flags(p, SpreadConfig)
    p.set_defaults(handler=cmd_sample_stats)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging()
    try:
        return args.handler(args)
    except (NearQueryError, ValueError, KeyError, OSError) as e:
        # pydantic.ValidationError is a ValueError
        logger.debug("command failed", exc_info=True)
        print(_error_line(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
