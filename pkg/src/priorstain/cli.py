"""``priorstain`` command line: synth, train, eval, ablate, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import (
    BackendError, ConfigurationError, DataError, NumericalError, ParameterError, ProtocolError,
    RangeViolationError, ShapeMismatchError,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("priorstain")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc


def _nonempty(path: Path) -> bool:
    return path.exists() and any(path.iterdir())


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import SyntheticDatasetSpec, write_synthetic_dataset
    from .runs import write_run_manifest

    d = _read_json(args.config)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"bad override {item!r}")
        try:
            d[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            d[key.strip()] = value
    if args.seed is not None:
        d["seed"] = args.seed
    spec = SyntheticDatasetSpec.from_dict(d)
    spec.tissue.validate()
    out = Path(args.out)
    if _nonempty(out) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to write into it")
    write_run_manifest(out, "synth", spec.to_dict(), spec.tissue.seed)
    splits = write_synthetic_dataset(out, spec)
    n = spec.n_cases * spec.patches_per_case
    print(f"wrote {n} paired samples ({spec.n_cases} cases) to {out}"
          + (f"; splits {({k: len(splits.cases(k)) for k in ('train', 'val', 'test')})}" if splits else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval / ablate
# ---------------------------------------------------------------------------

def _experiment_config(args):
    from .training import ExperimentConfig, apply_overrides

    d = _read_json(args.config)
    cfg = ExperimentConfig.from_dict(d) if d else ExperimentConfig()
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "data", None):
        cfg = replace(cfg, dataset=str(args.data))
    return cfg


def _splits(data_root, seed: int):
    from .data import make_splits, manifest_splits, read_manifest

    splits = manifest_splits(data_root)
    if splits is not None:
        return splits
    doc = read_manifest(data_root)
    cases = [c["case_id"] for c in doc.get("cases", [])]
    if not cases:
        cases = [p.name for p in Path(data_root).iterdir() if p.is_dir() and p.name != "priors"]
    return make_splits(cases, seed=seed)


def _load(data_root, cfg, splits, split_names):
    from .data import load_dataset

    cases = [c for s in split_names for c in splits.cases(s)]
    samples, skipped = load_dataset(data_root, cfg.layout, cfg.image_size, cases=cases)
    if skipped:
        log.warning("%d incomplete samples skipped", len(skipped))
    return samples


def cmd_train(args) -> int:
    from .training import train

    cfg = _experiment_config(args)
    cfg.validate()
    splits = _splits(args.data, cfg.seed)
    samples = _load(args.data, cfg, splits, ("train", "val"))
    res = train(cfg, samples, splits, args.out)
    print(f"trained {res.epochs_run} epochs; best val loss {res.best_val_loss:.6f} "
          f"at epoch {res.best_epoch}; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .models import load_checkpoint
    from .training import ExperimentConfig

    _, payload = load_checkpoint(args.checkpoint)
    cfg = ExperimentConfig.from_dict(payload["config"])
    splits = _splits(args.data, cfg.seed)
    samples = _load(args.data, cfg, splits, (args.split,))
    rep = evaluate(args.checkpoint, samples, args.split, args.out, tau_dir=args.tau_dir)
    row = rep.table_row()
    print(json.dumps({"split": args.split, **row}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .report import format_markdown, table_rows_from_cells
    from .training import run_ablation_grid

    cfg = _experiment_config(args)
    splits = _splits(args.data, cfg.seed)
    samples = _load(args.data, cfg, splits, ("train", "val", "test"))
    cells = run_ablation_grid(cfg, samples, splits, args.out, archs=args.archs, parallel=args.parallel)
    print(format_markdown(table_rows_from_cells(cells)), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import build_report

    if not args.run_dirs:
        raise UsageError("report needs at least one run directory")
    summary = build_report(args.run_dirs, args.out)
    if summary["rows"] == 0:
        raise DataError(f"no completed runs among {args.run_dirs}")
    print((Path(args.out) / "table.md").read_text(), end="")
    for m in summary["missing"]:
        print(f"missing report: {m}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .training import ARCHS

    p = _Parser(prog="priorstain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, config_help):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)

    s = sub.add_parser("synth", help="generate a synthetic paired dataset")
    common(s, "synthetic dataset spec (JSON)")
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one experiment")
    common(t, "experiment config (JSON)")
    t.add_argument("--data", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--tau-dir", help="directory holding a frozen tau.json (default: --out)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the None/Binary/Soft/Soft+Var grid")
    common(a, "base experiment config (JSON)")
    a.add_argument("--data", required=True)
    a.add_argument("--archs", nargs="+", choices=ARCHS, default=["regression_unet", "pix2pix_unet"])
    a.add_argument("--parallel", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="aggregate tables and panels from run directories")
    r.add_argument("run_dirs", nargs="*")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, ParameterError, ProtocolError) as exc:
        print(f"priorstain: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeMismatchError, RangeViolationError, BackendError, FileNotFoundError) as exc:
        print(f"priorstain: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"priorstain: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
