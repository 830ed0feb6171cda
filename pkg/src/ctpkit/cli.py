"""Command-line entry point: ``ctpkit <subcommand>``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import CorpusSpec, gen_corpus
from .harness import (PRESETS, ArmPlan, ExperimentSpec, PhasePlan, load_report, preset, root_seed,
                      run_experiment, write_outputs)
from .mixer import MixPlan, audit_csv, reservoir_proportions
from .plots import emit_plots
from .schedule import ScheduleSpec, dump_csv
from .trainer import RunRecord


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_data(args) -> int:
    cfg = _read_json(args.spec)
    items = cfg["corpora"] if "corpora" in cfg else [cfg]
    if isinstance(items, dict):
        items = [dict(v, name=k) for k, v in items.items()]
    seed = root_seed(cfg.get("seed", 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sums = {}
    for item in items:
        item = dict(item)
        item.setdefault("transition_seed", seed)
        spec = CorpusSpec.from_json(item)
        train, val = gen_corpus(spec)
        for split, stream in (("train", train), ("val", val)):
            path = out / f"{spec.name}.{split}.tok"
            stream.save(path)
            sums[path.name] = stream.checksum()
            print(f"{path}  {len(stream)} tokens  sha256 {sums[path.name]}")
    (out / "checksums.json").write_text(json.dumps(sums, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_schedule_dump(args) -> int:
    spec = ScheduleSpec.from_json(_read_json(args.config))
    steps = None if args.steps is None else range(args.steps + 1)
    _emit(dump_csv(spec, steps), args.out)
    return 0


def cmd_mix_audit(args) -> int:
    cfg = _read_json(args.config)
    if "reservoir" in cfg:
        r = cfg["reservoir"]
        rows = reservoir_proportions(r["sizes"], r["alpha"])
        lines = ["dataset," + ",".join(f"p_{j}" for j in range(len(rows)))]
        for i, row in enumerate(rows, start=1):
            lines.append(f"{i}," + ",".join(repr(p) for p in row) + "," * (len(rows) - len(row)))
        _emit("\n".join(lines) + "\n", args.out)
        return 0
    _emit(audit_csv(MixPlan.from_json(cfg), args.steps), args.out)
    return 0


def _train_spec(cfg: dict) -> ExperimentSpec:
    """An experiment from a ``train`` config; a bare ``phases`` list becomes one arm."""
    cfg = dict(cfg)
    seed = root_seed(cfg.get("seed", 0))
    cfg["seed"] = seed
    model = dict(cfg.get("model", {}))
    model.setdefault("init_seed", seed)
    cfg["model"] = model
    corpora = {}
    for name, c in cfg["corpora"].items():
        c = dict(c, name=name)
        c.setdefault("transition_seed", seed)
        corpora[name] = c
    cfg["corpora"] = corpora
    if "arms" not in cfg:
        cfg["arms"] = [{"name": cfg.pop("run_name", "run"), "phases": cfg.pop("phases")}]
    cfg.setdefault("name", "train")
    batch = cfg.get("batch_size", 32)
    for arm in cfg["arms"]:
        for ph in arm["phases"]:
            mix = ph.get("data", {}).get("mix")
            if mix is not None:
                mix.setdefault("batch_size", batch)
    return ExperimentSpec.from_json(cfg)


def cmd_train(args) -> int:
    spec = _train_spec(_read_json(args.config))
    report = run_experiment(spec, args.out, args.cache_dir, progress=_progress(args))
    print(report.table())
    return 0


def _progress(args):
    if args.quiet:
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


def cmd_experiment(args) -> int:
    options = {}
    if args.shift:
        options["shift"] = args.shift
    spec = preset(args.preset, scale=args.scale, seed=root_seed(args.seed), **options)
    out = args.out or f"runs/{args.preset}"
    report = run_experiment(spec, out, args.cache_dir or str(Path(out) / "cache"),
                            progress=_progress(args))
    print(report.table())
    return 1 if args.strict and not report.passed else 0


def cmd_report(args) -> int:
    report = load_report(args.dir)
    print(report.table())
    return 1 if args.strict and not report.passed else 0


def cmd_plot(args) -> int:
    if args.dir:
        report = load_report(args.dir)
        spec = ExperimentSpec.from_json(_read_json(Path(args.dir) / "experiment.json"))
        write_outputs(spec, report, args.dir)
        return 0
    records = {Path(p).stem: RunRecord.from_csv(Path(p).read_text()) for p in args.csv}
    for path in emit_plots(records, args.out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctpkit", description="Desk-scale continual pre-training toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate token streams from corpus specs")
    g.add_argument("--spec", required=True, help="JSON corpus spec, or {'corpora': [...]}")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("schedule-dump", help="learning rate per step as CSV")
    s.add_argument("--config", required=True, help="JSON schedule spec")
    s.add_argument("--steps", type=int, help="last step to dump (required for open-ended schedules)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_schedule_dump)

    m = sub.add_parser("mix-audit", help="per-batch replay composition as CSV")
    m.add_argument("--config", required=True, help="JSON mix plan, or {'reservoir': {...}}")
    m.add_argument("--steps", type=int, default=100)
    m.add_argument("--out")
    m.set_defaults(func=cmd_mix_audit)

    t = sub.add_parser("train", help="run phases from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--cache-dir")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("experiment", help="run a preset study")
    e.add_argument("--preset", required=True, choices=PRESETS)
    e.add_argument("--scale", type=float, default=1.0, help="multiply every step budget")
    e.add_argument("--out")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--shift", choices=("weak", "strong", "both"))
    e.add_argument("--cache-dir")
    e.add_argument("--strict", action="store_true", help="exit 1 if any trend check fails")
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_experiment)

    r = sub.add_parser("report", help="rebuild a report from an experiment directory")
    r.add_argument("--dir", required=True)
    r.add_argument("--strict", action="store_true")
    r.set_defaults(func=cmd_report)

    pl = sub.add_parser("plot", help="SVG charts from run CSVs or an experiment directory")
    pl.add_argument("--dir")
    pl.add_argument("csv", nargs="*")
    pl.add_argument("--out", default="plots")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "plot" and not args.dir and not args.csv:
        build_parser().error("plot needs --dir or CSV files")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
