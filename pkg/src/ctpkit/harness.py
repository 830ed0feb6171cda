"""Experiment presets, arm orchestration, reports and trend checks.

An experiment is a set of arms; an arm is a chain of phases, each resuming
from its parent phase (by default the one before it).  Phase results are
memoized by a content hash of everything that determines them, so arms that
share a prefix (the pretrained base model, the union baseline) train it once.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .checkpoint import Checkpoint
from .data import CorpusSpec, DomainMixture, ShiftKind, load_or_generate
from .mixer import MixPlan, reservoir_proportions
from .model import ModelConfig
from .optim import OptimConfig
from .schedule import ScheduleKind, ScheduleSpec
from .trainer import PhaseSpec, RunRecord, continue_from, eval_windows, final_loss_summary, run_phase

CACHE_VERSION = 1

# reference hyperparameters (405M-parameter runs)
ETA_MAX = 3e-4
ETA_MIN = 3e-5
ETA_CONST = 1.65e-4
WARMUP_PCT = 1.0
COOLDOWN_PCT = 60.0
CONSTANT_PCT = 25.0
INVSQRT_STEEPNESS = 10.0

# desk-scale budget: 300B tokens -> 20k steps, 200B -> 14k
PRETRAIN_STEPS = 20_000
WEAK_STEPS = 20_000
STRONG_STEPS = 14_000
BATCH_SIZE = 32
EVAL_WINDOWS = 4096
EVAL_EVERY = 100
WEAK_LAMBDA = 0.5

# (name, sampling weight %, size in B tokens), largest first
DOMAINS = (
    ("CommonCrawl", 52.09, 155.89),
    ("C4", 26.69, 79.87),
    ("GitHub", 5.22, 15.63),
    ("ArXiv", 4.43, 13.25),
    ("Book", 4.20, 12.58),
    ("Wikipedia", 4.00, 11.96),
    ("StackExchange", 3.37, 10.09),
)

PRESETS = ("warmup-sweep", "rewarm-sweep", "replay-sweep", "continual-vs-union",
           "same-data-rewarm", "infinite-vs-cosine", "three-splits", "domain-incremental")


class UnknownPresetError(KeyError):
    pass


class ArmError(RuntimeError):
    def __init__(self, arm: str, phase: str, cause: Exception):
        super().__init__(f"arm {arm!r}, phase {phase!r}: {cause}")
        self.arm = arm
        self.phase = phase


# --------------------------------------------------------------------------- #
# Specs
# --------------------------------------------------------------------------- #

@dataclass
class PhasePlan:
    """A phase as configuration: stream names, not streams.

    ``data`` is a :class:`MixPlan` or a :class:`DomainMixture` over corpus
    names.  ``parent`` is ``None`` for the previous phase of the arm,
    ``"fresh"`` for a new model, or the name of an earlier phase to branch from.
    """

    name: str
    data: MixPlan | DomainMixture
    schedule: ScheduleSpec
    steps: int
    parent: str | None = None
    reset_optimizer: bool = True
    eval: list | None = None
    dense_until: int = 0
    dense_every: int = 10
    wrap: bool = False
    allow_post_anneal: bool = False

    def to_json(self) -> dict:
        if isinstance(self.data, MixPlan):
            data = {"mix": self.data.to_json()}
        else:
            data = {"mixture": {"domains": list(self.data.domains), "weights": list(self.data.weights)}}
        return {"name": self.name, "data": data, "schedule": self.schedule.to_json(),
                "steps": self.steps, "parent": self.parent, "reset_optimizer": self.reset_optimizer,
                "eval": self.eval, "dense_until": self.dense_until, "dense_every": self.dense_every,
                "wrap": self.wrap, "allow_post_anneal": self.allow_post_anneal}

    @classmethod
    def from_json(cls, d: dict) -> "PhasePlan":
        d = dict(d)
        data = d.pop("data")
        if "mix" in data:
            d["data"] = MixPlan.from_json(data["mix"])
        else:
            m = data["mixture"]
            d["data"] = DomainMixture(tuple(m["domains"]), tuple(float(w) for w in m["weights"]))
        d["schedule"] = ScheduleSpec.from_json(d["schedule"])
        return cls(**d)

    def sources(self) -> list[str]:
        if isinstance(self.data, MixPlan):
            return [self.data.new_source] + [n for n, _ in self.data.replay_sources]
        return list(self.data.domains)


@dataclass
class ArmPlan:
    name: str
    phases: list
    # phases whose final-loss summaries the report shows; default: the last
    report: list | None = None

    def report_phases(self) -> list[str]:
        return self.report or [self.phases[-1].name]

    def to_json(self) -> dict:
        return {"name": self.name, "phases": [p.to_json() for p in self.phases], "report": self.report}

    @classmethod
    def from_json(cls, d: dict) -> "ArmPlan":
        return cls(d["name"], [PhasePlan.from_json(p) for p in d["phases"]], d.get("report"))


@dataclass
class ExperimentSpec:
    name: str
    corpora: dict
    eval: list
    arms: list
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = BATCH_SIZE
    seed: int = 0
    eval_every: int = EVAL_EVERY
    eval_windows: int = EVAL_WINDOWS
    # datasets averaged into AVG; default: all eval sets
    report_datasets: list | None = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ValueError("arm names must be unique")
        for arm in self.arms:
            for ph in arm.phases:
                for src in ph.sources() + list(ph.eval or []):
                    if src not in self.corpora:
                        raise ValueError(f"arm {arm.name!r} uses unknown corpus {src!r}")

    def to_json(self) -> dict:
        return {"name": self.name,
                "corpora": {k: v.to_json() for k, v in self.corpora.items()},
                "eval": list(self.eval), "arms": [a.to_json() for a in self.arms],
                "model": asdict(self.model), "optim": asdict(self.optim),
                "batch_size": self.batch_size, "seed": self.seed, "eval_every": self.eval_every,
                "eval_windows": self.eval_windows, "report_datasets": self.report_datasets,
                "options": self.options}

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["corpora"] = {k: CorpusSpec.from_json(v) for k, v in d["corpora"].items()}
        d["arms"] = [ArmPlan.from_json(a) for a in d["arms"]]
        d["model"] = ModelConfig(**d.get("model", {}))
        d["optim"] = OptimConfig(**d.get("optim", {}))
        return cls(**d)

    def datasets(self) -> list[str]:
        return list(self.report_datasets or self.eval)


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #

@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ComparisonReport:
    experiment: str
    datasets: list
    # summaries[arm][phase] -> {dataset: final loss}
    summaries: dict
    records: dict = field(default_factory=dict, repr=False)
    checks: list = field(default_factory=list)

    def final(self, arm: str) -> dict:
        return list(self.summaries[arm].values())[-1]

    def avg(self, arm: str, phase: str | None = None) -> float:
        s = self.final(arm) if phase is None else self.summaries[arm][phase]
        # an arm averages over the report datasets it actually tracks
        vals = [s[d] for d in self.datasets if d in s]
        return math.fsum(vals) / len(vals)

    def record(self, arm: str, phase: str | None = None) -> RunRecord:
        if phase is None:
            phase = list(self.summaries[arm])[-1]
        return self.records[(arm, phase)]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json(self) -> dict:
        return {"experiment": self.experiment, "datasets": self.datasets,
                "summaries": self.summaries,
                "avg": {a: {p: self.avg(a, p) for p in ph} for a, ph in self.summaries.items()},
                "checks": [asdict(c) for c in self.checks]}

    def table(self) -> str:
        cols = self.datasets
        head = ["arm", "phase"] + cols + ["AVG"]
        lines = [" | ".join(head), " | ".join("---" for _ in head)]
        for arm, phases in self.summaries.items():
            for phase, s in phases.items():
                vals = [f"{s[d]:.4f}" if d in s else "-" for d in cols] + [f"{self.avg(arm, phase):.4f}"]
                lines.append(" | ".join([arm, phase] + vals))
        if self.checks:
            lines.append("")
            for c in self.checks:
                lines.append(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
        return "\n".join(lines)


def _summary(record: RunRecord, window: int = 100, stride: int = 10) -> dict:
    # heavily scaled-down phases can be shorter than the averaging window
    last = record.rows[-1].step if record.rows else 0
    if last < window:
        window = max(stride, last - last % stride)
    return final_loss_summary(record, window, stride)


def build_report(spec: ExperimentSpec, records: dict) -> ComparisonReport:
    """Summaries and checks from run records keyed by ``(arm, phase)``."""
    summaries = {}
    for arm in spec.arms:
        summaries[arm.name] = {p: _summary(records[(arm.name, p)]) for p in arm.report_phases()}
    report = ComparisonReport(spec.name, spec.datasets(), summaries, records)
    check = CHECKS.get(spec.options.get("preset", spec.name))
    if check is not None:
        report.checks = check(spec, report)
    return report


# --------------------------------------------------------------------------- #
# Running
# --------------------------------------------------------------------------- #

def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:20]


class _PhaseCache:
    """Memoizes phase results in memory and, optionally, on disk."""

    def __init__(self, cache_dir=None):
        self.dir = None if cache_dir is None else Path(cache_dir) / "phases"
        self.mem: dict = {}

    def get(self, key: str):
        if key in self.mem:
            return self.mem[key]
        if self.dir is not None:
            ck, rc = self.dir / f"{key}.ckpt", self.dir / f"{key}.csv"
            if ck.exists() and rc.exists():
                out = (Checkpoint.load(ck), RunRecord.from_csv(rc.read_text()))
                self.mem[key] = out
                return out
        return None

    def put(self, key: str, ckpt: Checkpoint, record: RunRecord) -> None:
        self.mem[key] = (ckpt, record)
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            tmp = self.dir / f"{key}.tmp"
            tmp.write_bytes(ckpt.to_bytes())
            tmp.replace(self.dir / f"{key}.ckpt")
            tmp.write_text(record.to_csv())
            tmp.replace(self.dir / f"{key}.csv")


def run_experiment(spec: ExperimentSpec, out_dir=None, cache_dir=None,
                   progress: Callable[[str], None] | None = None) -> ComparisonReport:
    """Run every arm, write per-phase CSVs and plots under ``out_dir``, return the report."""
    streams, evals = {}, {}
    tracked = set(spec.eval) | {e for a in spec.arms for p in a.phases for e in (p.eval or [])}
    needed = tracked | {s for a in spec.arms for p in a.phases for s in p.sources()}
    corpus_cache = None if cache_dir is None else Path(cache_dir) / "corpora"
    for name in sorted(needed):
        train, val = load_or_generate(spec.corpora[name], corpus_cache)
        streams[name] = train
        if name in tracked:
            limit = min(spec.eval_windows, val.num_windows(spec.model.context_length))
            evals[name] = eval_windows(val, spec.model.context_length, limit)

    cache = _PhaseCache(cache_dir)
    base = {"v": CACHE_VERSION, "model": asdict(spec.model), "optim": asdict(spec.optim),
            "batch": spec.batch_size, "seed": spec.seed, "eval_every": spec.eval_every,
            "eval_windows": spec.eval_windows}
    records = {}
    for arm in spec.arms:
        done: dict = {}
        prev = None
        for ph in arm.phases:
            parent = prev if ph.parent is None else (None if ph.parent == "fresh" else ph.parent)
            if parent is not None and parent not in done:
                raise ArmError(arm.name, ph.name, KeyError(f"unknown parent phase {parent!r}"))
            parent_key = done[parent][0] if parent is not None else None
            ev = list(ph.eval if ph.eval is not None else spec.eval)
            desc = ph.to_json()
            desc.pop("name")
            desc.pop("parent")
            desc["corpora"] = {s: spec.corpora[s].to_json() for s in sorted(set(ph.sources()) | set(ev))}
            desc["eval"] = ev
            key = _digest({"base": base, "phase": desc, "parent": parent_key})
            hit = cache.get(key)
            if hit is None:
                if progress:
                    progress(f"{spec.name}: {arm.name}/{ph.name} ({ph.steps} steps)")
                try:
                    pspec = PhaseSpec(
                        data=ph.data, schedule=ph.schedule, steps=ph.steps,
                        sources={s: streams[s] for s in ph.sources()},
                        reset_optimizer=ph.reset_optimizer, model=spec.model, optim=spec.optim,
                        batch_size=spec.batch_size, seed=spec.seed, wrap_sources=ph.wrap,
                        allow_post_anneal=ph.allow_post_anneal, name=f"{arm.name}/{ph.name}")
                    if parent is not None:
                        pspec = continue_from(done[parent][1], pspec)
                    ckpt, record = run_phase(pspec, {e: evals[e] for e in ev}, spec.eval_every,
                                             dense_until=ph.dense_until, dense_every=ph.dense_every)
                except Exception as exc:
                    raise ArmError(arm.name, ph.name, exc) from exc
                cache.put(key, ckpt, record)
                hit = (ckpt, record)
            ckpt, record = hit
            record = RunRecord(record.datasets, record.rows, f"{arm.name}/{ph.name}")
            done[ph.name] = (key, ckpt)
            records[(arm.name, ph.name)] = record
            prev = ph.name

    report = build_report(spec, records)
    if out_dir is not None:
        write_outputs(spec, report, out_dir)
    return report


def write_outputs(spec: ExperimentSpec, report: ComparisonReport, out_dir) -> None:
    from .plots import emit_plots

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
    for (arm, phase), rec in report.records.items():
        d = out / arm
        d.mkdir(exist_ok=True)
        (d / f"{phase}.csv").write_text(rec.to_csv())
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "report.md").write_text(report.table() + "\n")
    finals = {f"{arm.name}/{p}": report.records[(arm.name, p)]
              for arm in spec.arms for p in arm.report_phases()}
    emit_plots(finals, out / "plots")


def load_report(out_dir) -> ComparisonReport:
    """Rebuild a report from an output directory's spec and CSVs."""
    out = Path(out_dir)
    spec = ExperimentSpec.from_json(json.loads((out / "experiment.json").read_text()))
    records = {}
    for arm in spec.arms:
        for ph in arm.phases:
            path = out / arm.name / f"{ph.name}.csv"
            records[(arm.name, ph.name)] = RunRecord.from_csv(path.read_text(), f"{arm.name}/{ph.name}")
    return build_report(spec, records)


# --------------------------------------------------------------------------- #
# Presets
# --------------------------------------------------------------------------- #

def _steps(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def _cosine(eta_max: float, steps: int, warmup_pct: float = WARMUP_PCT) -> ScheduleSpec:
    return ScheduleSpec.cosine(eta_max, 0.1 * eta_max, steps, warmup_pct=warmup_pct)


def _mix(new: str, batch: int, replay: dict | None = None, x: float = 0.0) -> MixPlan:
    srcs = [(k, v) for k, v in (replay or {}).items()] if x > 0 else []
    return MixPlan(new, srcs, x, batch)


def _pretrain(steps: int, batch: int) -> PhasePlan:
    return PhasePlan("pretrain", _mix("D0", batch), _cosine(ETA_MAX, steps), steps,
                     parent="fresh", eval=["D0"])


def _base_corpora(seed: int, shifts=("weak", "strong"), weak_lambda: float = WEAK_LAMBDA) -> dict:
    out = {"D0": CorpusSpec("D0", transition_seed=seed, val_tokens=EVAL_WINDOWS + 9)}
    if "weak" in shifts:
        out["D1w"] = CorpusSpec("D1w", transition_seed=seed, shift=ShiftKind.weak(weak_lambda),
                                val_tokens=EVAL_WINDOWS + 9)
    if "strong" in shifts:
        out["D1s"] = CorpusSpec("D1s", transition_seed=seed, shift=ShiftKind.strong(),
                                val_tokens=EVAL_WINDOWS + 9)
    return out


def _shifts(shift: str) -> list[tuple[str, str, int]]:
    table = {"weak": ("weak", "D1w", WEAK_STEPS), "strong": ("strong", "D1s", STRONG_STEPS)}
    if shift == "both":
        return [table["weak"], table["strong"]]
    if shift not in table:
        raise ValueError(f"shift must be weak, strong or both, got {shift!r}")
    return [table[shift]]


def _union(tag: str, d1: str, steps0: int, steps1: int, batch: int) -> ArmPlan:
    mixture = DomainMixture.proportional(("D0", d1), (steps0, steps1))
    ph = PhasePlan("union", mixture, _cosine(ETA_MAX, steps0 + steps1), steps0 + steps1,
                   parent="fresh", eval=["D0", d1])
    return ArmPlan(f"{tag}-union", [ph])


def _continual(tag: str, label: str, d1: str, pre: PhasePlan, steps: int, batch: int,
               schedule: ScheduleSpec, x: float = 0.0, **kw) -> ArmPlan:
    ph = PhasePlan("continue", _mix(d1, batch, {"D0": 1.0}, x), schedule, steps,
                   eval=["D0", d1], **kw)
    return ArmPlan(f"{tag}-{label}", [pre, ph])


def preset(name: str, scale: float = 1.0, seed: int = 0, **options) -> ExperimentSpec:
    """Fully specified arms for a named study.  ``scale`` shrinks every step budget."""
    if name not in PRESETS:
        raise UnknownPresetError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return _BUILDERS[name](scale, seed, **options)


def _common(name, scale, seed, corpora, arms, eval_sets, report=None, **opts) -> ExperimentSpec:
    opts = {"preset": name, "scale": scale, **opts}
    return ExperimentSpec(name, corpora, eval_sets, arms, ModelConfig(init_seed=seed),
                          batch_size=opts.pop("batch_size", BATCH_SIZE), seed=seed,
                          report_datasets=report, options=opts)


def _warmup_sweep(scale, seed, shift="weak"):
    (tag, d1, n1), = _shifts(shift)
    batch = BATCH_SIZE
    pre = _pretrain(_steps(PRETRAIN_STEPS, scale), batch)
    steps = _steps(n1, scale)
    dense = max(1, steps // 50)
    arms = [_continual(tag, f"warmup-{w:g}", d1, pre, steps, batch,
                       _cosine(ETA_MAX, steps, warmup_pct=w), dense_until=dense,
                       dense_every=max(1, dense // 40))
            for w in (0.0, 0.5, 1.0, 2.0)]
    return _common("warmup-sweep", scale, seed, _base_corpora(seed, (tag,)), arms, ["D0", d1],
                   shift=shift)


def _rewarm_sweep(scale, seed, shift="strong"):
    arms, corpora, ev = [], _base_corpora(seed), []
    batch = BATCH_SIZE
    pre = _pretrain(_steps(PRETRAIN_STEPS, scale), batch)
    for tag, d1, n1 in _shifts(shift):
        steps = _steps(n1, scale)
        w = ScheduleSpec.cosine(ETA_MAX, ETA_MIN, steps).warmup_steps
        arms.append(_continual(tag, "const-eta-min", d1, pre, steps, batch,
                               ScheduleSpec.constant(ETA_MIN, steps=steps)))
        arms.append(_continual(tag, "const-eta-max", d1, pre, steps, batch,
                               ScheduleSpec.constant(ETA_MAX, warmup_steps=w, steps=steps)))
        for mult in (0.5, 1.0, 2.0):
            arms.append(_continual(tag, f"rewarm-{mult:g}x", d1, pre, steps, batch,
                                   _cosine(mult * ETA_MAX, steps)))
        arms.append(_union(tag, d1, _steps(PRETRAIN_STEPS, scale), steps, batch))
        ev.append(d1)
    return _common("rewarm-sweep", scale, seed, corpora, arms, ["D0"] + ev, shift=shift)


REPLAY_FRACTIONS = (0.0, 0.01, 0.05, 0.10, 0.25, 0.50)


def _replay_sweep(scale, seed, shift="both"):
    arms, corpora, ev = [], _base_corpora(seed), []
    batch = BATCH_SIZE
    pre = _pretrain(_steps(PRETRAIN_STEPS, scale), batch)
    for tag, d1, n1 in _shifts(shift):
        steps = _steps(n1, scale)
        for x in REPLAY_FRACTIONS:
            arms.append(_continual(tag, f"replay-{100 * x:g}", d1, pre, steps, batch,
                                   _cosine(ETA_MAX, steps), x))
        arms.append(_union(tag, d1, _steps(PRETRAIN_STEPS, scale), steps, batch))
        ev.append(d1)
    return _common("replay-sweep", scale, seed, corpora, arms, ["D0"] + ev, shift=shift)


# replay used by the continual arm when matching the union baseline
UNION_MATCH_REPLAY = {"weak": 0.05, "strong": 0.25}


def _continual_vs_union(scale, seed, shift="both"):
    arms, corpora, ev = [], _base_corpora(seed), []
    batch = BATCH_SIZE
    pre = _pretrain(_steps(PRETRAIN_STEPS, scale), batch)
    for tag, d1, n1 in _shifts(shift):
        steps = _steps(n1, scale)
        x = UNION_MATCH_REPLAY[tag]
        arms.append(_continual(tag, f"replay-{100 * x:g}", d1, pre, steps, batch,
                               _cosine(ETA_MAX, steps), x))
        arms.append(_continual(tag, "replay-0", d1, pre, steps, batch, _cosine(ETA_MAX, steps)))
        arms.append(_continual(tag, "const-eta-min", d1, pre, steps, batch,
                               ScheduleSpec.constant(ETA_MIN, steps=steps)))
        arms.append(_union(tag, d1, _steps(PRETRAIN_STEPS, scale), steps, batch))
        ev.append(d1)
    return _common("continual-vs-union", scale, seed, corpora, arms, ["D0"] + ev, shift=shift)


REWARM_PEAKS = (1.5e-4, 3e-4, 6e-4)
# the re-warm bump sits on top of the single-sample noise floor, which shrinks with batch
# size and with the pretraining length; batch 1 over 400k steps lifts it clear of 0.02
SAME_DATA_BATCH = 1
SAME_DATA_PRETRAIN = 400_000


def _same_data_rewarm(scale, seed, batch_size=SAME_DATA_BATCH, pretrain_steps=SAME_DATA_PRETRAIN):
    pre_n = _steps(pretrain_steps, scale)
    # only the first tenth of each continuation schedule is scored, so only that much runs
    window = max(1, pre_n // 10)
    dense = dict(dense_until=window, dense_every=max(1, window // 50))
    arms = [ArmPlan("const-eta-min", [_pretrain(pre_n, batch_size), PhasePlan(
        "continue", _mix("D0", batch_size), ScheduleSpec.constant(ETA_MIN, steps=pre_n), window,
        eval=["D0"], **dense)])]
    for peak in REWARM_PEAKS:
        arms.append(ArmPlan(f"rewarm-{peak:g}", [_pretrain(pre_n, batch_size), PhasePlan(
            "continue", _mix("D0", batch_size), _cosine(peak, pre_n), window, eval=["D0"],
            **dense)]))
    corpora = {"D0": CorpusSpec("D0", transition_seed=seed, val_tokens=EVAL_WINDOWS + 9)}
    return _common("same-data-rewarm", scale, seed, corpora, arms, ["D0"], batch_size=batch_size)


def rewarm_window(spec: ExperimentSpec) -> int:
    """Steps at the start of the continuation over which re-warm excess is measured."""
    return max(1, spec.arms[0].phases[-1].schedule.t_end // 10)


def _infinite(kind: ScheduleKind, steps: int, constant_steps: int | None = -1,
              anneal_steps: int | None = None) -> ScheduleSpec:
    """Infinite schedule with the standard span percentages of ``steps``."""
    full = ScheduleSpec.infinite(kind, ETA_MAX, ETA_MIN, ETA_CONST, steps, WARMUP_PCT,
                                 COOLDOWN_PCT, CONSTANT_PCT, INVSQRT_STEEPNESS)
    if constant_steps == -1:
        return full
    return ScheduleSpec(kind, ETA_MAX, ETA_MIN, ETA_CONST, full.warmup_steps, full.cooldown_steps,
                        constant_steps, anneal_steps or 0, INVSQRT_STEEPNESS)


def _infinite_vs_cosine(scale, seed):
    n = _steps(PRETRAIN_STEPS, scale)
    batch = BATCH_SIZE
    arms = [ArmPlan("cosine", [_pretrain(n, batch)])]
    for kind, label in ((ScheduleKind.INFINITE_COSINE, "cosine-inf"),
                        (ScheduleKind.INFINITE_INVSQRT, "invsqrt-inf")):
        arms.append(ArmPlan(label, [PhasePlan("train", _mix("D0", batch), _infinite(kind, n), n,
                                              parent="fresh", eval=["D0"])]))
    corpora = {"D0": CorpusSpec("D0", transition_seed=seed, val_tokens=EVAL_WINDOWS + 9)}
    return _common("infinite-vs-cosine", scale, seed, corpora, arms, ["D0"])


def _three_splits(scale, seed, splits=3):
    n = _steps(PRETRAIN_STEPS, scale)
    per = n // splits
    batch = BATCH_SIZE
    corpora = {"D0": CorpusSpec("D0", transition_seed=seed, val_tokens=EVAL_WINDOWS + 9)}
    for i in range(splits):
        corpora[f"S{i}"] = CorpusSpec(f"S{i}", transition_seed=seed, shift=ShiftKind.iid(i),
                                      train_tokens=per * batch + 1000, val_tokens=16)
    arms = []
    phases = [PhasePlan(f"split{i}", _mix(f"S{i}", batch), _cosine(ETA_MAX, per), per,
                        parent="fresh" if i == 0 else None)
              for i in range(splits)]
    arms.append(ArmPlan("repeated-cosine", phases))
    # the schedule spans the first split; later splits continue at eta_const
    full = _infinite(ScheduleKind.INFINITE_COSINE, per)
    anneal = full.anneal_steps
    head = per - anneal
    for kind, label in ((ScheduleKind.INFINITE_COSINE, "cosine-inf"),
                        (ScheduleKind.INFINITE_INVSQRT, "invsqrt-inf")):
        open_ended = _infinite(kind, per, constant_steps=None)
        annealing = _infinite(kind, per, constant_steps=0, anneal_steps=anneal)
        phases, report = [], []
        for i in range(splits):
            src = _mix(f"S{i}", batch)
            phases.append(PhasePlan(f"split{i}-constant", src, open_ended, head,
                                    parent="fresh" if i == 0 else f"split{i - 1}-tail"))
            phases.append(PhasePlan(f"split{i}-anneal", src, annealing, anneal,
                                    parent=f"split{i}-constant", reset_optimizer=False))
            phases.append(PhasePlan(f"split{i}-tail", src, open_ended, anneal,
                                    parent=f"split{i}-constant", reset_optimizer=False))
            report.append(f"split{i}-anneal")
        arms.append(ArmPlan(label, phases, report))
    arms[0].report = [f"split{i}" for i in range(splits)]
    return _common("three-splits", scale, seed, corpora, arms, ["D0"], splits=splits)


DOMAIN_LAMBDA = 0.5
RESERVOIR_ALPHA = 0.05


def _domain_incremental(scale, seed, alpha=RESERVOIR_ALPHA):
    n = _steps(PRETRAIN_STEPS, scale)
    batch = BATCH_SIZE
    sizes = [s for _, _, s in DOMAINS]
    total = math.fsum(sizes)
    steps = [max(1, round(n * s / total)) for s in sizes]
    names = [d for d, _, _ in DOMAINS]
    corpora = {
        d: CorpusSpec(d, transition_seed=seed, shift=ShiftKind.weak(DOMAIN_LAMBDA, i + 1),
                      train_tokens=max(steps[i] * batch * 2, 100_000), val_tokens=EVAL_WINDOWS + 9)
        for i, d in enumerate(names)}
    props = reservoir_proportions([float(k) for k in steps], alpha)
    arms = []
    for label, a in (("reservoir", alpha), ("no-replay", 0.0)):
        phases = []
        for i, d in enumerate(names):
            replay = {names[j]: props[i - 1][j] for j in range(i)} if i else None
            phases.append(PhasePlan(d, _mix(d, batch, replay, a if i else 0.0),
                                    _cosine(ETA_MAX, steps[i]), steps[i],
                                    parent="fresh" if i == 0 else None))
        arms.append(ArmPlan(label, phases))
    weights = [w / 100.0 for _, w, _ in DOMAINS]
    weights[-1] = 1.0 - math.fsum(weights[:-1])
    arms.append(ArmPlan("union", [PhasePlan("union", DomainMixture(tuple(names), tuple(weights)),
                                            _cosine(ETA_MAX, n), n, parent="fresh")]))
    return _common("domain-incremental", scale, seed, corpora, arms, names, alpha=alpha)


_BUILDERS = {
    "warmup-sweep": _warmup_sweep,
    "rewarm-sweep": _rewarm_sweep,
    "replay-sweep": _replay_sweep,
    "continual-vs-union": _continual_vs_union,
    "same-data-rewarm": _same_data_rewarm,
    "infinite-vs-cosine": _infinite_vs_cosine,
    "three-splits": _three_splits,
    "domain-incremental": _domain_incremental,
}


def root_seed(default: int = 0) -> int:
    """``CTP_SEED`` from the environment, else ``default``."""
    raw = os.environ.get("CTP_SEED")
    return default if raw in (None, "") else int(raw)


# --------------------------------------------------------------------------- #
# Trend checks
# --------------------------------------------------------------------------- #

def rel_diff(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


def peak_in_window(record: RunRecord, dataset: str, until: int) -> float:
    vals = [r.losses[record.datasets.index(dataset)] for r in record.rows if r.step <= until]
    if not vals:
        raise ValueError(f"no rows at or before step {until}")
    return max(vals)


def peak_excess(record: RunRecord, baseline: RunRecord, dataset: str, until: int) -> float:
    """Largest ``record - baseline`` loss gap over steps both logged up to ``until``."""
    j, k = record.datasets.index(dataset), baseline.datasets.index(dataset)
    base = {r.step: r.losses[k] for r in baseline.rows if r.step <= until}
    gaps = [r.losses[j] - base[r.step] for r in record.rows if r.step in base]
    if not gaps:
        raise ValueError("records share no logged steps in the window")
    return max(gaps)


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _check_warmup(spec, rep):
    out = []
    tag = spec.options["shift"]
    arms = [a.name for a in spec.arms]
    for d in rep.datasets:
        finals = [rep.final(a)[d] for a in arms]
        span = (max(finals) - min(finals)) / min(finals)
        out.append(Check(f"{d} final-loss span < 1%", span < 0.01, f"span {span:.4%}"))
    steps = spec.arms[0].phases[-1].steps
    until = max(1, steps // 50)
    # the transient is a forgetting spike; new-data loss only falls from its shared start
    p0 = peak_in_window(rep.record(f"{tag}-warmup-0"), "D0", until)
    p2 = peak_in_window(rep.record(f"{tag}-warmup-2"), "D0", until)
    out.append(Check("0% warmup D0 peak > 2% warmup peak in first 2%", p0 > p2,
                     f"{_fmt(p0)} vs {_fmt(p2)}"))
    return out


def _check_rewarm(spec, rep):
    out = []
    for tag, d1, _ in _shifts(spec.options["shift"]):
        const = rep.final(f"{tag}-const-eta-min")[d1]
        rewarm = {m: rep.final(f"{tag}-rewarm-{m}x")[d1] for m in ("0.5", "1", "2")}
        out.append(Check(f"{tag}: constant eta_min adapts worst on {d1}",
                         all(const > v for v in rewarm.values()),
                         f"const {_fmt(const)} vs " + ", ".join(f"{m}x {_fmt(v)}" for m, v in rewarm.items())))
    return out


def _check_replay(spec, rep):
    out = []
    for tag, d1, _ in _shifts(spec.options["shift"]):
        d0 = [rep.final(f"{tag}-replay-{100 * x:g}")["D0"] for x in REPLAY_FRACTIONS]
        mono = all(b <= a for a, b in zip(d0, d0[1:]))
        out.append(Check(f"{tag}: D0 final loss non-increasing in replay", mono,
                         " ".join(_fmt(v) for v in d0)))
        a0 = rep.final(f"{tag}-replay-0")[d1]
        a5 = rep.final(f"{tag}-replay-5")[d1]
        out.append(Check(f"{tag}: {d1} at 5% replay within 0.05 of no replay", abs(a5 - a0) <= 0.05,
                         f"{_fmt(a5)} vs {_fmt(a0)}"))
    return out


def _pair_avg(rep, arm, d1):
    f = rep.final(arm)
    return (f["D0"] + f[d1]) / 2


def _check_union(spec, rep):
    out = []
    for tag, d1, _ in _shifts(spec.options["shift"]):
        x = UNION_MATCH_REPLAY[tag]
        cont = _pair_avg(rep, f"{tag}-replay-{100 * x:g}", d1)
        union = _pair_avg(rep, f"{tag}-union", d1)
        out.append(Check(f"{tag}: continual AVG within 5% of union", rel_diff(cont, union) <= 0.05,
                         f"{_fmt(cont)} vs {_fmt(union)} ({rel_diff(cont, union):.2%})"))
        const = rep.final(f"{tag}-const-eta-min")[d1]
        best = rep.final(f"{tag}-replay-0")[d1]
        out.append(Check(f"{tag}: constant eta_min adapts worse than re-warming", const > best,
                         f"{_fmt(const)} vs {_fmt(best)}"))
    return out


def _check_same_data(spec, rep):
    until = rewarm_window(spec)
    base = rep.record("const-eta-min")
    ex = {p: peak_excess(rep.record(f"rewarm-{p:g}"), base, "D0", until) for p in REWARM_PEAKS}
    main = ex[ETA_MAX]
    return [
        Check("re-warmed arm peak excess >= 0.02 nats", main >= 0.02, f"{main:.4f}"),
        Check("peak excess ordered by eta_max", ex[6e-4] >= ex[3e-4] >= ex[1.5e-4],
              ", ".join(f"{p:g}: {v:.4f}" for p, v in ex.items())),
    ]


def _check_infinite(spec, rep):
    cos = rep.final("cosine")["D0"]
    out = []
    for arm in ("cosine-inf", "invsqrt-inf"):
        v = rep.final(arm)["D0"]
        out.append(Check(f"{arm} within 2% of cosine", rel_diff(v, cos) <= 0.02,
                         f"{_fmt(v)} vs {_fmt(cos)} ({rel_diff(v, cos):.2%})"))
    return out


def _check_splits(spec, rep):
    out = []
    for i in range(spec.options.get("splits", 3)):
        cos = rep.summaries["repeated-cosine"][f"split{i}"]["D0"]
        for arm in ("cosine-inf", "invsqrt-inf"):
            v = rep.summaries[arm][f"split{i}-anneal"]["D0"]
            out.append(Check(f"split {i}: {arm} post-anneal within 2% of repeated cosine",
                             rel_diff(v, cos) <= 0.02, f"{_fmt(v)} vs {_fmt(cos)}"))
    return out


def _check_domains(spec, rep):
    a, b = rep.avg("reservoir"), rep.avg("no-replay")
    return [Check("reservoir replay lowers AVG loss", a <= b, f"{_fmt(a)} vs {_fmt(b)}")]


CHECKS = {
    "warmup-sweep": _check_warmup,
    "rewarm-sweep": _check_rewarm,
    "replay-sweep": _check_replay,
    "continual-vs-union": _check_union,
    "same-data-rewarm": _check_same_data,
    "infinite-vs-cosine": _check_infinite,
    "three-splits": _check_splits,
    "domain-incremental": _check_domains,
}
