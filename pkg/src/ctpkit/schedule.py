"""Learning-rate schedules: linear warmup + cosine decay, and infinite schedules.

Infinite schedules run four phases: linear warmup to ``eta_max``, a one-time
cooldown to ``eta_const`` (cosine or inverse square root), a constant phase
that may be open-ended, and an exponential anneal down to ``eta_min``.

Step ``t`` belongs to the phases' closed-right intervals when evaluating the
learning rate (warmup is ``[0, t_cd]``, cooldown ``(t_cd, t_const]`` and so
on); every formula meets its neighbour at the boundary, so the convention
only matters for :func:`phase_of`, which assigns a boundary to the later
phase.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable


class ScheduleKind(str, enum.Enum):
    COSINE = "cosine"
    INFINITE_COSINE = "infinite_cosine"
    INFINITE_INVSQRT = "infinite_invsqrt"
    CONSTANT = "constant"

    @property
    def infinite(self) -> bool:
        return self in (ScheduleKind.INFINITE_COSINE, ScheduleKind.INFINITE_INVSQRT)


class Phase(str, enum.Enum):
    WARMUP = "warmup"
    COOLDOWN = "cooldown"
    CONSTANT = "constant"
    ANNEALING = "annealing"
    DECAY = "decay"


class ScheduleRangeError(ValueError):
    pass


class UnsupportedScheduleOperation(ValueError):
    pass


def steps_from_percent(percent: float, total_steps: int) -> int:
    """``percent`` of ``total_steps``, rounded half up."""
    exact = Fraction(str(percent)) * total_steps / 100
    return math.floor(exact + Fraction(1, 2))


@dataclass(frozen=True)
class ScheduleSpec:
    kind: ScheduleKind
    eta_max: float
    eta_min: float = 0.0
    eta_const: float | None = None
    warmup_steps: int = 0
    cooldown_steps: int = 0
    # None means the constant phase never ends (infinite kinds and CONSTANT)
    constant_steps: int | None = 0
    anneal_steps: int = 0
    invsqrt_steepness: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not self.eta_max > 0:
            raise ValueError("eta_max must be positive")
        if not 0 <= self.eta_min <= self.eta_max:
            raise ValueError("need 0 <= eta_min <= eta_max")
        spans = [self.warmup_steps, self.cooldown_steps, self.anneal_steps]
        if self.constant_steps is not None:
            spans.append(self.constant_steps)
        if any(int(s) != s or s < 0 for s in spans):
            raise ValueError("phase spans must be non-negative integers")
        if self.kind.infinite:
            if self.eta_const is None:
                raise ValueError("infinite schedules need eta_const")
            if not (self.eta_min <= self.eta_const <= self.eta_max and self.eta_const > 0):
                raise ValueError("need eta_min <= eta_const <= eta_max and eta_const > 0")
            if self.kind is ScheduleKind.INFINITE_INVSQRT and not self.invsqrt_steepness > 0:
                raise ValueError("invsqrt_steepness must be positive")
        elif self.kind is ScheduleKind.COSINE:
            if self.constant_steps is None or self.anneal_steps < 1:
                raise ValueError("cosine decay needs a finite decay span of at least one step")
        total = self.total_steps
        if total is not None and total <= 0:
            raise ValueError("schedule must span at least one step")

    # ---- constructors ----------------------------------------------------

    @classmethod
    def cosine(cls, eta_max: float, eta_min: float, total_steps: int,
               warmup_pct: float = 1.0, warmup_steps: int | None = None) -> "ScheduleSpec":
        """Linear warmup then cosine decay fitted to ``total_steps``."""
        if warmup_steps is None:
            warmup_steps = steps_from_percent(warmup_pct, total_steps)
        return cls(ScheduleKind.COSINE, eta_max, eta_min, warmup_steps=warmup_steps,
                   anneal_steps=total_steps - warmup_steps)

    @classmethod
    def constant(cls, eta: float, warmup_steps: int = 0,
                 steps: int | None = None) -> "ScheduleSpec":
        """Optional warmup then ``eta`` forever (or for ``steps`` total steps)."""
        rest = None if steps is None else steps - warmup_steps
        return cls(ScheduleKind.CONSTANT, eta, 0.0, warmup_steps=warmup_steps, constant_steps=rest)

    @classmethod
    def infinite(cls, kind, eta_max: float, eta_min: float, eta_const: float,
                 total_steps: int, warmup_pct: float = 1.0, cooldown_pct: float = 60.0,
                 constant_pct: float = 25.0, invsqrt_steepness: float = 10.0) -> "ScheduleSpec":
        """Four-phase schedule with spans as percentages; annealing takes the rest."""
        w = steps_from_percent(warmup_pct, total_steps)
        cd = steps_from_percent(cooldown_pct, total_steps)
        c = steps_from_percent(constant_pct, total_steps)
        return cls(ScheduleKind(kind), eta_max, eta_min, eta_const, w, cd, c,
                   total_steps - w - cd - c, invsqrt_steepness)

    # ---- boundaries ------------------------------------------------------

    @property
    def t_cd(self) -> int:
        return self.warmup_steps

    @property
    def t_const(self) -> int:
        return self.warmup_steps + self.cooldown_steps

    @property
    def t_ann(self) -> int | None:
        if self.kind is ScheduleKind.COSINE:
            return self.warmup_steps
        if self.constant_steps is None:
            return None
        return self.t_const + self.constant_steps

    @property
    def t_end(self) -> int | None:
        if self.kind is ScheduleKind.CONSTANT:
            if self.constant_steps is None:
                return None
            return self.warmup_steps + self.constant_steps
        t_ann = self.t_ann
        return None if t_ann is None else t_ann + self.anneal_steps

    @property
    def total_steps(self) -> int | None:
        return self.t_end

    def phases(self) -> list[tuple[Phase, int, float]]:
        """``(phase, start, end)`` triples; ``end`` may be ``inf``."""
        end = math.inf if self.t_end is None else self.t_end
        w = self.warmup_steps
        if self.kind is ScheduleKind.COSINE:
            return [(Phase.WARMUP, 0, w), (Phase.DECAY, w, end)]
        if self.kind is ScheduleKind.CONSTANT:
            return [(Phase.WARMUP, 0, w), (Phase.CONSTANT, w, end)]
        t_ann = math.inf if self.t_ann is None else self.t_ann
        return [(Phase.WARMUP, 0, w), (Phase.COOLDOWN, w, self.t_const),
                (Phase.CONSTANT, self.t_const, t_ann), (Phase.ANNEALING, t_ann, end)]

    # ---- (de)serialization -------------------------------------------------

    def to_json(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ScheduleSpec":
        """Build from a config mapping.

        Spans are given either as ``<span>_steps`` or ``<span>_pct`` (percent of
        ``total_steps``).  When ``total_steps`` is given, the final span
        (decay/anneal) defaults to whatever is left.
        """
        d = dict(d)
        kind = ScheduleKind(d.pop("kind"))
        total = d.pop("total_steps", None)
        spans = {}
        for name in ("warmup", "cooldown", "constant", "anneal"):
            pct = d.pop(f"{name}_pct", None)
            if pct is not None:
                if total is None:
                    raise ValueError(f"{name}_pct needs total_steps")
                spans[f"{name}_steps"] = steps_from_percent(pct, total)
            if f"{name}_steps" in d:
                spans[f"{name}_steps"] = d.pop(f"{name}_steps")
        if total is not None:
            used = sum(v for k, v in spans.items() if v is not None)
            if kind is ScheduleKind.CONSTANT:
                spans.setdefault("constant_steps", total - used)
            else:
                spans.setdefault("anneal_steps", total - used)
        return cls(kind=kind, **d, **spans)


# --------------------------------------------------------------------------- #
# Phase formulas
# --------------------------------------------------------------------------- #

def _h(x: float, alpha: float) -> float:
    return 1.0 / math.sqrt(1.0 + alpha * x) - 1.0


def phase_formula(spec: ScheduleSpec, phase: Phase, t: float) -> float:
    """Evaluate one phase's closed form at ``t`` with no range checks.

    Used by :func:`lr_at` and to check that adjacent phases meet.
    """
    if phase is Phase.WARMUP:
        if spec.warmup_steps == 0:
            return spec.eta_max
        return spec.eta_max * (t / spec.warmup_steps)
    if phase is Phase.DECAY:
        frac = (t - spec.warmup_steps) / spec.anneal_steps
        return spec.eta_min + (spec.eta_max - spec.eta_min) / 2 * (math.cos(math.pi * frac) + 1)
    if phase is Phase.CONSTANT:
        return spec.eta_max if spec.kind is ScheduleKind.CONSTANT else spec.eta_const
    if phase is Phase.COOLDOWN:
        if spec.cooldown_steps == 0:
            return spec.eta_const
        x = (t - spec.t_cd) / spec.cooldown_steps
        if spec.kind is ScheduleKind.INFINITE_COSINE:
            return spec.eta_const + (spec.eta_max - spec.eta_const) / 2 * (1 + math.cos(math.pi * x))
        a = spec.invsqrt_steepness
        # written around eta_const so the far end lands on it exactly
        return spec.eta_const + (spec.eta_max - spec.eta_const) * (1.0 - _h(x, a) / _h(1.0, a))
    if phase is Phase.ANNEALING:
        if spec.anneal_steps == 0:
            return spec.eta_const
        frac = (t - spec.t_ann) / spec.anneal_steps
        return spec.eta_const * (spec.eta_min / spec.eta_const) ** frac
    raise ValueError(f"unknown phase {phase}")


def _check_step(spec: ScheduleSpec, t) -> int:
    if int(t) != t or t < 0:
        raise ScheduleRangeError(f"step must be a non-negative integer, got {t!r}")
    t = int(t)
    end = spec.t_end
    if end is not None and t > end:
        raise ScheduleRangeError(f"step {t} past end of schedule ({end})")
    return t


def lr_at(spec: ScheduleSpec, t: int) -> float:
    """Learning rate at step ``t``."""
    t = _check_step(spec, t)
    if t <= spec.warmup_steps:
        return phase_formula(spec, Phase.WARMUP, t)
    if spec.kind is ScheduleKind.COSINE:
        return phase_formula(spec, Phase.DECAY, t)
    if spec.kind is ScheduleKind.CONSTANT:
        return phase_formula(spec, Phase.CONSTANT, t)
    if t <= spec.t_const:
        return phase_formula(spec, Phase.COOLDOWN, t)
    t_ann = spec.t_ann
    if t_ann is None or t <= t_ann:
        return phase_formula(spec, Phase.CONSTANT, t)
    return phase_formula(spec, Phase.ANNEALING, t)


def phase_of(spec: ScheduleSpec, t: int) -> Phase:
    """Phase containing ``t``; boundaries go to the later phase, step 0 to warmup."""
    t = _check_step(spec, t)
    phases = spec.phases()
    if t == 0:
        return Phase.WARMUP
    for phase, start, end in phases:
        if start <= t < end:
            return phase
    # t == t_end: the last phase that has any extent
    for phase, start, end in reversed(phases):
        if end > start:
            return phase
    return phases[-1][0]


def resume_point(spec: ScheduleSpec) -> int:
    """The last pre-annealing step of an infinite schedule."""
    if not spec.kind.infinite:
        raise UnsupportedScheduleOperation(f"{spec.kind.value} schedules have no resume point")
    if spec.t_ann is None:
        raise UnsupportedScheduleOperation("open-ended constant phase has no fixed resume point")
    return spec.t_ann


def dump_rows(spec: ScheduleSpec, steps: Iterable[int] | None = None):
    """``(step, lr, phase)`` rows; all steps of a finite schedule by default."""
    if steps is None:
        if spec.t_end is None:
            raise ScheduleRangeError("open-ended schedule needs an explicit step range")
        steps = range(spec.t_end + 1)
    for t in steps:
        yield t, lr_at(spec, t), phase_of(spec, t).value


def dump_csv(spec: ScheduleSpec, steps: Iterable[int] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr", "phase"])
    for t, lr, ph in dump_rows(spec, steps):
        w.writerow([t, repr(lr), ph])
    return buf.getvalue()
