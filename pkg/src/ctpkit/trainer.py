"""The training loop, run records, and phase-to-phase transitions."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .checkpoint import Checkpoint
from .data import DomainMixture, TokenStream, windows
from .mixer import (MixPlan, MixReader, MixtureReader, SequentialReader, SourceExhaustedError,
                    exact_fraction)
from .model import ModelConfig, NumericalError, eval_loss, init_state, loss_and_grad
from .optim import OptimConfig, OptimState, adamw_step, clip_gradient
from .rng import Xoshiro256
from .schedule import Phase, ScheduleSpec, lr_at, phase_of

# PRNG stream for in-loop draws (domain sampling); disjoint from data streams
STREAM_TRAINER = 0x7472

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class ConfigMismatchError(ValueError):
    pass


class PostAnnealResumeError(ValueError):
    pass


class InsufficientHistoryError(ValueError):
    pass


@dataclass
class PhaseSpec:
    """One training phase.

    ``sources`` maps the stream names used by ``data`` to training streams.
    ``schedule_offset`` is the schedule step of the first update; it is set by
    :func:`continue_from` and is normally left at 0.
    """

    data: MixPlan | DomainMixture
    schedule: ScheduleSpec
    steps: int
    sources: Mapping[str, TokenStream] = field(default_factory=dict)
    reset_optimizer: bool = True
    resume_from: Checkpoint | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int | None = None
    schedule_offset: int = 0
    seed: int = 0
    wrap_sources: bool = False
    allow_post_anneal: bool = False
    name: str = ""

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("a phase needs at least one step")
        if isinstance(self.data, MixPlan):
            if self.batch_size is None:
                self.batch_size = self.data.batch_size
            elif self.batch_size != self.data.batch_size:
                raise ValueError("batch_size disagrees with the mix plan")
        elif self.batch_size is None:
            raise ValueError("a domain mixture phase needs batch_size")
        if self.resume_from is not None and self.resume_from.model_config != self.model:
            raise ConfigMismatchError("checkpoint model config differs from the phase's")

    @property
    def tokens(self) -> int:
        return self.steps * self.batch_size * (self.model.context_length + 1)


@dataclass(frozen=True)
class LogRow:
    step: int
    lr: float
    tokens: int
    losses: tuple


@dataclass
class RunRecord:
    datasets: list
    rows: list = field(default_factory=list)
    name: str = ""

    def losses(self, dataset: str) -> np.ndarray:
        j = self.datasets.index(dataset)
        return np.array([r.losses[j] for r in self.rows])

    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.rows], dtype=np.int64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "lr", "tokens"] + [f"{d}_val_loss" for d in self.datasets])
        for r in self.rows:
            w.writerow([r.step, repr(r.lr), r.tokens] + [repr(x) for x in r.losses])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, name: str = "") -> "RunRecord":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header[:3] != ["step", "lr", "tokens"] or not all(h.endswith("_val_loss") for h in header[3:]):
            raise ValueError("not a run record CSV")
        datasets = [h[:-len("_val_loss")] for h in header[3:]]
        rows = [LogRow(int(r[0]), float(r[1]), int(r[2]), tuple(float(x) for x in r[3:]))
                for r in reader if r]
        return cls(datasets, rows, name)


def final_loss_summary(record: RunRecord, window: int = 100, stride: int = 10) -> dict:
    """Mean val loss per dataset over the last ``window`` steps, sampled every ``stride``."""
    if not record.rows:
        raise InsufficientHistoryError("empty run record")
    last = record.rows[-1].step
    if last < window:
        raise InsufficientHistoryError(f"record ends at step {last}, shorter than window {window}")
    by_step = {r.step: r for r in record.rows}
    wanted = range(last - window + stride, last + 1, stride)
    missing = [s for s in wanted if s not in by_step]
    if missing:
        raise InsufficientHistoryError(f"no eval rows at steps {missing[:5]}")
    return {d: math.fsum(by_step[s].losses[j] for s in wanted) / len(wanted)
            for j, d in enumerate(record.datasets)}


def eval_windows(stream: TokenStream, context_length: int, limit: int | None = None):
    """``(contexts, targets)`` for every stride-1 window of a validation stream."""
    return windows(stream, context_length, 0, limit)


def eval_steps(steps: int, eval_every: int, window: int = 100, stride: int = 10,
               dense_until: int = 0, dense_every: int = 10) -> list[int]:
    """Logged steps: every ``eval_every``, the final-summary window, and a dense early stretch."""
    out = set(range(eval_every, steps + 1, eval_every)) if eval_every > 0 else set()
    out.add(steps)
    out.update(s for s in range(steps - window + stride, steps + 1, stride) if s > 0)
    if dense_until:
        out.update(range(dense_every, min(dense_until, steps) + 1, dense_every))
    return sorted(out)


def _checkpoint_phase(spec: ScheduleSpec, t: int) -> Phase:
    # t is the schedule step of the last update; the update at t_ann itself still used eta_const
    phase = phase_of(spec, t)
    if phase is Phase.ANNEALING and t == spec.t_ann:
        return Phase.CONSTANT
    return phase


def _build_reader(phase: PhaseSpec, cursors: dict, rng: Xoshiro256):
    L = phase.model.context_length

    def reader(role: str, name: str, wrap: bool) -> SequentialReader:
        if name not in phase.sources:
            raise KeyError(f"no stream bound for source {name!r}")
        pos, wraps = cursors.get(f"{role}:{name}", (0, 0))
        return SequentialReader(phase.sources[name], L, name, pos, wrap, wraps)

    if isinstance(phase.data, MixPlan):
        plan = phase.data
        new = reader("new", plan.new_source, phase.wrap_sources)
        if not phase.wrap_sources:
            replayed = math.floor(exact_fraction(plan.replay_fraction) * plan.batch_size * phase.steps)
            need = plan.batch_size * phase.steps - replayed
            left = new.num_windows - new.pos
            if need > left:
                raise SourceExhaustedError(plan.new_source, need, left)
        # old data is revisited cyclically once a replay buffer is used up
        replay = [reader("replay", n, True) for n, _ in plan.replay_sources]
        return MixReader(plan, new, replay)
    names = [getattr(d, "name", d) for d in phase.data.domains]
    readers = [reader("new", n, phase.wrap_sources) for n in names]
    return MixtureReader(phase.data, readers, phase.batch_size, rng)


def run_phase(phase: PhaseSpec, eval_sets: Mapping[str, tuple] | None = None, eval_every: int = 50,
              *, window: int = 100, stride: int = 10, dense_until: int = 0,
              dense_every: int = 10, progress=None) -> tuple[Checkpoint, RunRecord]:
    """Train for ``phase.steps`` updates and return the end-of-phase checkpoint and log.

    Update ``k`` (1-based) uses ``lr_at(schedule, schedule_offset + k - 1)``.
    Evaluation reads parameters only, so logging never perturbs training.
    """
    eval_sets = dict(eval_sets or {})
    ckpt = phase.resume_from
    if ckpt is not None:
        if ckpt.model_config != phase.model:
            raise ConfigMismatchError("checkpoint model config differs from the phase's")
        params = ckpt.model.copy()
        if phase.reset_optimizer or ckpt.optim is None:
            opt = OptimState.fresh(params)
        else:
            opt = ckpt.optim.copy()
        rng = Xoshiro256.from_state(ckpt.rng_state)
        cursors = dict(ckpt.cursors)
        global_step, tokens_before = ckpt.global_step, ckpt.tokens
    else:
        params = init_state(phase.model)
        opt = OptimState.fresh(params)
        rng = Xoshiro256(phase.seed, STREAM_TRAINER)
        cursors = {}
        global_step, tokens_before = 0, 0

    end = phase.schedule.t_end
    if end is not None and phase.schedule_offset + phase.steps - 1 > end:
        raise ValueError(f"{phase.steps} steps from offset {phase.schedule_offset} overrun the schedule")

    reader = _build_reader(phase, cursors, rng)
    logged = set(eval_steps(phase.steps, eval_every, window, stride, dense_until, dense_every))
    record = RunRecord(list(eval_sets), name=phase.name)
    per_step_tokens = phase.batch_size * (phase.model.context_length + 1)
    threshold = DIVERGENCE_FACTOR * math.log(phase.model.vocab_size)
    over = 0

    for k in range(1, phase.steps + 1):
        ctx, tgt, _ = reader.next_batch()
        lr = lr_at(phase.schedule, phase.schedule_offset + k - 1)
        try:
            loss, grad = loss_and_grad(params, ctx, tgt)
            grad = clip_gradient(grad, phase.optim.clip_norm)
            params, opt = adamw_step(opt, params, grad, lr, phase.optim)
        except NumericalError as exc:
            raise DivergenceError(f"{phase.name or 'phase'}: numerical failure at step {k}: {exc}", k) from exc
        if k in logged:
            losses = tuple(eval_loss(params, c, t) for c, t in eval_sets.values())
            record.rows.append(LogRow(k, lr, k * per_step_tokens, losses))
            watched = max(losses) if losses else loss
            over = over + 1 if watched > threshold else 0
            if over >= DIVERGENCE_PATIENCE:
                raise DivergenceError(
                    f"{phase.name or 'phase'}: loss above {threshold:.3f} for {over} consecutive logs "
                    f"(step {k}, lr {lr:.3g}, loss {watched:.3f})", k)
            if progress is not None:
                progress(k, lr, losses)

    cursors.update(reader.cursors())
    last = phase.schedule_offset + phase.steps - 1
    out = Checkpoint(
        model_config=phase.model,
        model=params,
        optim_config=phase.optim,
        optim=opt,
        rng_state=rng.state(),
        global_step=global_step + phase.steps,
        tokens=tokens_before + phase.tokens,
        schedule=phase.schedule,
        schedule_step=last + 1,
        phase_tag=_checkpoint_phase(phase.schedule, last).value,
        cursors=cursors,
    )
    return out, record


def continue_from(ckpt: Checkpoint, next_phase: PhaseSpec) -> PhaseSpec:
    """Bind ``next_phase`` to ``ckpt`` and pick where its schedule starts.

    A checkpoint taken in an infinite schedule's constant phase continues at
    ``eta_const`` when the next schedule is infinite with the same
    ``eta_const``.  Anything else restarts the schedule at step 0.  Resuming
    from an annealed checkpoint needs ``allow_post_anneal``.
    """
    if ckpt.model_config != next_phase.model:
        raise ConfigMismatchError(
            f"checkpoint model {ckpt.model_config} does not match phase model {next_phase.model}")
    if ckpt.phase_tag == Phase.ANNEALING.value and not next_phase.allow_post_anneal:
        msg = ("checkpoint was taken after annealing began; resume from the pre-annealing "
               "checkpoint or set allow_post_anneal")
        warnings.warn(msg, stacklevel=2)
        raise PostAnnealResumeError(msg)
    prev, new = ckpt.schedule, next_phase.schedule
    offset = 0
    if (prev is not None and prev.kind.infinite and new.kind.infinite
            and ckpt.phase_tag == Phase.CONSTANT.value and prev.eta_const == new.eta_const):
        offset = new.t_const
    return replace(next_phase, resume_from=ckpt, schedule_offset=offset)
