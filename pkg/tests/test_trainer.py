import math
import warnings

import numpy as np
import pytest

from ctpkit.checkpoint import Checkpoint, CheckpointFormatError
from ctpkit.data import CorpusSpec, DomainMixture, ShiftKind, gen_corpus
from ctpkit.mixer import MixPlan, SourceExhaustedError
from ctpkit.model import ModelConfig, init_state
from ctpkit.optim import OptimConfig
from ctpkit.schedule import Phase, ScheduleKind, ScheduleSpec, lr_at
from ctpkit.trainer import (ConfigMismatchError, DivergenceError, InsufficientHistoryError,
                            LogRow, PhaseSpec, PostAnnealResumeError, RunRecord, continue_from,
                            eval_steps, eval_windows, final_loss_summary, run_phase)

MODEL = ModelConfig(vocab_size=16, context_length=4, embed_dim=4, hidden_dim=8)


@pytest.fixture(scope="module")
def streams():
    d0, v0 = gen_corpus(CorpusSpec("d0", 16, 0, ShiftKind.base(), 60_000, 600))
    d1, v1 = gen_corpus(CorpusSpec("d1", 16, 0, ShiftKind.strong(), 60_000, 600))
    return {"d0": d0, "d1": d1}, {"d0": eval_windows(v0, 4), "d1": eval_windows(v1, 4)}


def phase(sources, steps=40, schedule=None, x=0.0, **kw):
    schedule = schedule or ScheduleSpec.cosine(1e-2, 1e-3, steps)
    replay = [("d0", 1.0)] if x else []
    data = MixPlan("d1" if x else "d0", replay, x, 8)
    return PhaseSpec(data, schedule, steps, sources, model=MODEL, **kw)


def test_zero_lr_leaves_parameters(streams):
    src, ev = streams
    spec = ScheduleSpec.cosine(1e-3, 0.0, 10, warmup_steps=5)
    ckpt, rec = run_phase(phase(src, 1, spec), ev, eval_every=1, window=1, stride=1)
    assert rec.rows[0].lr == 0.0
    assert len(rec.rows) == 1
    # weight decay is scaled by lr too, so nothing moves
    assert ckpt.model.bit_equal(init_state(MODEL))


def test_run_is_deterministic(streams):
    src, ev = streams
    a = run_phase(phase(src), ev, eval_every=10)
    b = run_phase(phase(src), ev, eval_every=10)
    assert a[1].to_csv() == b[1].to_csv()
    assert a[0].to_bytes() == b[0].to_bytes()


def test_schedule_drives_lr(streams):
    src, ev = streams
    spec = ScheduleSpec.cosine(1e-2, 1e-3, 40, warmup_steps=4)
    _, rec = run_phase(phase(src, 40, spec), ev, eval_every=1, window=1, stride=1)
    assert [r.lr for r in rec.rows] == [lr_at(spec, k - 1) for k in range(1, 41)]


def test_token_accounting_ignores_replay(streams):
    src, ev = streams
    base = phase(src, 30)
    a, _ = run_phase(base, {}, eval_every=10)
    b, _ = run_phase(phase(src, 30, x=0.25), {}, eval_every=10)
    assert a.tokens == b.tokens == 30 * 8 * 5 == base.tokens


def test_eval_isolation(streams):
    src, ev = streams
    quiet, _ = run_phase(phase(src), {}, eval_every=0)
    noisy, _ = run_phase(phase(src), ev, eval_every=1, window=1, stride=1)
    assert quiet.to_bytes() == noisy.to_bytes()


def test_checkpoint_round_trip_then_step(streams, tmp_path):
    src, ev = streams
    ckpt, _ = run_phase(phase(src, 20), ev)
    path = tmp_path / "a.ckpt"
    ckpt.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.to_bytes() == ckpt.to_bytes()
    assert path.read_bytes()[:8] == b"CTPCKPT1"
    nxt = phase(src, 5, ScheduleSpec.constant(1e-3), reset_optimizer=False)
    x, _ = run_phase(continue_from(ckpt, nxt), {})
    y, _ = run_phase(continue_from(loaded, nxt), {})
    assert x.to_bytes() == y.to_bytes()


def test_resume_continues_data(streams):
    # two 10-step phases read the same windows as one 20-step phase
    src, _ = streams
    spec = ScheduleSpec.constant(1e-3)
    whole, _ = run_phase(phase(src, 20, spec), {})
    half, _ = run_phase(phase(src, 10, spec), {})
    rest, _ = run_phase(continue_from(half, phase(src, 10, spec, reset_optimizer=False)), {})
    assert rest.cursors == whole.cursors
    assert rest.model.bit_equal(whole.model)
    assert rest.global_step == 20


def test_checkpoint_format_errors(streams):
    src, _ = streams
    ckpt, _ = run_phase(phase(src, 3), {})
    blob = ckpt.to_bytes()
    for bad in (b"XXXXXXXX" + blob[8:], blob[:-3], blob + b"\0"):
        with pytest.raises(CheckpointFormatError):
            Checkpoint.from_bytes(bad)


def infinite(steps=100, constant=25):
    return ScheduleSpec(ScheduleKind.INFINITE_COSINE, 3e-3, 3e-4, 1.65e-3, 1, 60, constant,
                        steps - 61 - constant)


def test_constant_phase_checkpoint_resumes_at_eta_const(streams):
    src, ev = streams
    sched = infinite()
    ckpt, _ = run_phase(phase(src, sched.t_ann, sched), {})
    assert ckpt.phase_tag == Phase.CONSTANT.value
    nxt = continue_from(ckpt, phase(src, 10, infinite()))
    _, rec = run_phase(nxt, ev, eval_every=1, window=1, stride=1)
    assert rec.rows[0].lr == 1.65e-3


def test_cosine_checkpoint_rewarms(streams):
    src, ev = streams
    ckpt, _ = run_phase(phase(src, 20), {})
    nxt = continue_from(ckpt, phase(src, 20, ScheduleSpec.cosine(1e-2, 1e-3, 20, warmup_steps=4)))
    assert nxt.schedule_offset == 0
    _, rec = run_phase(nxt, ev, eval_every=1, window=1, stride=1)
    assert rec.rows[0].lr == 0.0 and rec.rows[4].lr == 1e-2


def test_post_anneal_guard(streams):
    src, _ = streams
    sched = infinite()
    ckpt, _ = run_phase(phase(src, sched.t_end, sched), {})
    assert ckpt.phase_tag == Phase.ANNEALING.value
    with pytest.warns(UserWarning), pytest.raises(PostAnnealResumeError):
        continue_from(ckpt, phase(src, 5))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        bound = continue_from(ckpt, phase(src, 5, allow_post_anneal=True))
    assert bound.resume_from is ckpt


def test_config_mismatch(streams):
    src, _ = streams
    ckpt, _ = run_phase(phase(src, 3), {})
    other = ModelConfig(16, 4, 4, 9)
    with pytest.raises(ConfigMismatchError):
        continue_from(ckpt, PhaseSpec(MixPlan("d0", [], 0, 8), ScheduleSpec.constant(1e-3), 3, src,
                                      model=other))


def test_new_source_exhaustion(streams):
    src, _ = streams
    with pytest.raises(SourceExhaustedError):
        run_phase(phase(src, 10_000), {})


def test_divergence_detected(streams):
    src, ev = streams
    wild = phase(src, 400, ScheduleSpec.constant(50.0), optim=OptimConfig(weight_decay=0.0))
    with pytest.raises(DivergenceError):
        run_phase(wild, ev, eval_every=1, window=1, stride=1)


def test_domain_mixture_phase(streams):
    src, ev = streams
    spec = PhaseSpec(DomainMixture(("d0", "d1"), (0.5, 0.5)), ScheduleSpec.constant(1e-3), 20, src,
                     model=MODEL, batch_size=8, seed=3)
    ckpt, _ = run_phase(spec, {})
    used = sum(ckpt.cursors[f"new:{d}"][0] for d in ("d0", "d1"))
    assert used == 20 * 8
    with pytest.raises(ValueError):
        PhaseSpec(DomainMixture(("d0",), (1.0,)), ScheduleSpec.constant(1e-3), 3, src, model=MODEL)


def test_base_training_lowers_loss():
    train, val = gen_corpus(CorpusSpec("b", 64, 0, ShiftKind.base(), 5000 * 32 * 9 + 100, 4000))
    ev = {"b": eval_windows(val, 8)}
    sched = ScheduleSpec.cosine(3e-3, 3e-4, 5000)
    _, rec = run_phase(PhaseSpec(MixPlan("b", [], 0, 32), sched, 5000, {"b": train}), ev, 1000)
    assert rec.losses("b")[-1] <= math.log(64) - 0.5


# ---- records ----------------------------------------------------------------

def series(values, start=10, every=10):
    rows = [LogRow(start + every * i, 1e-3, 0, (v, 2 * v)) for i, v in enumerate(values)]
    return RunRecord(["a", "b"], rows)


def test_summary_constant_and_linear():
    assert final_loss_summary(series([3.0] * 20)) == {"a": 3.0, "b": 6.0}
    rec = series([float(i) for i in range(20)])
    assert final_loss_summary(rec)["a"] == pytest.approx(np.mean(range(10, 20)))


def test_summary_needs_history():
    with pytest.raises(InsufficientHistoryError):
        final_loss_summary(series([1.0] * 5))
    with pytest.raises(InsufficientHistoryError):
        final_loss_summary(series([1.0] * 20, every=20))


def test_summary_matches_csv_recomputation(streams):
    import csv
    import io
    src, ev = streams
    _, rec = run_phase(phase(src, 200), ev, eval_every=25)
    text = rec.to_csv()
    assert text.splitlines()[0] == "step,lr,tokens,d0_val_loss,d1_val_loss"
    rows = list(csv.DictReader(io.StringIO(text)))
    picked = [r for r in rows if int(r["step"]) in range(110, 201, 10)]
    assert len(picked) == 10
    by_hand = sum(float(r["d0_val_loss"]) for r in picked) / 10
    assert final_loss_summary(rec)["d0"] == pytest.approx(by_hand, rel=1e-14)
    again = RunRecord.from_csv(text)
    assert again.to_csv() == text


def test_eval_steps():
    assert eval_steps(100, 50, window=20, stride=10) == [50, 90, 100]
    assert eval_steps(30, 0, window=0, dense_until=20, dense_every=10)[:2] == [10, 20]
