"""Acceptance criteria, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL]`` line and the session summary repeats
them.  Criteria 5-10 run full desk-scale presets and take a while; select
them with ``-m slow`` or skip them with ``-m "not slow"``.  Set
``CTPKIT_ACCEPTANCE_OUT`` to keep the experiment directories.
"""

import math
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from ctpkit.checkpoint import Checkpoint
from ctpkit.data import CorpusSpec, ShiftKind, gen_corpus
from ctpkit.harness import (REPLAY_FRACTIONS, REWARM_PEAKS, UNION_MATCH_REPLAY, peak_excess, preset,
                            rel_diff, rewarm_window, run_experiment)
from ctpkit.mixer import MixPlan, batch_composition, replay_counts, reservoir_proportions, token_budget
from ctpkit.model import ModelConfig, init_state, loss_and_grad
from ctpkit.rng import Xoshiro256
from ctpkit.schedule import ScheduleKind, ScheduleSpec, lr_at

RESULTS = []


def verdict(criterion: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert passed, line


def rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b) if b else abs(a)


@pytest.fixture(scope="session")
def out_root(tmp_path_factory):
    keep = os.environ.get("CTPKIT_ACCEPTANCE_OUT")
    return Path(keep) if keep else tmp_path_factory.mktemp("acceptance")


def run_preset(out_root, name, **options):
    """Run a preset from a cold cache and time it."""
    tag = "-".join([name] + [str(v) for v in options.values()])
    start = time.perf_counter()
    report = run_experiment(preset(name, **options), out_root / tag, out_root / tag / "cache")
    return report, time.perf_counter() - start


# ---- 1 ------------------------------------------------------------------------

def random_schedule(rng: Xoshiro256) -> ScheduleSpec:
    kind = [ScheduleKind.COSINE, ScheduleKind.INFINITE_COSINE, ScheduleKind.INFINITE_INVSQRT][rng.below(3)]
    eta_max = 10 ** (-5 + 3 * rng.random())
    eta_min = eta_max * rng.random() * 0.5
    spans = [1 + rng.below(120) for _ in range(4)]
    if kind is ScheduleKind.COSINE:
        return ScheduleSpec(kind, eta_max, eta_min, warmup_steps=spans[0], anneal_steps=spans[1])
    eta_const = eta_min + (eta_max - eta_min) * (0.05 + 0.9 * rng.random())
    return ScheduleSpec(kind, eta_max, eta_min, eta_const, *spans,
                        invsqrt_steepness=0.5 + 50 * rng.random())


def schedule_violations(s: ScheduleSpec) -> list:
    bad = []
    lrs = [lr_at(s, t) for t in range(s.t_end + 1)]
    if rel(lrs[s.warmup_steps], s.eta_max) >= 1e-12:
        bad.append("lr(T_warmup) != eta_max")
    if rel(lrs[-1], s.eta_min) >= 1e-12 and not (s.eta_min == 0 and lrs[-1] == 0):
        bad.append("lr(t_end) != eta_min")
    if s.kind.infinite:
        if rel(lrs[s.t_cd], s.eta_max) >= 1e-12:
            bad.append("cooldown start != eta_max")
        if rel(lrs[s.t_const], s.eta_const) >= 1e-12:
            bad.append("cooldown end != eta_const")
        if rel(lrs[s.t_ann], s.eta_const) >= 1e-12:
            bad.append("anneal start != eta_const")
    for t in range(1, len(lrs)):
        if t <= s.warmup_steps:
            ok = lrs[t] > lrs[t - 1]
        elif s.kind.infinite and s.t_const < t <= s.t_ann:
            ok = lrs[t] == lrs[t - 1]
        else:
            ok = lrs[t] <= lrs[t - 1]
        if not ok:
            bad.append(f"monotonicity at step {t}")
            break
    return bad


def test_criterion_1_schedule_exactness():
    rng = Xoshiro256(2024, 1)
    start = time.perf_counter()
    failures = []
    for _ in range(1000):
        s = random_schedule(rng)
        failures += [(s, v) for v in schedule_violations(s)]
    elapsed = time.perf_counter() - start
    verdict(1, "schedule boundaries within 1e-12 and per-phase monotonicity, 1000 specs",
            not failures and elapsed < 5, f"{len(failures)} violations, {elapsed:.2f}s")


# ---- 2 ------------------------------------------------------------------------

def test_criterion_2_replay_accounting():
    rng = Xoshiro256(2024, 2)
    start = time.perf_counter()
    n = 100_000
    worst = Fraction(0)
    for _ in range(100):
        # replay fractions with up to six decimals, like the percentages a config holds
        x = rng.below(1_000_001) / 1_000_000
        s = 1 + rng.below(4096)
        plan = MixPlan("d1", [("d0", 1.0)], x, s)
        counts = replay_counts(plan, n)
        # spot-check the vectorized counts against the per-batch definition
        for b in (1, 2, 3, n // 2, n):
            assert counts[b - 1] == batch_composition(plan, b)[0]
        xs = Fraction(str(x)) * s
        cum = np.cumsum(counts)
        steps = np.arange(1, n + 1, dtype=np.int64)
        # |cum - x s n| < 1  <=>  |cum q - p n| < q, exact in integers
        gap = np.abs(cum * xs.denominator - steps * xs.numerator).max()
        worst = max(worst, Fraction(int(gap), xs.denominator))
    budget = token_budget(100e9, 100e9, 0.05)
    elapsed = time.perf_counter() - start
    verdict(2, "cumulative-floor bound over 1e5 batches x 100 plans; 95B + 5B budget",
            worst < 1 and budget == (95e9, 5e9, 200e9) and elapsed < 5,
            f"max drift {float(worst):.6f}, budget {budget}, {elapsed:.2f}s")


# ---- 3 ------------------------------------------------------------------------

def test_criterion_3_reservoir():
    rng = Xoshiro256(2024, 3)
    start = time.perf_counter()
    worst_sum, worst_prop = 0.0, 0.0
    for _ in range(50):
        sizes = [1 + rng.below(10**6) for _ in range(2 + rng.below(7))]
        alpha = rng.random()
        for row in reservoir_proportions(sizes, alpha):
            worst_sum = max(worst_sum, abs(math.fsum(row) - 1.0))
            assert min(row) >= 0
        for i, row in enumerate(reservoir_proportions(sizes, 0.0), start=1):
            total = math.fsum(sizes[:i])
            worst_prop = max(worst_prop, max(abs(p - s / total) for p, s in zip(row, sizes)))
    equal = reservoir_proportions([100, 100], 0.5)[1]
    elapsed = time.perf_counter() - start
    verdict(3, "reservoir sums to 1, alpha=0 size-proportional, (0.75, 0.25) case",
            worst_sum < 1e-9 and worst_prop < 1e-12 and equal == (0.75, 0.25) and elapsed < 1,
            f"sum err {worst_sum:.1e}, alpha=0 err {worst_prop:.1e}, equal case {equal}, {elapsed:.2f}s")


# ---- 4 ------------------------------------------------------------------------

def test_criterion_4_gradients():
    rng = Xoshiro256(2024, 4)
    start = time.perf_counter()
    worst = 0.0
    h = 1e-5
    for c in range(10):
        cfg = ModelConfig(vocab_size=4 + rng.below(30), context_length=1 + rng.below(8),
                          embed_dim=1 + rng.below(8), hidden_dim=1 + rng.below(24), init_seed=c)
        st = init_state(cfg)
        st.b1[:] = [rng.random() - 0.5 for _ in range(cfg.hidden_dim)]
        st.b2[:] = [rng.random() - 0.5 for _ in range(cfg.vocab_size)]
        n = 8
        ctx = np.array([[rng.below(cfg.vocab_size) for _ in range(cfg.context_length)] for _ in range(n)])
        tgt = np.array([rng.below(cfg.vocab_size) for _ in range(n)])
        _, grad = loss_and_grad(st, ctx, tgt)
        for name, tensor in st.tensors().items():
            g = getattr(grad, name)
            for _ in range(20):
                idx = np.unravel_index(rng.below(tensor.size), tensor.shape)
                if name == "E":  # only rows of tokens in the batch get gradient
                    idx = (int(ctx.ravel()[rng.below(ctx.size)]), idx[1])
                old = tensor[idx]
                tensor[idx] = old + h
                up, _ = loss_and_grad(st, ctx, tgt)
                tensor[idx] = old - h
                down, _ = loss_and_grad(st, ctx, tgt)
                tensor[idx] = old
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-7))
    elapsed = time.perf_counter() - start
    verdict(4, "finite differences, 20 coordinates per tensor, 10 configs",
            worst < 1e-4 and elapsed < 30, f"max rel err {worst:.2e}, {elapsed:.2f}s")


# ---- 5 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_same_data_rewarm(out_root):
    report, elapsed = run_preset(out_root, "same-data-rewarm")
    until = rewarm_window(preset("same-data-rewarm"))
    base = report.record("const-eta-min")
    ex = {p: peak_excess(report.record(f"rewarm-{p:g}"), base, "D0", until) for p in REWARM_PEAKS}
    ordered = ex[6e-4] >= ex[3e-4] >= ex[1.5e-4]
    verdict(5, "re-warming on the same data: peak excess >= 0.02 and ordered by eta_max",
            ex[3e-4] >= 0.02 and ordered and elapsed < 600,
            ", ".join(f"{p:g}: {v:.4f}" for p, v in ex.items()) + f", {elapsed:.0f}s")


# ---- 6 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_replay_sweep(out_root):
    report, elapsed = run_preset(out_root, "replay-sweep", shift="strong")
    d0 = [report.final(f"strong-replay-{100 * x:g}")["D0"] for x in REPLAY_FRACTIONS]
    mono = all(b <= a for a, b in zip(d0, d0[1:]))
    a0 = report.final("strong-replay-0")["D1s"]
    a5 = report.final("strong-replay-5")["D1s"]
    verdict(6, "D0 loss non-increasing in replay; D1 at 5% within 0.05 of 0%",
            mono and abs(a5 - a0) <= 0.05 and elapsed < 1200,
            "D0 " + " ".join(f"{v:.4f}" for v in d0) + f"; D1 {a5:.4f} vs {a0:.4f}, {elapsed:.0f}s")


# ---- 7, 8 -----------------------------------------------------------------------

@pytest.fixture(scope="session")
def union_run(out_root):
    return run_preset(out_root, "continual-vs-union", shift="both")


@pytest.mark.slow
def test_criterion_7_continual_matches_union(union_run):
    report, elapsed = union_run
    parts, ok = [], True
    for tag, d1 in (("weak", "D1w"), ("strong", "D1s")):
        x = UNION_MATCH_REPLAY[tag]
        cont = report.final(f"{tag}-replay-{100 * x:g}")
        union = report.final(f"{tag}-union")
        c, u = (cont["D0"] + cont[d1]) / 2, (union["D0"] + union[d1]) / 2
        ok &= rel_diff(c, u) <= 0.05
        parts.append(f"{tag}: {c:.4f} vs {u:.4f} ({rel_diff(c, u):.2%})")
    verdict(7, "re-warm + replay AVG within 5% of union", ok and elapsed < 1200,
            "; ".join(parts) + f", {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_8_rewarming_needed(union_run):
    report, _ = union_run
    const = report.final("strong-const-eta-min")["D1s"]
    rewarmed = {a: report.final(a)["D1s"] for a in ("strong-replay-0", "strong-replay-25")}
    verdict(8, "constant eta_min adapts worse than every re-warmed arm (strong shift)",
            all(const > v for v in rewarmed.values()),
            f"const {const:.4f} vs " + ", ".join(f"{a} {v:.4f}" for a, v in rewarmed.items()))


# ---- 9 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_infinite_schedules(out_root):
    single, t1 = run_preset(out_root, "infinite-vs-cosine")
    splits, t2 = run_preset(out_root, "three-splits")
    cos = single.final("cosine")["D0"]
    parts, ok = [], True
    for arm in ("cosine-inf", "invsqrt-inf"):
        v = single.final(arm)["D0"]
        ok &= rel_diff(v, cos) <= 0.02
        parts.append(f"{arm} {rel_diff(v, cos):.2%}")
    for i in range(3):
        ref = splits.summaries["repeated-cosine"][f"split{i}"]["D0"]
        for arm in ("cosine-inf", "invsqrt-inf"):
            v = splits.summaries[arm][f"split{i}-anneal"]["D0"]
            ok &= rel_diff(v, ref) <= 0.02
            parts.append(f"split{i} {arm} {rel_diff(v, ref):.2%}")
    verdict(9, "infinite schedules within 2% of cosine, single corpus and three splits",
            ok and t1 + t2 < 900, ", ".join(parts) + f", {t1 + t2:.0f}s")


# ---- 10 -----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_warmup_insensitivity(out_root):
    report, elapsed = run_preset(out_root, "warmup-sweep", shift="weak")
    arms = [f"weak-warmup-{w:g}" for w in (0, 0.5, 1, 2)]
    spans = {}
    for d in ("D0", "D1w"):
        finals = [report.final(a)[d] for a in arms]
        spans[d] = (max(finals) - min(finals)) / min(finals)
    steps = report.record(arms[0]).rows[-1].step
    until = max(1, steps // 50)
    p0 = max(r.losses[0] for r in report.record(arms[0]).rows if r.step <= until)
    p2 = max(r.losses[0] for r in report.record(arms[-1]).rows if r.step <= until)
    verdict(10, "final-loss span < 1% across warmups; 0% transient peak above 2%",
            max(spans.values()) < 0.01 and p0 > p2 and elapsed < 600,
            ", ".join(f"{d} span {v:.3%}" for d, v in spans.items())
            + f"; D0 peak {p0:.4f} vs {p2:.4f}, {elapsed:.0f}s")


# ---- 11 -----------------------------------------------------------------------

# desk-scale defaults (V=64, 2e6 training tokens), root seed 0
GOLDEN_D0 = ("9e3a9335f54740c8ab695a6f89ebaf64d6f3e8f9ca3f58ffa9ab62f5e60c365c",
             "c89d9193f88d12f524340b8cbd55b3d282d51f05658c7ee865aa04bc3385204f")
GOLDEN_D1S = ("70a44d52e9bd2fab26c4ef515d7f4ae3b28e3899df668a7001d3567e2d0caf11",
              "e55d9cd213dcf362b9b887fbb51a0eb62f2cd5f11ea242f3d980d01f17de167d")


def test_criterion_11_determinism(tmp_path):
    sums = []
    for spec in (CorpusSpec("D0", transition_seed=0, val_tokens=4105),
                 CorpusSpec("D1s", transition_seed=0, shift=ShiftKind.strong(), val_tokens=4105)):
        train, val = gen_corpus(spec)
        sums.append((train.checksum(), val.checksum()))
    golden = sums == [GOLDEN_D0, GOLDEN_D1S]

    spec = preset("replay-sweep", scale=0.01, shift="strong")
    run_experiment(spec, tmp_path / "a")
    run_experiment(preset("replay-sweep", scale=0.01, shift="strong"), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same = bool(files) and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                               for f in files)

    ckpt_dir = tmp_path / "ckpt"
    run_experiment(preset("infinite-vs-cosine", scale=0.005), None, ckpt_dir)
    ckpts = sorted((ckpt_dir / "phases").glob("*.ckpt"))
    round_trip = bool(ckpts) and all(Checkpoint.load(p).to_bytes() == p.read_bytes() for p in ckpts)
    verdict(11, "golden checksums, byte-identical rerun, checkpoint round-trip",
            golden and same and round_trip,
            f"checksums {'match' if golden else 'differ'}, {len(files)} files compared, "
            f"{len(ckpts)} checkpoints")
