import math

import numpy as np
import pytest

from ctpkit.data import CorpusSpec, ShiftKind, gen_corpus, windows
from ctpkit.model import (ModelConfig, ModelState, NumericalError, eval_loss, forward, init_state,
                          loss_and_grad)
from ctpkit.rng import Xoshiro256

CFG = ModelConfig(vocab_size=11, context_length=3, embed_dim=4, hidden_dim=5, init_seed=1)


def batch(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, cfg.vocab_size, (n, cfg.context_length)),
            rng.integers(0, cfg.vocab_size, n))


def naive_logits(state, ctx):
    """Loop-by-loop forward pass with the tanh-approximate GELU."""
    z = []
    for tok in ctx:
        z.extend(state.E[tok].tolist())
    a = []
    for i in range(state.W1.shape[0]):
        u = state.b1[i] + sum(state.W1[i, k] * z[k] for k in range(len(z)))
        a.append(0.5 * u * (1 + math.tanh(0.7978845608 * (u + 0.044715 * u ** 3))))
    return [state.b2[v] + sum(state.W2[v, i] * a[i] for i in range(len(a)))
            for v in range(state.W2.shape[0])]


def test_param_count():
    assert CFG.num_params == sum(int(np.prod(s)) for s in CFG.shapes().values())
    assert CFG.num_params == 11 * 4 + (3 * 4 * 5 + 5) + (5 * 11 + 11)


def test_init_bounds_and_determinism():
    st = init_state(CFG)
    assert np.all(np.abs(st.E) <= 1.0)
    assert np.all(np.abs(st.W1) <= 1 / math.sqrt(12))
    assert np.all(np.abs(st.W2) <= 1 / math.sqrt(5))
    assert not st.b1.any() and not st.b2.any()
    assert st.bit_equal(init_state(CFG))
    assert not st.bit_equal(init_state(ModelConfig(11, 3, 4, 5, init_seed=2)))


def test_zero_params_give_uniform_loss():
    st = ModelState.zeros(CFG)
    ctx, tgt = batch(CFG, 7)
    logits, _ = forward(st, ctx)
    assert not logits.any()
    loss, grad = loss_and_grad(st, ctx, tgt)
    assert loss == pytest.approx(math.log(11), rel=1e-15)
    expected = np.full(11, 1 / 11) - np.bincount(tgt, minlength=11) / 7
    assert np.allclose(grad.b2, expected, atol=1e-15)
    assert eval_loss(st, ctx, tgt) == pytest.approx(math.log(11), rel=1e-15)


def test_forward_matches_naive():
    st = init_state(CFG)
    st.b1[:] = np.linspace(-0.3, 0.3, 5)
    st.b2[:] = np.linspace(-0.2, 0.2, 11)
    ctx, _ = batch(CFG, 4, seed=3)
    logits, _ = forward(st, ctx)
    for row, c in zip(logits, ctx):
        assert np.max(np.abs(row - naive_logits(st, c))) < 1e-12


def test_duplicate_tokens_give_identical_blocks():
    st = init_state(CFG)
    _, cache = forward(st, np.array([[4, 4, 4]]))
    z = cache["z"][0].reshape(3, 4)
    assert np.array_equal(z[0], z[1]) and np.array_equal(z[1], z[2])


def finite_difference_check(cfg, seed, coords=20, h=1e-5):
    st = init_state(cfg)
    rng = Xoshiro256(seed, 99)
    st.b1[:] = [rng.random() - 0.5 for _ in range(cfg.hidden_dim)]
    st.b2[:] = [rng.random() - 0.5 for _ in range(cfg.vocab_size)]
    ctx, tgt = batch(cfg, 6, seed)
    _, grad = loss_and_grad(st, ctx, tgt)
    worst = 0.0
    for name, tensor in st.tensors().items():
        g = getattr(grad, name)
        for _ in range(coords):
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
            err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-7)
            worst = max(worst, err)
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    cfg = ModelConfig(9 + seed, 2 + seed, 3, 4 + seed, init_seed=seed)
    assert finite_difference_check(cfg, seed) < 1e-4


def test_duplicated_batch_same_loss_and_grad():
    st = init_state(CFG)
    ctx, tgt = batch(CFG, 5)
    l1, g1 = loss_and_grad(st, ctx, tgt)
    l2, g2 = loss_and_grad(st, np.concatenate([ctx, ctx]), np.concatenate([tgt, tgt]))
    assert l1 == pytest.approx(l2, rel=1e-14)
    for a, b in zip(g1.tensors().values(), g2.tensors().values()):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-16)


def test_eval_order_independent():
    st = init_state(CFG)
    ctx, tgt = batch(CFG, 300)
    perm = np.random.default_rng(1).permutation(300)
    assert eval_loss(st, ctx, tgt, chunk=64) == eval_loss(st, ctx[perm], tgt[perm], chunk=64)


def test_token_range_checked():
    st = init_state(CFG)
    with pytest.raises(ValueError):
        forward(st, np.array([[0, 1, 11]]))
    with pytest.raises(ValueError):
        loss_and_grad(st, np.array([[0, 1, 2]]), np.array([11]))


def test_non_finite_loss_names_example():
    st = ModelState.zeros(CFG)
    st.b2[3] = np.inf
    with pytest.raises(NumericalError) as err:
        loss_and_grad(st, np.zeros((2, 3), dtype=int), np.array([0, 1]))
    assert err.value.index == 0


def test_training_beats_untrained():
    from ctpkit.optim import OptimConfig, OptimState, adamw_step, clip_gradient
    cfg = ModelConfig(vocab_size=16, context_length=4, embed_dim=8, hidden_dim=16)
    train, val = gen_corpus(CorpusSpec("m", 16, 0, ShiftKind.base(), 70_000, 2000))
    vc, vt = windows(val, 4)
    st = init_state(cfg)
    before = eval_loss(st, vc, vt)
    opt, oc = OptimState.fresh(st), OptimConfig()
    c, t = windows(train, 4, 0, 2000 * 32)
    for k in range(2000):
        _, g = loss_and_grad(st, c[32 * k:32 * k + 32], t[32 * k:32 * k + 32])
        st, opt = adamw_step(opt, st, clip_gradient(g, 1.0), 3e-3, oc)
    after = eval_loss(st, vc, vt)
    assert 0 <= after < before <= math.log(16) + 1
