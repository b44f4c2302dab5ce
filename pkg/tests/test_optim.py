import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtrain.comms import WorkerGroup
from qtrain.numerics import NonFiniteError, is_bf16
from qtrain.optim import (
    AdamWConfig,
    adamw_step,
    clip_factor,
    clip_grads,
    global_grad_norm,
    init_state,
    shard_spec,
    shard_state,
    sharded_grad_norm,
    sharded_step,
)


def adamw_oracle(p, grads_seq, h: AdamWConfig):
    """Textbook AdamW in float64."""
    p = p.astype(np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads_seq, start=1):
        g = g.astype(np.float64)
        m = h.beta1 * m + (1 - h.beta1) * g
        v = h.beta2 * v + (1 - h.beta2) * g * g
        mh = m / (1 - h.beta1 ** t)
        vh = v / (1 - h.beta2 ** t)
        p = p - h.lr * (mh / (np.sqrt(vh) + h.eps) + h.weight_decay * p)
    return p


def rand_params(seed=0, shapes=None):
    rng = np.random.default_rng(seed)
    shapes = shapes or {"a": (7, 5), "b": (300,), "c": (3,)}
    return {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}


def test_zero_gradient_leaves_params_unchanged():
    p = rand_params()
    for moments in ("f32", "bf16"):
        state = init_state(p, AdamWConfig(lr=1e-2), moments=moments)
        before = state.params()
        after = adamw_step(state, {k: np.zeros_like(v) for k, v in p.items()})
        assert all(np.array_equal(before[k], after[k]) for k in p)


def test_matches_f64_oracle_on_quadratic_bowl():
    rng = np.random.default_rng(0)
    target = rng.standard_normal(64)
    p0 = rng.standard_normal(64).astype(np.float32)
    h = AdamWConfig(lr=1e-2, weight_decay=0.1)
    state = init_state({"w": p0}, h, moments="f32", master_dtype="f32")
    grads = []
    for _ in range(10):
        w = state.master["w"].astype(np.float64)
        g = (w - target).astype(np.float32)  # d/dw of 0.5 |w - target|^2
        grads.append(g)
        adamw_step(state, {"w": g})
    ref = adamw_oracle(p0, grads, h)
    assert np.max(np.abs(state.master["w"] - ref)) < 1e-5


def test_bf16_fields_stay_bf16():
    p = rand_params()
    state = init_state(p, AdamWConfig(lr=1e-3), moments="bf16")
    g = rand_params(1)
    for _ in range(3):
        adamw_step(state, g)
    for k in p:
        assert is_bf16(state.master[k]) and is_bf16(state.m[k]) and is_bf16(state.v[k])


def test_bf16_moments_unbiased():
    """Averaged over seeds, stochastically rounded moments match the f32 trajectory."""
    rng = np.random.default_rng(3)
    p0 = {"w": rng.standard_normal(256).astype(np.float32)}
    grads = [{"w": rng.standard_normal(256).astype(np.float32)} for _ in range(5)]
    h = AdamWConfig(lr=1e-3)
    ref = init_state(p0, h, moments="f32", master_dtype="f32")
    for g in grads:
        adamw_step(ref, g)
    ms = []
    for seed in range(200):
        st_ = init_state(p0, h, moments="bf16", master_dtype="f32", seed=seed)
        for g in grads:
            adamw_step(st_, g)
        ms.append(st_.m["w"].astype(np.float64))
    ms = np.array(ms)
    err = ms.mean(0) - ref.m["w"]
    sem = ms.std(0, ddof=1) / np.sqrt(len(ms))
    pooled = abs(err.sum()) / np.sqrt(np.sum(sem ** 2))
    assert pooled <= 3
    assert np.mean(np.abs(err) <= 3 * sem + 1e-12) > 0.98


def test_step_rejects_non_finite_gradient():
    p = rand_params()
    state = init_state(p)
    g = {k: np.zeros_like(v) for k, v in p.items()}
    g["b"][4] = np.nan
    with pytest.raises(NonFiniteError):
        adamw_step(state, g)


def test_state_bytes_per_param():
    p = rand_params()
    n = sum(v.size for v in p.values())
    assert init_state(p, moments="f32").nbytes() == n * (8 + 2)
    assert init_state(p, moments="bf16").nbytes() == n * (4 + 2)
    assert init_state(p, moments="bf16").moment_bytes_per_param * 2 == \
        init_state(p, moments="f32").moment_bytes_per_param


def test_global_norm_small_example():
    assert global_grad_norm({"a": np.array([3.0, 4.0], np.float32)}) == np.float32(5.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_sharded_norm_equals_unsharded(W, seed):
    g = rand_params(seed, {"a": (37, 11), "b": (1000,), "c": (1,)})
    full = global_grad_norm(g)
    spec = shard_spec({k: v.shape for k, v in g.items()}, W)
    shards = []
    for w in range(W):
        d = {}
        for k, v in g.items():
            lo, hi = spec.bounds(k, w)
            padded = np.zeros(spec.padded[k], np.float32)
            padded[: v.size] = v.ravel()
            d[k] = padded[lo:hi]
        shards.append(d)
    assert all(n == full for n in sharded_grad_norm(shards))


def test_norm_repeatable():
    g = rand_params(5)
    first = global_grad_norm(g)
    assert all(global_grad_norm(g) == first for _ in range(100))


def test_norm_matches_f64():
    g = rand_params(6)
    ref = np.sqrt(sum(np.sum(v.astype(np.float64) ** 2) for v in g.values()))
    assert float(global_grad_norm(g)) == pytest.approx(ref, rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
def test_clipping_bounds_norm(max_norm, seed):
    g = {k: v * 10 for k, v in rand_params(seed).items()}
    clipped, pre = clip_grads(g, max_norm)
    post = float(global_grad_norm(clipped))
    assert post <= max_norm * (1 + 1e-6)
    if pre <= max_norm:
        assert clipped is g


def test_clip_factor_limits():
    assert clip_factor(0.5, 1.0) == 1
    assert clip_factor(5.0, None) == 1
    assert clip_factor(4.0, 1.0) == pytest.approx(0.25, rel=1e-6)


# ---------------------------------------------------------------- ZeRO-1

def run_single(p, grads_seq, moments, seed=7):
    state = init_state(p, AdamWConfig(lr=1e-2, weight_decay=0.01), moments=moments, seed=seed)
    for g in grads_seq:
        out = adamw_step(state, g)
    return out, state


def run_sharded(p, grads_seq, moments, W, seed=7):
    full = init_state(p, AdamWConfig(lr=1e-2, weight_decay=0.01), moments=moments, seed=seed)
    states = shard_state(full, W)
    group = WorkerGroup(W)
    for g in grads_seq:
        outs = sharded_step(group, states, g)
    return outs, states


@pytest.mark.parametrize("W", [1, 2, 3, 4])
@pytest.mark.parametrize("moments", ["f32", "bf16"])
def test_sharded_step_bitwise_equals_single_worker(W, moments):
    p = rand_params(0)
    grads_seq = [rand_params(10 + i) for i in range(4)]
    ref, ref_state = run_single(p, grads_seq, moments)
    outs, states = run_sharded(p, grads_seq, moments, W)
    for w in range(W):
        for k in p:
            assert np.array_equal(outs[w][k], ref[k]), (W, moments, k)
    spec = shard_spec(ref_state.shapes, W)
    for k in p:
        m = np.concatenate([s.m[k] for s in states])[: p[k].size]
        assert np.array_equal(m, ref_state.m[k])
        assert spec.padded[k] % (W * spec.block) == 0


def test_sharded_step_even_split():
    p = {"w": np.random.default_rng(0).standard_normal(1024).astype(np.float32)}
    g = [{"w": np.random.default_rng(i).standard_normal(1024).astype(np.float32)} for i in range(3)]
    ref, _ = run_single(p, g, "bf16")
    outs, states = run_sharded(p, g, "bf16", 4)
    assert [s.master["w"].size for s in states] == [256] * 4
    assert all(np.array_equal(o["w"], ref["w"]) for o in outs)


def test_state_bytes_per_worker_divide_by_W():
    p = {"w": np.zeros(4096, np.float32), "b": np.zeros(2048, np.float32)}
    full = init_state(p, moments="f32")
    for W in (1, 2, 4, 8):
        shards = shard_state(full, W)
        assert all(s.nbytes() == full.nbytes() // W for s in shards)


def test_sharded_step_accepts_per_worker_shards():
    p = rand_params(0)
    g = rand_params(1)
    W = 2
    ref, _ = run_single(p, [g], "f32")
    full = init_state(p, AdamWConfig(lr=1e-2, weight_decay=0.01), moments="f32", seed=7)
    states = shard_state(full, W)
    spec = shard_spec(full.shapes, W)
    local = []
    for w in range(W):
        d = {}
        for k, v in g.items():
            lo, hi = spec.bounds(k, w)
            padded = np.zeros(spec.padded[k], np.float32)
            padded[: v.size] = v.ravel()
            d[k] = padded[lo:hi]
        local.append(d)
    outs = sharded_step(WorkerGroup(W), states, local)
    assert all(np.array_equal(outs[w][k], ref[k]) for w in range(W) for k in p)


def test_sharded_step_validates_worker_count():
    full = init_state(rand_params())
    with pytest.raises(ValueError):
        sharded_step(WorkerGroup(3), shard_state(full, 2), rand_params(1))
