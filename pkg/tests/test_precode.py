import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chanrep import precode
from chanrep.precode import (dual_plan, dual_precoder, joint_se, nmse, representative_traversal, se_single,
                             stack_dual, svd_precoder, task1, task2, waterfill, waterfill_objective)
from conftest import crandn


# --------------------------------------------------------------------------
# single-BS precoding


def test_svd_precoder_rank_one_example():
    u = np.array([[1.0], [0.0]])
    v = np.array([[0.6], [0.8j]])
    h = 2.0 * u @ v.conj().T
    w = svd_precoder(h, 1)
    assert abs(abs(np.vdot(w[:, 0], v[:, 0])) - 1) < 1e-12
    assert np.linalg.norm(h @ w, 2) ** 2 == pytest.approx(4.0)


def test_svd_precoder_singular_values_two_one():
    h = np.diag([2.0, 1.0])
    w = svd_precoder(h, 1)
    assert np.linalg.norm(h @ w, 2) ** 2 == pytest.approx(4.0)


def test_svd_precoder_identity_two_layers():
    w = svd_precoder(np.eye(2), 2)
    assert np.linalg.norm(w) == pytest.approx(1.0)
    assert np.linalg.norm(np.eye(2) @ w) ** 2 == pytest.approx(1.0)
    assert np.allclose(w.conj().T @ w, 0.5 * np.eye(2))


def test_svd_precoder_errors():
    with pytest.raises(ValueError):
        svd_precoder(np.full((2, 2), np.nan), 1)
    with pytest.raises(ValueError):
        svd_precoder(np.eye(2), 3)
    with pytest.raises(ValueError):
        svd_precoder(np.eye(2), 0)


def test_svd_beats_random_search(rng):
    # random-search oracle over unit-norm rank-1 precoders
    h = crandn(rng, 4, 8)
    best = float(se_single(h, svd_precoder(h, 1), 0.5))
    w = crandn(rng, 1000, 8, 1)
    w /= np.linalg.norm(w, axis=(1, 2), keepdims=True)
    assert np.all(se_single(h[None], w, 0.5) <= best + 1e-12)


@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 10_000))
def test_svd_precoder_scale_invariant(scale, seed):
    h = crandn(np.random.default_rng(seed), 3, 5)
    a, b = svd_precoder(h, 1)[:, 0], svd_precoder(scale * h, 1)[:, 0]
    assert abs(abs(np.vdot(a, b)) - 1) < 1e-9


def test_svd_precoder_batched(rng):
    h = crandn(rng, 5, 3, 4)
    w = svd_precoder(h, 2)
    assert w.shape == (5, 4, 2)
    for i in range(5):
        assert np.allclose(np.abs(w[i]), np.abs(svd_precoder(h[i], 2)))


def test_se_single_examples():
    h = np.diag([2.0, 0.0])
    assert se_single(h, np.zeros((2, 1)), 1.0) == 0.0
    assert se_single(h, np.array([[1.0], [0.0]]), 1.0) == pytest.approx(math.log2(5))
    vals = [float(se_single(h, np.array([[1.0], [0.0]]), s)) for s in (0.1, 1, 10, 100, 1e6)]
    assert all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-5


def test_se_single_uses_spectral_norm():
    h, w = np.eye(2), np.eye(2) / math.sqrt(2)
    # spectral norm squared is 1/2, the Frobenius reading would give 1
    assert se_single(h, w, 1.0) == pytest.approx(math.log2(1.5))


def test_se_single_shape_mismatch():
    with pytest.raises(ValueError):
        se_single(np.eye(2), np.ones((3, 1)), 1.0)


def task1_oracle(tensor, rep, n_l, noise):
    total = 0.0
    n_t, n_k = tensor.shape[:2]
    for k in range(n_k):
        _, _, vh = np.linalg.svd(rep[k])
        w = vh[:n_l].conj().T
        w = w / np.linalg.norm(w)
        for t in range(n_t):
            total += math.log2(1 + np.linalg.norm(tensor[t, k] @ w, 2) ** 2 / noise)
    return total / (n_t * n_k)


@pytest.mark.parametrize("n_l", [1, 2])
def test_task1_matches_direct_summation(rng, n_l):
    tensor = crandn(rng, 2, 3, 2, 4)
    rep = crandn(rng, 3, 2, 4)
    assert task1(tensor, rep, n_l, 0.7) == pytest.approx(task1_oracle(tensor, rep, n_l, 0.7), rel=1e-12)


def test_task1_self_is_optimal_single_time(rng):
    tensor = crandn(rng, 1, 4, 2, 4)
    own = task1(tensor, tensor[0], 1, 1.0)
    per_k = np.mean([math.log2(1 + np.linalg.svd(tensor[0, k], compute_uv=False)[0] ** 2) for k in range(4)])
    assert own == pytest.approx(per_k)
    for _ in range(20):
        assert task1(tensor, crandn(rng, 4, 2, 4), 1, 1.0) <= own + 1e-12


def test_task1_rep_shape_checked(rng):
    with pytest.raises(ValueError):
        task1(crandn(rng, 2, 3, 2, 4), crandn(rng, 3, 2, 5), 1, 1.0)


# --------------------------------------------------------------------------
# dual-BS


def test_stack_dual_shapes_and_zero_block(rng):
    h1, h2 = crandn(rng, 4, 32), crandn(rng, 4, 32)
    assert stack_dual(h1, h2).shape == (4, 64)
    s = np.linalg.svd(stack_dual(h1, np.zeros_like(h1)), compute_uv=False)
    assert np.allclose(s, np.linalg.svd(h1, compute_uv=False))
    with pytest.raises(ValueError):
        stack_dual(h1, crandn(rng, 3, 32))


def test_stack_dual_equal_blocks(rng):
    h = crandn(rng, 3, 5)
    top = np.linalg.svd(stack_dual(h, h), compute_uv=False)[0]
    assert top == pytest.approx(math.sqrt(2) * np.linalg.svd(h, compute_uv=False)[0])


def grid_best(gains, budget, step):
    n = len(gains)
    steps = int(round(1 / step))
    best, arg = -np.inf, None
    for c in itertools.product(range(steps + 1), repeat=n - 1):
        if sum(c) > steps:
            continue
        p = np.array(c + (steps - sum(c),)) / steps * budget
        v = np.sum(np.log2(1 + gains * p))
        if v > best:
            best, arg = v, p
    return best, arg


def test_waterfill_symmetric():
    assert np.allclose(waterfill([1.0, 1.0], 4.0).power, [2.0, 2.0])


@pytest.mark.parametrize("inv, expect", [([1.0, 3.0], [3.0, 1.0]), ([1.0, 100.0], [4.0, 0.0])])
def test_waterfill_examples_match_grid_oracle(inv, expect):
    gains = 1 / np.array(inv)
    alloc = waterfill(gains, 4.0)
    assert np.allclose(alloc.power, expect)
    best, arg = grid_best(gains, 4.0, 1e-3)
    assert np.allclose(arg, expect, atol=4e-3)
    assert waterfill_objective(gains, alloc.power) >= best - 1e-12


def test_waterfill_degenerate_and_errors():
    a = waterfill([0.0, 0.0], 2.0)
    assert a.degenerate and np.all(a.power == 0)
    b = waterfill([0.0, 2.0], 2.0)
    assert b.power[0] == 0 and b.power[1] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        waterfill([-1.0, 1.0], 1.0)
    with pytest.raises(ValueError):
        waterfill([1.0], 0.0)


@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=12), st.floats(1e-2, 1e2))
def test_waterfill_kkt(gains, budget):
    c = np.array(gains)
    a = waterfill(c, budget)
    p = a.power
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(budget, rel=1e-9)
    act = p > 0
    assert np.allclose(p[act] + 1 / c[act], a.level, rtol=1e-9)
    assert np.all(1 / c[~act] >= a.level * (1 - 1e-9))


def test_waterfill_grid_small(rng):
    for _ in range(30):
        n = int(rng.integers(1, 4))
        gains = 10 ** rng.uniform(-1, 1, n)
        a = waterfill(gains, 3.0)
        best, _ = grid_best(gains, 3.0, 1e-2)
        assert waterfill_objective(gains, a.power) >= best - 1e-12


def test_dual_precoder_examples(rng):
    hs = crandn(rng, 2, 6)
    assert np.all(dual_precoder(hs, 0.0) == 0)
    w = dual_precoder(hs, 1.0)
    assert w.shape == (6, 1) and np.linalg.norm(w) == pytest.approx(1.0)
    w3 = dual_precoder(hs, 3.0)
    lam = np.linalg.svd(hs, compute_uv=False)[0]
    assert np.linalg.norm(w3) ** 2 == pytest.approx(3.0)
    se = joint_se(hs[:, :3], hs[:, 3:], w3, 0.5)
    assert se == pytest.approx(math.log2(1 + lam ** 2 * 3.0 / 0.5))
    with pytest.raises(ValueError):
        dual_precoder(hs, -1.0)


def test_theorem1_identity_random(rng):
    for _ in range(50):
        n_k, n_r, n_t = rng.integers(1, 9), rng.integers(1, 5), rng.integers(1, 9)
        h1, h2 = crandn(rng, n_k, n_r, n_t), crandn(rng, n_k, n_r, n_t)
        w, alloc = dual_plan(stack_dual(h1, h2), 0.8)
        assert alloc.power.sum() <= 2 * n_k + 1e-9
        lam = np.linalg.svd(stack_dual(h1, h2), compute_uv=False)[:, 0]
        achieved = np.sum(joint_se(h1, h2, w, 0.8))
        assert achieved == pytest.approx(waterfill_objective(lam ** 2 / 0.8, alloc.power), rel=1e-9)


def test_task2_equals_optimum_with_true_channel(rng):
    h1, h2 = crandn(rng, 1, 4, 2, 3), crandn(rng, 1, 4, 2, 3)
    rep = stack_dual(h1[0], h2[0])
    lam = np.linalg.svd(rep, compute_uv=False)[:, 0]
    opt = waterfill_objective(lam ** 2, waterfill(lam ** 2, 8.0).power) / 4
    assert task2(h1, h2, rep, 1.0) == pytest.approx(opt)


def test_task2_power_on_one_subcarrier(rng):
    h1, h2 = crandn(rng, 1, 3, 2, 2), crandn(rng, 1, 3, 2, 2)
    rep = np.zeros((3, 2, 4), complex)
    rep[1] = stack_dual(h1[0, 1], h2[0, 1])
    w, alloc = dual_plan(rep, 1.0)
    assert alloc.power[0] == 0 and alloc.power[2] == 0
    se = joint_se(h1[0], h2[0], w, 1.0)
    assert se[0] == 0 and se[2] == 0 and se[1] > 0


def test_task2_toy_matches_grid_oracle():
    # 2x2 per BS, one subcarrier: brute force over a grid of 2N_T = 4 dim unit directions
    rng = np.random.default_rng(11)
    h1, h2 = crandn(rng, 1, 1, 2, 2), crandn(rng, 1, 1, 2, 2)
    val = task2(h1, h2, stack_dual(h1[0], h2[0]), 1.0)
    hs = stack_dual(h1[0, 0], h2[0, 0])
    # grid over the complex unit sphere in C^4 via hyperspherical magnitudes and phases
    ang = np.linspace(0, np.pi / 2, 13)
    ph = np.linspace(0, 2 * np.pi, 13, endpoint=False)
    a, b, c = (g.ravel() for g in np.meshgrid(ang, ang, ang, indexing="ij"))
    mags = np.stack([np.cos(a), np.sin(a) * np.cos(b), np.sin(a) * np.sin(b) * np.cos(c),
                     np.sin(a) * np.sin(b) * np.sin(c)], axis=1)
    phases = np.exp(1j * np.array([(0.0,) + p for p in itertools.product(ph, ph, ph)]))
    w = mags[:, None, :] * phases[None, :, :]           # (13^3, 13^3, 4)
    gain = np.sum(np.abs(np.einsum("rt,abt->abr", hs, w)) ** 2, axis=-1)
    best = math.log2(1 + 2.0 * gain.max())
    assert val >= best - 1e-9
    assert val - best < 0.1


def test_task2_shape_checks(rng):
    with pytest.raises(ValueError):
        task2(crandn(rng, 1, 2, 2, 2), crandn(rng, 1, 2, 2, 3), crandn(rng, 2, 2, 4), 1.0)
    with pytest.raises(ValueError):
        task2(crandn(rng, 1, 2, 2, 2), crandn(rng, 1, 2, 2, 2), crandn(rng, 2, 2, 5), 1.0)


# --------------------------------------------------------------------------
# traversal and NMSE


def test_traversal_single_time(rng):
    t, rep, _ = representative_traversal(crandn(rng, 1, 2, 2, 2), "task1", 1.0)
    assert t == 0


def test_traversal_identical_slices_tie_to_zero(rng):
    one = crandn(rng, 1, 2, 2, 2)
    assert representative_traversal(np.repeat(one, 4, axis=0), "task1", 1.0)[0] == 0


@pytest.mark.parametrize("kind", ["task1", "task2"])
def test_traversal_matches_exhaustive(rng, kind):
    a, b = crandn(rng, 4, 3, 2, 2), crandn(rng, 4, 3, 2, 2)
    tensors = a if kind == "task1" else (a, b)
    cands = a if kind == "task1" else stack_dual(a, b)
    scores = [precode.task_score(kind, tensors, cands[t], 1.0) for t in range(4)]
    t, rep, score = representative_traversal(tensors, kind, 1.0)
    assert t == int(np.argmax(scores)) and score == max(scores)
    assert np.array_equal(rep, cands[t])


def test_nmse_examples(rng):
    h = crandn(rng, 3, 2, 4, 2, 2)
    assert nmse(h, h) == precode.NMSE_FLOOR_DB
    assert nmse(h, np.zeros_like(h)) == pytest.approx(0.0)
    noisy = h + 0.1 * crandn(rng, *h.shape)
    ratio = np.mean(np.sum(np.abs(h - noisy) ** 2, axis=(-3, -2, -1)) / np.sum(np.abs(h) ** 2, axis=(-3, -2, -1)))
    assert nmse(h, noisy) == pytest.approx(10 * math.log10(ratio))
    c = 2.5 * np.exp(0.7j)
    assert nmse(c * h, c * noisy) == pytest.approx(nmse(h, noisy))
    assert nmse(h, noisy) != pytest.approx(nmse(noisy, h), abs=1e-6)


def test_nmse_errors(rng):
    h = crandn(rng, 2, 2, 2, 2)
    with pytest.raises(ZeroDivisionError):
        nmse(np.zeros_like(h), h)
    with pytest.raises(ValueError):
        nmse(h, h[:1])
