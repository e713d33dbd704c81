"""Precoders, power allocation and the geolocation-based transmission metrics.

Shapes follow the channel tensors from :mod:`chanrep.chanmodel`: a single
channel is (N_R, N_T), a representative channel (N_k, N_R, N_T) and a link
tensor (N_t, N_k, N_R, N_T).  Functions that take one channel also accept
leading batch axes where noted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NMSE_FLOOR_DB = -300.0


def _check_finite(h: np.ndarray) -> None:
    if not np.all(np.isfinite(h)):
        raise np.linalg.LinAlgError("SVD of non-finite channel")


def svd_precoder(h: np.ndarray, n_layers: int = 1) -> np.ndarray:
    """First ``n_layers`` right singular vectors of ``h``, Frobenius-normalized to 1.

    Batched over leading axes: (..., N_R, N_T) -> (..., N_T, n_layers).
    """
    h = np.asarray(h)
    _check_finite(h)
    if not 1 <= n_layers <= min(h.shape[-2:]):
        raise ValueError(f"n_layers={n_layers} outside [1, {min(h.shape[-2:])}]")
    _, _, vh = np.linalg.svd(h, full_matrices=False)
    v = np.conj(np.swapaxes(vh, -1, -2))[..., :n_layers]
    return v / np.linalg.norm(v, axis=(-2, -1), keepdims=True)


def spectral_norm_sq(m: np.ndarray) -> np.ndarray:
    """Squared 2-norm of the last two axes (the largest singular value squared)."""
    m = np.asarray(m)
    if m.shape[-1] == 1:
        return np.sum(np.abs(m) ** 2, axis=(-2, -1))
    return np.linalg.svd(m, compute_uv=False)[..., 0] ** 2


def se_single(h: np.ndarray, w: np.ndarray, noise_var: float) -> np.ndarray:
    """log2(1 + ||H W||_2^2 / noise_var), batched over leading axes."""
    h, w = np.asarray(h), np.asarray(w)
    if w.ndim == h.ndim - 1:
        w = w[..., None]
    if h.shape[-1] != w.shape[-2]:
        raise ValueError(f"shape mismatch {h.shape} x {w.shape}")
    return np.log2(1.0 + spectral_norm_sq(h @ w) / noise_var)


def task1(tensor: np.ndarray, rep: np.ndarray, n_layers: int, noise_var: float) -> float:
    """Time-and-subcarrier average SE when every subcarrier uses the SVD precoder of ``rep``."""
    tensor, rep = np.asarray(tensor), np.asarray(rep)
    if tensor.ndim != 4 or rep.shape != tensor.shape[1:]:
        raise ValueError(f"rep shape {rep.shape} does not match tensor {tensor.shape}")
    w = svd_precoder(rep, n_layers)              # (N_k, N_T, N_l)
    se = se_single(tensor, w[None], noise_var)   # (N_t, N_k)
    return float(np.mean(se))


def stack_dual(h1: np.ndarray, h2: np.ndarray) -> np.ndarray:
    """[H1, H2] along the transmit axis."""
    h1, h2 = np.asarray(h1), np.asarray(h2)
    if h1.shape[:-1] != h2.shape[:-1]:
        raise ValueError(f"row mismatch {h1.shape} vs {h2.shape}")
    return np.concatenate([h1, h2], axis=-1)


@dataclass
class PowerAllocation:
    power: np.ndarray       # combined per-subcarrier power P1 + P2
    level: float            # water level mu
    degenerate: bool = False


def waterfill(gains, budget: float) -> PowerAllocation:
    """Maximize sum_k log2(1 + c_k P_k) s.t. sum_k P_k <= budget, P_k >= 0.

    Exact sort-based solution P_k = max(0, mu - 1/c_k).  Subcarriers with
    c_k = 0 get nothing; all-zero gains return a zero allocation flagged
    degenerate.
    """
    c = np.asarray(gains, dtype=float)
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ValueError("gains must be finite and >= 0")
    if not budget > 0:
        raise ValueError("budget must be > 0")
    out = np.zeros_like(c)
    active = np.flatnonzero(c > 0)
    if active.size == 0:
        return PowerAllocation(out, 0.0, True)
    inv = 1.0 / c[active]
    order = np.argsort(inv, kind="stable")
    inv_sorted = inv[order]
    csum = np.cumsum(inv_sorted)
    n = np.arange(1, inv_sorted.size + 1)
    levels = (budget + csum) / n
    # largest prefix whose weakest member still sits under the water
    m = int(np.flatnonzero(levels > inv_sorted)[-1]) + 1
    mu = levels[m - 1]
    out[active] = np.maximum(mu - inv, 0.0)
    return PowerAllocation(out, float(mu))


def waterfill_objective(gains, power) -> float:
    return float(np.sum(np.log2(1.0 + np.asarray(gains) * np.asarray(power))))


def dual_precoder(h_stack: np.ndarray, power: float) -> np.ndarray:
    """Top right singular vector of [H1, H2] scaled so ||W||_F^2 = power; shape (2N_T, 1)."""
    if power < 0:
        raise ValueError("power must be >= 0")
    h_stack = np.asarray(h_stack)
    _check_finite(h_stack)
    _, _, vh = np.linalg.svd(h_stack, full_matrices=False)
    return np.conj(vh[0])[:, None] * np.sqrt(power)


def dual_plan(rep_stacked: np.ndarray, noise_var: float, budget: float | None = None):
    """Per-subcarrier joint precoders derived from a stacked representative channel.

    Returns (precoders (N_k, 2N_T, 1), PowerAllocation).  The default budget
    is 2 N_k (two BSs, unit average power per subcarrier each).
    """
    rep = np.asarray(rep_stacked)
    _check_finite(rep)
    n_k = rep.shape[0]
    budget = 2.0 * n_k if budget is None else budget
    _, s, vh = np.linalg.svd(rep, full_matrices=False)
    alloc = waterfill(s[:, 0] ** 2 / noise_var, budget)
    w = np.conj(vh[:, 0, :])[..., None] * np.sqrt(alloc.power)[:, None, None]
    return w, alloc


def joint_se(h1: np.ndarray, h2: np.ndarray, w: np.ndarray, noise_var: float) -> np.ndarray:
    """log2(1 + ||H1 U1 + H2 U2||^2 / noise_var) with W = [U1; U2]; batched."""
    n_t = h1.shape[-1]
    u1, u2 = w[..., :n_t, :], w[..., n_t:, :]
    y = h1 @ u1 + h2 @ u2
    return np.log2(1.0 + np.sum(np.abs(y) ** 2, axis=(-2, -1)) / noise_var)


def task2(tensor1: np.ndarray, tensor2: np.ndarray, rep_stacked: np.ndarray, noise_var: float) -> float:
    """Average joint SE over (t, k) for precoders planned on ``rep_stacked``."""
    tensor1, tensor2 = np.asarray(tensor1), np.asarray(tensor2)
    if tensor1.shape != tensor2.shape or tensor1.ndim != 4:
        raise ValueError("tensor shapes must match and be (N_t, N_k, N_R, N_T)")
    n_t, n_k, n_r, n_tx = tensor1.shape
    if np.shape(rep_stacked) != (n_k, n_r, 2 * n_tx):
        raise ValueError(f"rep shape {np.shape(rep_stacked)} != {(n_k, n_r, 2 * n_tx)}")
    w, _ = dual_plan(rep_stacked, noise_var)
    return float(np.mean(joint_se(tensor1, tensor2, w[None], noise_var)))


def task_score(kind: str, tensors, rep: np.ndarray, noise_var: float, n_layers: int = 1) -> float:
    """Dispatch on ``kind``: 'task1' takes one tensor, 'task2' a (tensor1, tensor2) pair."""
    if kind == "task1":
        return task1(tensors, rep, n_layers, noise_var)
    if kind == "task2":
        t1, t2 = tensors
        return task2(t1, t2, rep, noise_var)
    raise ValueError(f"unknown task kind {kind!r}")


def representative_traversal(tensors, kind: str, noise_var: float, n_layers: int = 1):
    """Best observed time slice as the representative channel (ties -> lowest t).

    Returns (t_index, representative, score).
    """
    if kind == "task1":
        cands = np.asarray(tensors)
    else:
        cands = stack_dual(*tensors)
    best_t, best = 0, -np.inf
    for t in range(cands.shape[0]):
        score = task_score(kind, tensors, cands[t], noise_var, n_layers)
        if score > best:
            best_t, best = t, score
    return best_t, cands[best_t], best


def nmse(original, recon) -> float:
    """NMSE in dB averaged over all channels; accepts Datasets or (..., N_k, N_R, N_T) arrays.

    Exact reconstruction is floored at -300 dB.
    """
    h = original.stacked() if hasattr(original, "stacked") else np.asarray(original)
    g = recon.stacked() if hasattr(recon, "stacked") else np.asarray(recon)
    if h.shape != g.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {g.shape}")
    axes = (-3, -2, -1)
    den = np.sum(np.abs(h) ** 2, axis=axes)
    if np.any(den == 0):
        raise ZeroDivisionError("zero-norm channel in NMSE")
    ratio = float(np.mean(np.sum(np.abs(h - g) ** 2, axis=axes) / den))
    if ratio <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * np.log10(ratio), NMSE_FLOOR_DB)
