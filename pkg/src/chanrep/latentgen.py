"""Conditional DDPM in the representation space.

Step index convention: s runs 1..N_S and every schedule table has length
N_S + 1 with entry 0 holding the s = 0 boundary (alpha_bar_0 = 1).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .nncore import MLP, UNet1D, sinusoidal_table
from .reprlearn import _write_jsonl, warmup_lr


@dataclass
class DiffusionSchedule:
    delta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    post_var: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.delta) - 1


def make_schedule(n_steps: int, kind: str = "paper", start: float = 1e-4, slope: float = 1.65e-5,
                  ref_steps: int = 600) -> DiffusionSchedule:
    """Linear variance schedule delta_s = start + slope * s.

    ``kind='scaled'`` stretches the slope by (ref_steps / n_steps)^2 so a
    shorter chain accumulates the same total noise as a ``ref_steps`` chain.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if kind == "scaled":
        slope = slope * (ref_steps / n_steps) ** 2
    elif kind != "paper":
        raise ValueError(f"unknown schedule kind {kind!r}")
    s = np.arange(n_steps + 1, dtype=np.float64)
    delta = start + slope * s
    delta[0] = 0.0
    if np.any(delta[1:] <= 0) or np.any(delta[1:] >= 1):
        raise ValueError("schedule variances must lie in (0, 1)")
    alpha = 1.0 - delta
    alpha_bar = np.cumprod(alpha)
    post_var = np.zeros_like(delta)
    post_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * delta[1:]
    return DiffusionSchedule(delta, alpha, alpha_bar, post_var)


def _check_step(s, sched: DiffusionSchedule) -> None:
    s = np.asarray(s)
    if np.any(s < 1) or np.any(s > sched.n_steps):
        raise IndexError(f"step out of range [1, {sched.n_steps}]")


def _bcast(table: np.ndarray, s, like):
    v = table[np.asarray(s)]
    if isinstance(like, torch.Tensor):
        v = torch.as_tensor(v, dtype=like.dtype)
        return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))
    return np.reshape(v, np.shape(v) + (1,) * (np.ndim(like) - np.ndim(v)))


def forward_sample(f0, s, noise, sched: DiffusionSchedule):
    """F_s = sqrt(abar_s) F_0 + sqrt(1 - abar_s) noise."""
    _check_step(s, sched)
    if np.shape(noise) != np.shape(f0):
        raise ValueError("noise must match F_0 in shape")
    ab = _bcast(sched.alpha_bar, s, f0)
    return ab ** 0.5 * f0 + (1 - ab) ** 0.5 * noise


def posterior_mean_from_f0(fs, f0, s, sched: DiffusionSchedule):
    _check_step(s, sched)
    ab, ab_prev = _bcast(sched.alpha_bar, s, fs), _bcast(sched.alpha_bar, np.asarray(s) - 1, fs)
    a, d = _bcast(sched.alpha, s, fs), _bcast(sched.delta, s, fs)
    return (a ** 0.5 * (1 - ab_prev) / (1 - ab)) * fs + (ab_prev ** 0.5 * d / (1 - ab)) * f0


def posterior_mean_from_noise(fs, z, s, sched: DiffusionSchedule):
    _check_step(s, sched)
    ab, a, d = _bcast(sched.alpha_bar, s, fs), _bcast(sched.alpha, s, fs), _bcast(sched.delta, s, fs)
    return (fs - d / (1 - ab) ** 0.5 * z) / a ** 0.5


@dataclass
class GeneratorConfig:
    n_steps: int = 100
    schedule: str = "scaled"
    width: int = 32
    d_cond: int = 64
    n_heads: int = 1
    lr: float = 2e-3
    warmup_frac: float = 0.05
    decay_frac: float = 0.5     # final fraction of steps over which lr falls linearly to 0
    n_freq: int = 6             # Fourier octaves of the location condition
    steps: int = 4000
    batch_size: int = 64
    seed: int = 0


def loc_features(z: torch.Tensor, n_freq: int) -> torch.Tensor:
    """[z, sin(2^i pi z / 2), cos(2^i pi z / 2)] for octaves i < n_freq, per coordinate."""
    if n_freq == 0:
        return z
    ang = z[..., None] * (2.0 ** torch.arange(n_freq, dtype=z.dtype)) * (np.pi / 2)
    return torch.cat([z, torch.sin(ang).flatten(-2), torch.cos(ang).flatten(-2)], dim=-1)


class NoiseNet(nn.Module):
    """U-Net noise predictor with location and diffusion-step embeddings.

    The condition MLP sees Fourier features of the z-scored location so that
    nearby locations with unrelated latents can still be told apart.
    """

    def __init__(self, n_re: int, cfg: GeneratorConfig):
        super().__init__()
        self.d_cond = cfg.d_cond
        self.n_freq = cfg.n_freq
        self.unet = UNet1D(n_re, cfg.width, cfg.d_cond, cfg.n_heads)
        self.cond = MLP(3 * (1 + 2 * cfg.n_freq), cfg.d_cond, cfg.d_cond)
        self.register_buffer("loc_mean", torch.zeros(3))
        self.register_buffer("loc_std", torch.ones(3))

    def forward(self, fs: torch.Tensor, s: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
        z = (loc.to(fs.dtype) - self.loc_mean.to(fs.dtype)) / self.loc_std.to(fs.dtype)
        cond = self.cond(loc_features(z, self.n_freq))
        temb = sinusoidal_table(s, self.d_cond).to(fs.dtype)
        return self.unet(fs, cond, temb)


class LatentGenerator:
    """Trained noise net + schedule + latent standardization."""

    def __init__(self, net: NoiseNet, sched: DiffusionSchedule, lat_mean: np.ndarray, lat_std: np.ndarray):
        self.net = net.eval()
        self.sched = sched
        self.lat_mean = np.asarray(lat_mean, dtype=np.float64)
        self.lat_std = np.asarray(lat_std, dtype=np.float64)

    def sample(self, loc, n: int, seed: int) -> np.ndarray:
        """n latents for one location; sample i uses its own stream derived from (seed, i)."""
        locs = np.repeat(np.asarray(loc, dtype=np.float64).reshape(1, 3), n, axis=0)
        return self.sample_rows(locs, [(seed, i) for i in range(n)])

    @torch.no_grad()
    def sample_rows(self, locs: np.ndarray, keys) -> np.ndarray:
        """One reverse chain per row; row j draws all its noise from a stream keyed by keys[j].

        Rows never share randomness, so a row's result does not depend on what
        else is in the batch (up to float summation order).
        """
        locs = np.asarray(locs, dtype=np.float32).reshape(-1, 3)
        if len(keys) != len(locs):
            raise ValueError("need one key per location row")
        gens = [torch.Generator().manual_seed(int(np.random.SeedSequence([int(x) for x in np.atleast_1d(k)])
                                                  .generate_state(1)[0])) for k in keys]
        n, n_re = len(gens), self.lat_mean.size

        def noise():
            return torch.stack([torch.randn(n_re, generator=g) for g in gens])

        sched = self.sched
        loc_t = torch.as_tensor(locs)
        f = noise()
        for s in range(sched.n_steps, 0, -1):
            eps = self.net(f, torch.full((n,), s, dtype=torch.long), loc_t)
            f = posterior_mean_from_noise(f, eps, s, sched)
            if s > 1:
                f = f + float(np.sqrt(sched.post_var[s])) * noise()
        return f.double().numpy() * self.lat_std + self.lat_mean


def train_generator(reps: np.ndarray, locs: np.ndarray, n_re: int, cfg: GeneratorConfig,
                    log_path=None) -> tuple[LatentGenerator, list[dict]]:
    """Simplified-loss DDPM training; reps (E, N_t, N_re), locs (E, 3)."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.size == 0:
        raise ValueError("empty representation set")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    sched = make_schedule(cfg.n_steps, cfg.schedule)
    mean = reps.reshape(-1, n_re).mean(axis=0)
    std = reps.reshape(-1, n_re).std(axis=0) + 1e-8
    data = torch.as_tensor((reps - mean) / std, dtype=torch.float32)
    loc_t = torch.as_tensor(np.asarray(locs), dtype=torch.float32)
    net = NoiseNet(n_re, cfg)
    net.loc_mean.copy_(loc_t.mean(0))
    net.loc_std.copy_(loc_t.std(0, unbiased=False).clamp_min(1e-6))
    ab = torch.as_tensor(sched.alpha_bar, dtype=torch.float32)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    n_ent, n_t = data.shape[:2]
    log = []
    for step in range(cfg.steps):
        ents = torch.as_tensor(rng.integers(0, n_ent, size=cfg.batch_size))
        ts = torch.as_tensor(rng.integers(0, n_t, size=cfg.batch_size))
        s = torch.as_tensor(rng.integers(1, sched.n_steps + 1, size=cfg.batch_size))
        f0 = data[ents, ts]
        z = torch.randn_like(f0)
        a = ab[s][:, None]
        pred = net(a.sqrt() * f0 + (1 - a).sqrt() * z, s, loc_t[ents])
        loss = ((z - pred) ** 2).sum(dim=1).mean()
        lr = warmup_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac, cfg.decay_frac)
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append({"step": step, "loss": float(loss.item()), "lr": lr})
    _write_jsonl(log_path, log)
    return LatentGenerator(net, sched, mean, std), log


def select_best(candidates, eval_tensors, kind: str, noise_var: float, n_layers: int = 1):
    """Best-scoring candidate representative channel against stored evaluation tensors.

    Returns (index, channel, score); ties go to the first candidate.
    """
    from .precode import task_score

    best_i, best = 0, -np.inf
    for i, cand in enumerate(candidates):
        score = task_score(kind, eval_tensors, cand, noise_var, n_layers)
        if score > best:
            best_i, best = i, score
    if not np.isfinite(best):
        raise ValueError("no candidates to select from")
    return best_i, candidates[best_i], best


def generate_representative(generator: LatentGenerator, loc, n_gen: int, decode_fn, eval_tensors, kind: str,
                            noise_var: float, seed: int = 0, n_layers: int = 1):
    """Sample n_gen latents at loc, decode each to a channel and keep the best scorer.

    ``decode_fn`` maps (n, N_re) latents to channels (n, N_k, N_R, N_T) (or
    stacked dual channels for task2).
    """
    if n_gen < 1:
        raise ValueError("n_gen must be >= 1")
    chans = decode_fn(generator.sample(loc, n_gen, seed))
    return select_best(chans, eval_tensors, kind, noise_var, n_layers)


LAT_MAGIC = b"LAT1"
_LAT_HEADER = struct.Struct("<4sII")


def save_latents(path, latents, meta: dict | None = None) -> None:
    """LAT1 dump: magic, u32 n, u32 N_re, little-endian f32 payload; JSON sidecar ``path.json``."""
    lat = np.asarray(latents, dtype="<f4")
    if lat.ndim != 2:
        raise ValueError("latents must be (n, N_re)")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_LAT_HEADER.pack(LAT_MAGIC, lat.shape[0], lat.shape[1]))
        f.write(np.ascontiguousarray(lat).tobytes())
    path.with_name(path.name + ".json").write_text(json.dumps(meta or {}, indent=2, sort_keys=True))


def load_latents(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _LAT_HEADER.size:
        raise ValueError("LAT1 file shorter than its header")
    magic, n, d = _LAT_HEADER.unpack_from(raw)
    if magic != LAT_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if len(raw) != _LAT_HEADER.size + 4 * n * d:
        raise ValueError(f"LAT1 payload size mismatch for ({n}, {d})")
    lat = np.frombuffer(raw, dtype="<f4", offset=_LAT_HEADER.size).reshape(n, d).copy()
    side = path.with_name(path.name + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return lat, meta
