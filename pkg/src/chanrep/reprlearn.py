"""Contrastive encoder training with a momentum key encoder and a FIFO
negative queue, MSE decoder training, and dataset encoding."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .nncore import ChannelDecoder, ChannelEncoder, DecoderConfig, EncoderConfig, Projector

LN2 = math.log(2.0)


@dataclass
class ContrastiveConfig:
    temperature: float = 5e-3
    momentum: float = 0.99
    queue_size: int = 512
    batch_size: int = 16
    steps: int = 1200
    lr: float = 1e-3
    warmup_frac: float = 0.05
    proj_hidden: int = 64
    proj_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.queue_size < 1 or self.batch_size < 1:
            raise ValueError("queue_size and batch_size must be >= 1")


@dataclass
class DecoderTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_frac: float = 0.05
    seed: int = 0


class Representation(NamedTuple):
    f: np.ndarray
    source: tuple[int, int, int]   # (bs_id, ue_id, t)


class NegativeQueue:
    """Fixed-capacity FIFO of L2-normalized keys; the oldest keys are evicted first."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self._buf = torch.zeros(capacity, dim)
        self._ptr = 0
        self.size = 0

    def enqueue(self, keys: torch.Tensor) -> None:
        keys = keys.detach()
        if keys.shape[0] > self.capacity:
            keys = keys[-self.capacity:]
        for row in keys:
            self._buf[self._ptr] = row
            self._ptr = (self._ptr + 1) % self.capacity
        self.size = min(self.size + keys.shape[0], self.capacity)

    def keys(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        if self.size < self.capacity:
            return self._buf[:self.size].clone()
        return torch.cat([self._buf[self._ptr:], self._buf[:self._ptr]])

    def __len__(self):
        return self.size


def infonce_loss(query, positive_key, queue, temperature: float) -> torch.Tensor:
    """Base-2 InfoNCE with the positive included in the denominator.

    Accepts single vectors or batches (B, d); returns the batch mean.  Inputs
    are expected to be L2-normalized.
    """
    q = torch.as_tensor(query)
    k = torch.as_tensor(positive_key, dtype=q.dtype)
    negs = torch.as_tensor(queue, dtype=q.dtype)
    if q.ndim == 1:
        q, k = q[None], k[None]
    if negs.ndim != 2 or negs.shape[0] == 0:
        raise ValueError("queue must be a non-empty (Q, d) array")
    for name, x in (("query", q), ("key", k), ("queue", negs)):
        if torch.any(torch.linalg.vector_norm(x, dim=-1) == 0):
            raise ValueError(f"zero-norm {name} vector")
    pos = (q * k).sum(-1, keepdim=True)
    logits = torch.cat([pos, q @ negs.T], dim=1) / temperature
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean() / LN2


def momentum_update(neg_params, pos_params, beta: float):
    """theta_neg <- beta theta_neg + (1 - beta) theta_pos.

    Torch parameters are updated in place (and returned); numpy arrays give
    new arrays.
    """
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    neg_params, pos_params = list(neg_params), list(pos_params)
    if len(neg_params) != len(pos_params):
        raise ValueError("parameter lists differ in length")
    out = []
    for pn, pp in zip(neg_params, pos_params):
        if pn.shape != pp.shape:
            raise ValueError(f"parameter shape mismatch {tuple(pn.shape)} vs {tuple(pp.shape)}")
        if isinstance(pn, torch.Tensor):
            with torch.no_grad():
                pn.mul_(beta).add_(pp.detach(), alpha=1 - beta)
            out.append(pn)
        else:
            out.append(beta * np.asarray(pn) + (1 - beta) * np.asarray(pp))
    return out


def warmup_lr(step: int, total: int, base_lr: float, warmup_frac: float, decay_frac: float = 0.0) -> float:
    """Linear warmup, then constant; optionally a linear decay to 0 over the last decay_frac of steps."""
    n_warm = max(1, int(round(warmup_frac * total)))
    lr = base_lr * min(1.0, (step + 1) / n_warm)
    if decay_frac > 0:
        lr *= min(1.0, (total - step) / (decay_frac * total))
    return lr


def _write_jsonl(path, records: Iterable[dict]) -> None:
    if path is None:
        return
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


class EncoderPair(NamedTuple):
    encoder: ChannelEncoder        # the query encoder; produces representations
    key_encoder: ChannelEncoder
    projector: Projector
    key_projector: Projector


def train_encoder(images: torch.Tensor, enc_cfg: EncoderConfig, cfg: ContrastiveConfig,
                  log_path=None) -> tuple[EncoderPair, list[dict]]:
    """Contrastive training on channel images of shape (E, N_t, 2, A, W).

    Positives are two different time slices of the same entry; negatives come
    from the queue of past keys.  The first ceil(Q / batch) steps only fill
    the queue.
    """
    n_ent, n_t = images.shape[:2]
    if n_t < 2:
        raise ValueError("need N_t >= 2 for temporal positive pairs")
    if n_ent * n_t < cfg.queue_size:
        raise ValueError(f"dataset too small for queue warmup: {n_ent * n_t} samples < queue {cfg.queue_size}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    enc = ChannelEncoder(enc_cfg)
    proj = Projector(enc_cfg.n_re, cfg.proj_hidden, cfg.proj_dim)
    key_enc, key_proj = copy.deepcopy(enc), copy.deepcopy(proj)
    for p in list(key_enc.parameters()) + list(key_proj.parameters()):
        p.requires_grad_(False)
    params = list(enc.parameters()) + list(proj.parameters())
    key_params = list(key_enc.parameters()) + list(key_proj.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    queue = NegativeQueue(cfg.queue_size, cfg.proj_dim)
    n_fill = math.ceil(cfg.queue_size / cfg.batch_size)
    b = cfg.batch_size
    log = []

    def draw():
        ents = rng.choice(n_ent, size=b, replace=n_ent < b)
        t1 = rng.integers(0, n_t, size=b)
        t2 = (t1 + rng.integers(1, n_t, size=b)) % n_t
        return images[ents, t1], images[ents, t2]

    for step in range(n_fill + cfg.steps):
        x_q, x_k = draw()
        with torch.no_grad():
            k = F.normalize(key_proj(key_enc(x_k)), dim=1)
        rec = {"step": step, "queue_fill": 0, "lr": 0.0, "loss": None}
        if step >= n_fill:
            lr = warmup_lr(step - n_fill, cfg.steps, cfg.lr, cfg.warmup_frac)
            for g in opt.param_groups:
                g["lr"] = lr
            q = F.normalize(proj(enc(x_q)), dim=1)
            loss = infonce_loss(q, k, queue.keys(), cfg.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            momentum_update(key_params, params, cfg.momentum)
            rec.update(lr=lr, loss=float(loss.item()))
        queue.enqueue(k)
        rec["queue_fill"] = len(queue)
        log.append(rec)
    _write_jsonl(log_path, log)
    return EncoderPair(enc.eval(), key_enc.eval(), proj.eval(), key_proj.eval()), log


@torch.no_grad()
def encode_images(encoder: ChannelEncoder, images: torch.Tensor, chunk: int = 256) -> np.ndarray:
    """Representations for images (..., 2, A, W) -> (..., N_re) float64."""
    lead = images.shape[:-3]
    flat = images.reshape((-1,) + tuple(images.shape[-3:]))
    encoder.eval()
    out = torch.cat([encoder(flat[i:i + chunk]) for i in range(0, flat.shape[0], chunk)])
    return out.double().numpy().reshape(tuple(lead) + (out.shape[-1],))


def encode_dataset(ds, encoder: ChannelEncoder, image_scale: float) -> list[Representation]:
    from .nncore import channel_to_image

    _, n_k, n_r, n_tx = ds.shape
    if (n_k, n_r * n_tx) != tuple(encoder.cfg.input_shape[1:]):
        raise ValueError(f"dataset shape {ds.shape} does not match encoder input {encoder.cfg.input_shape}")
    reps = encode_images(encoder, channel_to_image(ds.stacked(), image_scale))
    return [Representation(reps[i, t], (e.bs_id, e.ue_id, t))
            for i, e in enumerate(ds.entries) for t in range(reps.shape[1])]


def mean_representation(reps: Sequence) -> np.ndarray:
    """Arithmetic mean of one location's representations."""
    arr = [r.f if isinstance(r, Representation) else np.asarray(r) for r in reps]
    if len(arr) == 0:
        raise ValueError("no representations to average")
    return np.mean(np.stack(arr), axis=0)


def train_decoder(reps: np.ndarray, images: torch.Tensor, dec_cfg: DecoderConfig, cfg: DecoderTrainConfig,
                  log_path=None) -> tuple[ChannelDecoder, list[dict]]:
    """Fit decoder(F) ~ image by minibatch MSE over all (F, H) pairs.

    ``reps`` is (..., N_re) aligned with ``images`` (..., 2, A, W).
    """
    f = torch.as_tensor(reps, dtype=torch.float32).reshape(-1, reps.shape[-1])
    y = images.reshape((-1,) + tuple(images.shape[-3:]))
    if f.shape[0] == 0 or f.shape[0] != y.shape[0]:
        raise ValueError("need a non-empty, aligned set of (F, H) pairs")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dec = ChannelDecoder(dec_cfg)
    opt = torch.optim.Adam(dec.parameters(), lr=cfg.lr)
    n = f.shape[0]
    log = []
    for step in range(cfg.steps):
        idx = torch.as_tensor(rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size))
        lr = warmup_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac)
        for g in opt.param_groups:
            g["lr"] = lr
        loss = F.mse_loss(dec(f[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.append({"step": step, "loss": float(loss.item()), "lr": lr})
    _write_jsonl(log_path, log)
    return dec.eval(), log


@torch.no_grad()
def decode(decoder: ChannelDecoder, reps: np.ndarray, chunk: int = 256) -> torch.Tensor:
    f = torch.as_tensor(np.asarray(reps), dtype=torch.float32)
    lead = f.shape[:-1]
    f = f.reshape(-1, f.shape[-1])
    out = torch.cat([decoder(f[i:i + chunk]) for i in range(0, f.shape[0], chunk)])
    return out.reshape(tuple(lead) + tuple(out.shape[1:]))


def retrieval_stats(reps: np.ndarray) -> dict:
    """Top-1 same-entry retrieval accuracy and mean positive/negative cosine similarity.

    ``reps`` is (E, N_t, d).  For every (entry, t) the nearest other sample by
    cosine similarity counts as a hit when it belongs to the same entry.
    """
    e, n_t, d = reps.shape
    z = reps.reshape(-1, d)
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    sim = z @ z.T
    labels = np.repeat(np.arange(e), n_t)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(z), dtype=bool)
    masked = np.where(eye, -np.inf, sim)
    hits = same[np.arange(len(z)), np.argmax(masked, axis=1)]
    return {"top1": float(hits.mean()),
            "pos_sim": float(sim[same & ~eye].mean()),
            "neg_sim": float(sim[~same].mean())}
