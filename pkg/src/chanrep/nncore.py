"""Differentiable building blocks: attention, encodings, patch embedding,
transformer blocks, the channel encoder/decoder, a conditional 1-D U-Net, a
finite-difference gradient checker and the flat f32 checkpoint format.

Layout convention: tokens are rows, so a token batch is (B, T, d_model) and
projections right-multiply (x @ W^T via nn.Linear).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


# --------------------------------------------------------------------------
# encodings


def positional_encoding(pos: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: sin on even dims, cos on odd dims."""
    if d_model % 2:
        raise ValueError("d_model must be even")
    if pos < 0:
        raise ValueError("pos must be >= 0")
    i = np.arange(d_model // 2)
    ang = pos / 10000.0 ** (2 * i / d_model)
    out = np.empty(d_model)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


def sinusoidal_table(positions: torch.Tensor, d_model: int) -> torch.Tensor:
    """Batched :func:`positional_encoding`; positions (...,) -> (..., d_model)."""
    if d_model % 2:
        raise ValueError("d_model must be even")
    i = torch.arange(d_model // 2, dtype=torch.float64, device=positions.device)
    ang = positions.to(torch.float64)[..., None] / 10000.0 ** (2 * i / d_model)
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)
    return out.to(torch.get_default_dtype())


# --------------------------------------------------------------------------
# attention


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(q k^T / sqrt(d)) v over the last two axes; returns (output, weights)."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    w = torch.softmax(scores, dim=-1)
    return w @ v, w


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, t, d = x.shape
    return x.view(b, t, n_heads, d // n_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, t, d = x.shape
    return x.transpose(1, 2).reshape(b, t, h * d)


class SelfAttention(nn.Module):
    """Multi-head self-attention; per-head width d_model / n_heads, concat + output projection."""

    def __init__(self, d_model: int, n_heads: int, zero_out: bool = False):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[-1] != self.q.in_features:
            raise ValueError(f"expected (B, T, {self.q.in_features}), got {tuple(x.shape)}")
        h = self.n_heads
        o, w = attention(_split_heads(self.q(x), h), _split_heads(self.k(x), h), _split_heads(self.v(x), h))
        self.last_weights = w.detach()
        return self.out(_merge_heads(o))


class CrossAttention(nn.Module):
    """Residual cross-attention from feature tokens to a conditioning context.

    Queries come from the input tokens; keys and values from the sum of the
    condition embedding and the time embedding (one or more context tokens).
    """

    def __init__(self, d_in: int, d_cond: int, n_heads: int = 1, d_atten: int | None = None):
        super().__init__()
        d_atten = d_atten or d_in
        if d_atten % n_heads:
            raise ValueError("d_atten must be divisible by n_heads")
        self.n_heads = n_heads
        self.q = nn.Linear(d_in, d_atten)
        self.k = nn.Linear(d_cond, d_atten)
        self.v = nn.Linear(d_cond, d_atten)
        self.out = nn.Linear(d_atten, d_in)

    def forward(self, x: torch.Tensor, cond_embed: torch.Tensor, time_embed: torch.Tensor) -> torch.Tensor:
        if cond_embed.shape != time_embed.shape:
            raise ValueError("condition and time embeddings must share a shape")
        ctx = cond_embed + time_embed
        if ctx.ndim == 2:
            ctx = ctx[:, None, :]
        if x.shape[-1] != self.q.in_features or ctx.shape[-1] != self.k.in_features:
            raise ValueError("cross-attention shape mismatch")
        h = self.n_heads
        o, _ = attention(_split_heads(self.q(x), h), _split_heads(self.k(ctx), h), _split_heads(self.v(ctx), h))
        return x + self.out(_merge_heads(o))


# --------------------------------------------------------------------------
# transformer pieces


def patchify(img: torch.Tensor, ph: int, pw: int) -> torch.Tensor:
    """(B, C, A, W) -> (B, (A/ph)(W/pw), C*ph*pw), row-major over the patch grid."""
    b, c, a, w = img.shape
    if a % ph or w % pw:
        raise ValueError(f"patch ({ph},{pw}) does not divide ({a},{w})")
    x = img.reshape(b, c, a // ph, ph, w // pw, pw)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (a // ph) * (w // pw), c * ph * pw)


def unpatchify(tokens: torch.Tensor, c: int, a: int, w: int, ph: int, pw: int) -> torch.Tensor:
    b = tokens.shape[0]
    x = tokens.reshape(b, a // ph, w // pw, c, ph, pw)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(b, c, a, w)


class PatchEmbed(nn.Module):
    def __init__(self, in_ch: int, patch: int | tuple[int, int], d_model: int):
        super().__init__()
        self.ph, self.pw = (patch, patch) if isinstance(patch, int) else patch
        self.proj = nn.Linear(in_ch * self.ph * self.pw, d_model)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.proj(patchify(img, self.ph, self.pw))


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, zero_out: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)
        if zero_out:
            nn.init.zeros_(self.fc2.weight)
            nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(LN(x)), then + MLP(LN(.))."""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads, zero_out=True)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = MLP(d_model, mlp_ratio * d_model, d_model, zero_out=True)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


def channel_to_image(h, scale: float = 1.0) -> torch.Tensor:
    """Complex (..., N_k, N_R, N_T) -> real (..., 2, N_k, N_R*N_T), multiplied by ``scale``."""
    h = np.asarray(h) * scale
    flat = h.reshape(h.shape[:-2] + (h.shape[-2] * h.shape[-1],))
    return torch.from_numpy(np.stack([flat.real, flat.imag], axis=-3).astype(np.float32))


def image_to_channel(img, n_r: int, n_t: int, scale: float = 1.0) -> np.ndarray:
    x = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    z = (x[..., 0, :, :].astype(np.float64) + 1j * x[..., 1, :, :]) / scale
    return z.reshape(z.shape[:-1] + (n_r, n_t))


@dataclass
class EncoderConfig:
    input_shape: tuple[int, int, int] = (2, 16, 16)
    patch_size: int = 4
    d_model: int = 64
    n_heads: int = 4
    depth: int = 2
    n_re: int = 32

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        _, a, w = self.input_shape
        if a % self.patch_size or w % self.patch_size:
            raise ValueError("patch_size must divide both spatial dims")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even")

    @property
    def n_tokens(self) -> int:
        _, a, w = self.input_shape
        return (a // self.patch_size) * (w // self.patch_size)


class ChannelEncoder(nn.Module):
    """Patch embed + positional encoding + L transformer blocks + mean pool + MLP head."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.input_shape[0]
        self.embed = PatchEmbed(c, cfg.patch_size, cfg.d_model)
        self.register_buffer("pos", sinusoidal_table(torch.arange(cfg.n_tokens), cfg.d_model))
        self.blocks = nn.ModuleList(TransformerBlock(cfg.d_model, cfg.n_heads) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(cfg.d_model)
        self.head = MLP(cfg.d_model, cfg.d_model, cfg.n_re)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = self.embed(img) + self.pos.to(img.dtype)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln(x).mean(dim=1))


class Projector(nn.Module):
    """Two-layer MLP appended to the encoder during contrastive training only."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.mlp = MLP(d_in, d_hidden, d_out)

    def forward(self, x):
        return self.mlp(x)


@dataclass
class DecoderConfig:
    n_re: int = 32
    output_shape: tuple[int, int, int] = (2, 16, 16)
    latent_grid: tuple[int, int] = (4, 4)
    d_model: int = 64
    n_heads: int = 4
    depth: int = 2
    head_hidden: int = 128

    def __post_init__(self):
        self.output_shape = tuple(self.output_shape)
        self.latent_grid = tuple(self.latent_grid)
        c, a, w = self.output_shape
        gh, gw = self.latent_grid
        if self.n_re != c * gh * gw:
            raise ValueError(f"n_re={self.n_re} must equal {c}*{gh}*{gw}")
        if a % gh or w % gw:
            raise ValueError("latent grid must divide the output image")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @staticmethod
    def default_grid(n_re: int, channels: int = 2) -> tuple[int, int]:
        cells = n_re // channels
        gh = int(math.isqrt(cells))
        while cells % gh:
            gh -= 1
        return gh, cells // gh


class ChannelDecoder(nn.Module):
    """Representation -> channel image, mirroring the encoder.

    The latent is viewed as a (C, gh, gw) image with patch size 1; each token
    is expanded by an MLP head into one (C, A/gh, W/gw) output patch.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        c, a, w = cfg.output_shape
        gh, gw = cfg.latent_grid
        self.out_patch = (a // gh, w // gw)
        self.embed = PatchEmbed(c, 1, cfg.d_model)
        self.register_buffer("pos", sinusoidal_table(torch.arange(gh * gw), cfg.d_model))
        self.blocks = nn.ModuleList(TransformerBlock(cfg.d_model, cfg.n_heads) for _ in range(cfg.depth))
        self.ln = nn.LayerNorm(cfg.d_model)
        self.head = MLP(cfg.d_model, cfg.head_hidden, c * self.out_patch[0] * self.out_patch[1])

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        c, a, w = self.cfg.output_shape
        gh, gw = self.cfg.latent_grid
        x = self.embed(f.reshape(-1, c, gh, gw)) + self.pos.to(f.dtype)
        for blk in self.blocks:
            x = blk(x)
        return unpatchify(self.head(self.ln(x)), c, a, w, *self.out_patch)


# --------------------------------------------------------------------------
# conditional 1-D U-Net


class UNet1D(nn.Module):
    """Noise predictor over an N_re latent treated as a 1-channel 1-D signal.

    Two factor-2 down/up stages with skips; a cross-attention layer follows
    every convolution.  Fixed sinusoidal position channels are appended to
    the input so that convolutions can tell latent coordinates apart.
    """

    def __init__(self, n_re: int, width: int = 32, d_cond: int = 64, n_heads: int = 1, pos_channels: int = 8):
        super().__init__()
        if n_re % 4:
            raise ValueError("n_re must be divisible by 4")
        self.n_re = n_re
        c1, c2, c3 = width, 2 * width, 4 * width
        self.register_buffer("pos", sinusoidal_table(torch.arange(n_re), pos_channels).T.contiguous())
        self.conv_in = nn.Conv1d(1 + pos_channels, c1, 3, padding=1)
        self.down1 = nn.Conv1d(c1, c2, 4, stride=2, padding=1)
        self.down2 = nn.Conv1d(c2, c3, 4, stride=2, padding=1)
        self.mid = nn.Conv1d(c3, c3, 3, padding=1)
        self.up2 = nn.ConvTranspose1d(c3, c2, 4, stride=2, padding=1)
        self.fuse2 = nn.Conv1d(2 * c2, c2, 3, padding=1)
        self.up1 = nn.ConvTranspose1d(c2, c1, 4, stride=2, padding=1)
        self.fuse1 = nn.Conv1d(2 * c1, c1, 3, padding=1)
        self.conv_out = nn.Conv1d(c1, 1, 1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)
        xa = lambda c: CrossAttention(c, d_cond, n_heads)
        self.xattn = nn.ModuleDict({
            "in": xa(c1), "down1": xa(c2), "down2": xa(c3), "mid": xa(c3),
            "up2": xa(c2), "up1": xa(c1)})

    def _attend(self, name: str, h: torch.Tensor, cond, temb) -> torch.Tensor:
        # conv maps are (B, C, L); attention wants tokens as rows
        return self.xattn[name](h.transpose(1, 2), cond, temb).transpose(1, 2)

    def forward(self, latent: torch.Tensor, cond_embed: torch.Tensor, time_embed: torch.Tensor) -> torch.Tensor:
        if latent.shape[-1] != self.n_re:
            raise ValueError(f"latent length {latent.shape[-1]} != {self.n_re}")
        act = F.silu
        b = latent.shape[0]
        x = torch.cat([latent[:, None, :], self.pos.to(latent.dtype).expand(b, -1, -1)], dim=1)
        h1 = self._attend("in", act(self.conv_in(x)), cond_embed, time_embed)
        h2 = self._attend("down1", act(self.down1(h1)), cond_embed, time_embed)
        h3 = self._attend("down2", act(self.down2(h2)), cond_embed, time_embed)
        h3 = self._attend("mid", act(self.mid(h3)), cond_embed, time_embed)
        u2 = act(self.fuse2(torch.cat([self.up2(h3), h2], dim=1)))
        u2 = self._attend("up2", u2, cond_embed, time_embed)
        u1 = act(self.fuse1(torch.cat([self.up1(u2), h1], dim=1)))
        u1 = self._attend("up1", u1, cond_embed, time_embed)
        return self.conv_out(u1)[:, 0, :]


# --------------------------------------------------------------------------
# gradient check


def grad_check(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-3,
               max_coords: int | None = 48, seed: int = 0, zero_tol: float = 1e-6) -> float:
    """Max (over tensors) norm-wise relative error of autograd vs central differences.

    ``fn`` must return a scalar and read ``params`` (double tensors with
    requires_grad).  At most ``max_coords`` random coordinates per tensor are
    probed.  When both gradients are below ``zero_tol`` in norm (e.g. the key
    bias of softmax attention, which has exactly zero gradient) the absolute
    difference is reported instead, since a ratio of round-off is meaningless.
    """
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            n = flat.numel()
            idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                num[j] = (fp - fm) / (2 * eps)
            ana = g.view(-1)[torch.as_tensor(idx)].double().numpy()
            denom = max(np.linalg.norm(ana), np.linalg.norm(num))
            denom = 1.0 if denom < zero_tol else denom
            worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, named: Iterable[tuple[str, torch.Tensor | np.ndarray]], meta: dict | None = None) -> None:
    """Flat little-endian f32 payload ``path`` + JSON manifest ``path.json``."""
    path = Path(path)
    manifest, offset = [], 0
    with open(path, "wb") as f:
        for name, arr in named:
            a = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr)
            buf = np.ascontiguousarray(a, dtype="<f4").tobytes()
            manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
            f.write(buf)
            offset += len(buf)
    Path(str(path) + ".json").write_text(json.dumps({"arrays": manifest, "meta": meta or {}}, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    man = json.loads(Path(str(path) + ".json").read_text())
    out = {}
    for item in man["arrays"]:
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        end = item["offset"] + 4 * count
        if end > len(raw):
            raise ValueError(f"checkpoint truncated at {item['name']}")
        out[item["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=item["offset"]).reshape(item["shape"]).copy()
    return out, man.get("meta", {})


def save_module(path, module: nn.Module, meta: dict | None = None) -> None:
    save_checkpoint(path, module.state_dict().items(), meta)


def load_module_state(module: nn.Module, arrays: dict[str, np.ndarray]) -> nn.Module:
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    module.load_state_dict(state)
    return module


def config_dict(cfg) -> dict:
    return asdict(cfg)
