"""Experiment configuration: presets plus YAML overrides."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from ..chanmodel import ArrayGeometry, JitterConfig, LayoutConfig, SceneConfig
from ..latentgen import GeneratorConfig
from ..nncore import DecoderConfig, EncoderConfig
from ..reprlearn import ContrastiveConfig, DecoderTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SceneSection:
    n_locations: int = 64
    n_bs: int = 2
    scene: SceneConfig = field(default_factory=SceneConfig)
    layout: LayoutConfig = field(default_factory=LayoutConfig)


@dataclass
class EvalSection:
    n_layers: tuple[int, ...] = (1, 2)
    methods: tuple[str, ...] = ("original-traversal", "mean-representation", "generated-1", "generated-10")
    smoothing_window: int = 51
    gen_seed: int = 0


@dataclass
class ExperimentConfig:
    preset: str
    scene: SceneSection
    encoder: EncoderConfig
    contrastive: ContrastiveConfig
    decoder: DecoderConfig
    decoder_training: DecoderTrainConfig
    generator: GeneratorConfig
    evaluation: EvalSection
    seed: int = 0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        g = self.scene.scene.geometry
        return (2, self.scene.scene.n_subcarriers, g.n_r * g.n_t)

    def to_dict(self) -> dict:
        return asdict(self)


METHODS = ("original-traversal", "mean-representation", "generated-1", "generated-10")

DESK = {
    "preset": "desk",
    "seed": 0,
    "scene": {
        "n_locations": 64, "n_bs": 2,
        "scene": {"n_subcarriers": 16, "bandwidth": 1.92e6, "n_times": 8, "noise_var": 1.0,
                  "geometry": {"n_x": 2, "n_y": 2, "n_z": 2, "n_r": 2, "phase_const": math.pi}},
        "layout": {"jitter": {"redraw_phase": False, "phase_sigma": 0.5}},
    },
    "encoder": {"patch_size": 4, "d_model": 64, "n_heads": 4, "depth": 2, "n_re": 32},
    "contrastive": {"temperature": 5e-3, "momentum": 0.99, "queue_size": 512, "batch_size": 16,
                    "steps": 4000, "lr": 3e-4},
    "decoder": {"d_model": 64, "n_heads": 4, "depth": 2, "head_hidden": 128},
    "decoder_training": {"steps": 4000, "batch_size": 32, "lr": 1e-3},
    "generator": {"n_steps": 100, "schedule": "scaled", "width": 32, "d_cond": 64, "n_heads": 1,
                  "lr": 2e-3, "steps": 4000, "batch_size": 64},
    "evaluation": {"n_layers": [1, 2], "smoothing_window": 51},
}

PAPER = {
    "preset": "paper",
    "seed": 0,
    "scene": {
        "n_locations": 3030, "n_bs": 2,
        "scene": {"n_subcarriers": 128, "bandwidth": 1.92e6, "n_times": 50, "noise_var": 1.0,
                  "geometry": {"n_x": 8, "n_y": 2, "n_z": 2, "n_r": 4, "phase_const": math.pi}},
        "layout": {"grid_spacing": 2.0},
    },
    # 6 (encoder) and 12 (decoder) heads do not divide 512; 8 is the nearest valid count
    "encoder": {"patch_size": 16, "d_model": 512, "n_heads": 8, "depth": 4, "n_re": 128},
    "contrastive": {"temperature": 5e-3, "momentum": 0.99, "queue_size": 16384, "batch_size": 64,
                    "steps": 100000, "lr": 5e-5},
    "decoder": {"d_model": 512, "n_heads": 8, "depth": 8, "head_hidden": 1024},
    "decoder_training": {"steps": 100000, "batch_size": 64, "lr": 5e-5},
    "generator": {"n_steps": 600, "schedule": "paper", "width": 64, "d_cond": 256, "n_heads": 8,
                  "lr": 5e-3, "steps": 100000, "batch_size": 256},
    "evaluation": {"n_layers": [1, 2, 3, 4], "smoothing_window": 51},
}

PRESETS = {"desk": DESK, "paper": PAPER}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, d: dict):
    """Construct a (possibly nested) dataclass from a plain dict, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) for {cls.__name__}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in d.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default) and isinstance(value, dict):
            value = _build(type(default), value)
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        elif isinstance(default, float) and isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-3) as strings
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{cls.__name__}.{name}: expected a number, got {value!r}") from None
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def build_config(raw: dict | None = None, seed: int | None = None) -> ExperimentConfig:
    raw = dict(raw or {})
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    d = deep_merge(PRESETS[preset], raw)
    if seed is not None:
        d["seed"] = seed
    unknown = set(d) - {f.name for f in fields(ExperimentConfig)}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sc = d["scene"]
    scene_sec = SceneSection(
        n_locations=int(sc.get("n_locations", 64)), n_bs=int(sc.get("n_bs", 2)),
        scene=_build(SceneConfig, {**sc.get("scene", {}), "rng_seed": int(d["seed"]),
                                   "geometry": _build(ArrayGeometry, sc.get("scene", {}).get("geometry", {}))}),
        layout=_build(LayoutConfig, {**sc.get("layout", {}),
                                     "jitter": _build(JitterConfig, sc.get("layout", {}).get("jitter", {}))}),
    )
    if scene_sec.n_locations < 1 or scene_sec.n_bs < 1:
        raise ConfigError("n_locations and n_bs must be >= 1")
    g = scene_sec.scene.geometry
    image = (2, scene_sec.scene.n_subcarriers, g.n_r * g.n_t)
    enc = _build(EncoderConfig, {**d["encoder"], "input_shape": image})
    dec_raw = dict(d["decoder"])
    dec_raw.setdefault("latent_grid", DecoderConfig.default_grid(enc.n_re))
    dec = _build(DecoderConfig, {**dec_raw, "n_re": enc.n_re, "output_shape": image})
    seed_ = int(d["seed"])
    contrastive = _build(ContrastiveConfig, {"seed": seed_, **d["contrastive"]})
    dec_train = _build(DecoderTrainConfig, {"seed": seed_, **d["decoder_training"]})
    gen = _build(GeneratorConfig, {"seed": seed_, **d["generator"]})
    if enc.n_re % 4:
        raise ConfigError("n_re must be divisible by 4 for the latent U-Net")
    ev = _build(EvalSection, d.get("evaluation", {}))
    bad = [m for m in ev.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown evaluation method(s): {', '.join(bad)}")
    if any(not 1 <= n <= min(g.n_r, g.n_t) for n in ev.n_layers):
        raise ConfigError("n_layers entries must lie in [1, min(N_R, N_T)]")
    return ExperimentConfig(preset, scene_sec, enc, contrastive, dec, dec_train, gen, ev, seed_)


def load_config(path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
    if path is None:
        return build_config({}, seed)
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config parse error: {str(exc).splitlines()[0]}") from None
    return build_config(raw, seed)
