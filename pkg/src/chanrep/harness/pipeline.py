"""Artifact-producing stages: dataset generation and the three training stages.

Every stage reads and writes fixed file names inside one output directory,
so stages can be rerun independently once their prerequisites exist.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from ..chanmodel import Dataset, build_dataset, load_dataset, sample_scene, save_dataset
from ..latentgen import GeneratorConfig, LatentGenerator, NoiseNet, make_schedule, train_generator
from ..nncore import (ChannelDecoder, ChannelEncoder, DecoderConfig, EncoderConfig, channel_to_image,
                      image_to_channel, load_checkpoint, load_module_state, save_module)
from ..precode import nmse
from ..reprlearn import decode, encode_images, train_decoder, train_encoder
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("chanrep")

DATASET = "dataset.crt"
ENCODER = "encoder.ckpt"
DECODER = "decoder.ckpt"
GENERATOR = "generator.ckpt"
STAGES = ("encoder", "decoder", "generator")


class MissingArtifactError(FileNotFoundError):
    pass


def single_thread() -> None:
    """Pin torch to one thread: the budget assumes one core and it removes reduction-order noise."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def _require(path: Path, what: str) -> Path:
    if not path.exists() or not Path(str(path) + ".json").exists():
        raise MissingArtifactError(f"missing {what}: {path}")
    return path


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# dataset


def cmd_gen_dataset(cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.scene
    links = sample_scene(sc.scene, sc.n_locations, sc.n_bs, sc.layout)
    ds = build_dataset(links, sc.scene, meta={"preset": cfg.preset, "seed": cfg.seed,
                                              "n_locations": sc.n_locations, "n_bs": sc.n_bs})
    path = out / DATASET
    save_dataset(ds, path)
    log.info("dataset: %d entries, tensor %s, norm_scale %.4g -> %s", len(ds), ds.shape, ds.norm_scale, path)
    return path


def load_experiment_dataset(cfg: ExperimentConfig, out_dir) -> Dataset:
    ds = load_dataset(_require(Path(out_dir) / DATASET, "dataset"))
    if ds.shape != cfg.scene.scene.tensor_shape:
        raise ConfigError(f"dataset tensor {ds.shape} does not match config {cfg.scene.scene.tensor_shape}")
    return ds


def image_scale(ds: Dataset) -> float:
    """Maps channels to images with unit RMS per real coordinate (times 1/sqrt 2)."""
    n_t, n_k, n_r, n_tx = ds.shape
    return float(np.sqrt(n_k * n_r * n_tx) / ds.norm_scale)


def dataset_images(ds: Dataset) -> torch.Tensor:
    return channel_to_image(ds.stacked(), image_scale(ds))


# --------------------------------------------------------------------------
# checkpoints


def load_encoder(out_dir) -> tuple[ChannelEncoder, dict]:
    arrays, meta = load_checkpoint(_require(Path(out_dir) / ENCODER, "encoder checkpoint"))
    cfg = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    return load_module_state(ChannelEncoder(cfg), arrays).eval(), meta


def load_decoder(out_dir) -> tuple[ChannelDecoder, dict]:
    arrays, meta = load_checkpoint(_require(Path(out_dir) / DECODER, "decoder checkpoint"))
    cfg = DecoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    return load_module_state(ChannelDecoder(cfg), arrays).eval(), meta


def load_generator(out_dir) -> tuple[LatentGenerator, dict]:
    arrays, meta = load_checkpoint(_require(Path(out_dir) / GENERATOR, "generator checkpoint"))
    gcfg = GeneratorConfig(**meta["config"])
    net = load_module_state(NoiseNet(meta["n_re"], gcfg), arrays)
    gen = LatentGenerator(net, make_schedule(gcfg.n_steps, gcfg.schedule),
                          np.asarray(meta["lat_mean"]), np.asarray(meta["lat_std"]))
    return gen, meta


def dataset_representations(ds: Dataset, encoder: ChannelEncoder) -> np.ndarray:
    """(E, N_t, N_re) representations of every stored channel."""
    images = dataset_images(ds)
    if tuple(encoder.cfg.input_shape) != tuple(images.shape[-3:]):
        raise ConfigError("encoder input shape does not match the dataset")
    return encode_images(encoder, images)


def reconstruct(decoder: ChannelDecoder, reps: np.ndarray, ds: Dataset) -> np.ndarray:
    """Decode representations back to complex channels in dataset units."""
    _, _, n_r, n_tx = ds.shape
    return image_to_channel(decode(decoder, reps), n_r, n_tx, image_scale(ds))


# --------------------------------------------------------------------------
# training


def cmd_train(stage: str, cfg: ExperimentConfig, out_dir) -> Path:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    out = Path(out_dir)
    ds = load_experiment_dataset(cfg, out)
    if stage == "encoder":
        if tuple(cfg.encoder.input_shape) != tuple(dataset_images(ds).shape[-3:]):
            raise ConfigError("encoder input shape does not match the dataset")
        pair, _ = train_encoder(dataset_images(ds), cfg.encoder, cfg.contrastive, out / "encoder_log.jsonl")
        path = out / ENCODER
        save_module(path, pair.encoder, {"config": asdict(cfg.encoder), "image_scale": image_scale(ds),
                                         "training": asdict(cfg.contrastive)})
    elif stage == "decoder":
        encoder, _ = load_encoder(out)
        reps = dataset_representations(ds, encoder)
        dec, records = train_decoder(reps, dataset_images(ds), cfg.decoder, cfg.decoder_training)
        final = nmse(ds.stacked(), reconstruct(dec, reps, ds))
        records.append({"step": cfg.decoder_training.steps, "final_nmse_db": final})
        _jsonl(out / "decoder_log.jsonl", records)
        path = out / DECODER
        save_module(path, dec, {"config": asdict(cfg.decoder), "final_nmse_db": final,
                                "training": asdict(cfg.decoder_training)})
        log.info("decoder: training-set NMSE %.3f dB", final)
    else:
        encoder, _ = load_encoder(out)
        _require(out / DECODER, "decoder checkpoint")
        reps = dataset_representations(ds, encoder)
        gen, _ = train_generator(reps, ds.locs(), reps.shape[-1], cfg.generator, out / "generator_log.jsonl")
        path = out / GENERATOR
        save_module(path, gen.net, {"config": asdict(cfg.generator), "n_re": int(reps.shape[-1]),
                                    "lat_mean": gen.lat_mean.tolist(), "lat_std": gen.lat_std.tolist()})
    log.info("%s checkpoint -> %s", stage, path)
    return path


def _jsonl(path: Path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
