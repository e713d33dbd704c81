"""Evaluation sweeps, CSV export and the 2-D projection."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..chanmodel import Dataset
from ..latentgen import save_latents, select_best
from ..precode import nmse, representative_traversal, stack_dual
from ..reprlearn import mean_representation
from .config import ExperimentConfig
from .pipeline import (dataset_representations, load_decoder, load_encoder, load_experiment_dataset,
                       load_generator, reconstruct)

log = logging.getLogger("chanrep")

EVAL_CSV = "eval.csv"
CDF_CSV = "eval_cdf.csv"
LINE_CSV = "eval_line.csv"
SUMMARY_JSON = "eval_summary.json"
PROJECTION_CSV = "projection.csv"
LATENTS = "generated.lat"
N_GEN = 10


@dataclass
class EvalReport:
    rows: list[tuple[int, str, str, float]]
    nmse_db: float | None = None
    summary: dict = field(default_factory=dict)
    latents: np.ndarray | None = None      # (E, N_GEN, N_re) generated latents, if any
    latent_keys: list = field(default_factory=list)

    def values(self, method: str, metric: str) -> np.ndarray:
        """Per-UE values in ascending UE order."""
        return np.array([v for _, m, k, v in self.rows if m == method and k == metric])

    def mean(self, method: str, metric: str) -> float:
        return float(np.mean(self.values(method, metric)))


def metric_names(cfg: ExperimentConfig, n_bs: int) -> list[str]:
    names = [f"task1_{n}" for n in cfg.evaluation.n_layers]
    if n_bs >= 2:
        names.append("task2")
    return names


def _sample_seed(gen_seed: int, bs_id: int, ue_id: int, i: int) -> tuple[int, int, int, int]:
    return (int(gen_seed), int(bs_id), int(ue_id), int(i))


def mean_candidates(ds: Dataset, reps, decoder) -> dict:
    """Decoded mean representation per entry index, as a 1-candidate stack."""
    return {i: reconstruct(decoder, mean_representation(reps[i])[None], ds) for i in range(len(ds))}


def generated_latents(ds: Dataset, generator, gen_seed: int) -> np.ndarray:
    """(E, N_GEN, N_re) latents; sample j of entry (b, u) has its own stream keyed (seed, b, u, j)."""
    keys = [_sample_seed(gen_seed, e.bs_id, e.ue_id, j) for e in ds.entries for j in range(N_GEN)]
    locs = np.repeat(ds.locs(), N_GEN, axis=0)
    return generator.sample_rows(locs, keys).reshape(len(ds), N_GEN, -1)


def _score_method(ds: Dataset, method: str, metrics: list[str], cands: dict | None, noise_var: float) -> dict:
    """{(ue_id, metric): value} with task1 averaged over BSs and task2 on the first BS pair."""
    idx = ds.index()
    out = {}
    n_cand = 1 if method == "generated-1" else None
    for u in ds.ue_ids():
        bss = sorted(b for b, uu in idx if uu == u)
        for metric in metrics:
            if metric.startswith("task1_"):
                n_l = int(metric.split("_")[1])
                vals = []
                for b in bss:
                    tensor = ds.entries[idx[(b, u)]].data
                    if method == "original-traversal":
                        vals.append(representative_traversal(tensor, "task1", noise_var, n_l)[2])
                    else:
                        c = cands[idx[(b, u)]][:n_cand]
                        vals.append(select_best(c, tensor, "task1", noise_var, n_l)[2])
                out[(u, metric)] = float(np.mean(vals))
            else:
                t1, t2 = ds.entries[idx[(bss[0], u)]].data, ds.entries[idx[(bss[1], u)]].data
                if method == "original-traversal":
                    out[(u, metric)] = representative_traversal((t1, t2), "task2", noise_var)[2]
                else:
                    c1, c2 = cands[idx[(bss[0], u)]][:n_cand], cands[idx[(bss[1], u)]][:n_cand]
                    pairs = [stack_dual(a, b) for a, b in zip(c1, c2)]
                    out[(u, metric)] = select_best(pairs, (t1, t2), "task2", noise_var)[2]
    return out


def run_eval(cfg: ExperimentConfig, out_dir, methods=None, gen_seed: int | None = None) -> EvalReport:
    """Compute per-UE scores for each method; loads only the checkpoints a method needs."""
    methods = tuple(methods or cfg.evaluation.methods)
    gen_seed = cfg.evaluation.gen_seed if gen_seed is None else gen_seed
    ds = load_experiment_dataset(cfg, out_dir)
    metrics = metric_names(cfg, len(ds.bs_ids()))
    noise_var = ds.scene.noise_var
    learned = [m for m in methods if m != "original-traversal"]
    reps = decoder = generator = None
    nmse_db = None
    if learned:
        encoder, _ = load_encoder(out_dir)
        decoder, _ = load_decoder(out_dir)
        reps = dataset_representations(ds, encoder)
        nmse_db = nmse(ds.stacked(), reconstruct(decoder, reps, ds))
    if any(m.startswith("generated") for m in methods):
        generator, _ = load_generator(out_dir)
    lat = gen_cands = None
    if generator is not None:
        lat = generated_latents(ds, generator, gen_seed)
        chans = reconstruct(decoder, lat, ds)
        # generated-1 and generated-10 share candidates; generated-1 keeps the first
        gen_cands = {i: chans[i] for i in range(len(ds))}
    rows = []
    for method in methods:
        cands = None
        if method == "mean-representation":
            cands = mean_candidates(ds, reps, decoder)
        elif method.startswith("generated"):
            cands = gen_cands
        scores = _score_method(ds, method, metrics, cands, noise_var)
        rows += [(u, method, k, scores[(u, k)]) for u in ds.ue_ids() for k in metrics]
    report = EvalReport(rows, nmse_db)
    if lat is not None:
        report.latents = lat
        report.latent_keys = [{"bs_id": e.bs_id, "ue_id": e.ue_id, "loc": e.loc.tolist()} for e in ds.entries]
    report.summary = summarize(report, methods, metrics)
    report.summary["gen_seed"] = int(gen_seed)
    return report


def summarize(report: EvalReport, methods, metrics) -> dict:
    out = {"nmse_db": report.nmse_db, "methods": {}}
    for m in methods:
        out["methods"][m] = {}
        for k in metrics:
            v = report.values(m, k)
            out["methods"][m][k] = {"mean": float(v.mean()), "median": float(np.median(v)),
                                    "min": float(v.min()), "max": float(v.max()), "n": int(v.size)}
    return out


def moving_average(x, window: int) -> np.ndarray:
    """Centred moving average; the window shrinks at the edges instead of padding."""
    x = np.asarray(x, dtype=np.float64)
    if window <= 1 or x.size == 0:
        return x.copy()
    half = window // 2
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(x.size)
    lo, hi = np.maximum(i - half, 0), np.minimum(i + half + 1, x.size)
    return (c[hi] - c[lo]) / (hi - lo)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_report(report: EvalReport, out_dir, window: int = 51) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {"eval": out / EVAL_CSV, "cdf": out / CDF_CSV, "line": out / LINE_CSV, "summary": out / SUMMARY_JSON}
    with open(paths["eval"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["ue_id", "method", "metric", "value"])
        for u, m, k, v in report.rows:
            w.writerow([u, m, k, _fmt(v)])
    groups: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for u, m, k, v in report.rows:
        groups.setdefault((m, k), []).append((u, v))
    with open(paths["cdf"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "metric", "rank", "value", "cdf"])
        for (m, k), items in groups.items():
            vals = np.sort([v for _, v in items])
            for r, v in enumerate(vals):
                w.writerow([m, k, r + 1, _fmt(v), _fmt((r + 1) / len(vals))])
    with open(paths["line"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["ue_id", "method", "metric", "value", "smoothed"])
        for (m, k), items in groups.items():
            sm = moving_average([v for _, v in items], window)
            for (u, v), s in zip(items, sm):
                w.writerow([u, m, k, _fmt(v), _fmt(s)])
    paths["summary"].write_text(json.dumps(report.summary, indent=2, sort_keys=True) + "\n")
    if report.latents is not None:
        paths["latents"] = out / LATENTS
        e, n, d = report.latents.shape
        save_latents(paths["latents"], report.latents.reshape(e * n, d),
                     {"n_gen": n, "seed": report.summary.get("gen_seed"), "entries": report.latent_keys})
    return paths


def cmd_eval(cfg: ExperimentConfig, out_dir, methods=None) -> EvalReport:
    report = run_eval(cfg, out_dir, methods)
    write_report(report, out_dir, cfg.evaluation.smoothing_window)
    for m, per in report.summary["methods"].items():
        log.info("%s: %s", m, ", ".join(f"{k}={v['mean']:.4f}" for k, v in per.items()))
    return report


# --------------------------------------------------------------------------
# projection


def pca_2d(x) -> np.ndarray:
    """Scores on the top two principal components, signs fixed so each axis's largest loading is positive.

    Degenerate (zero-variance) input yields all-zero scores and a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("need at least 3 representations as rows of a 2-D array")
    xc = x - x.mean(axis=0)
    scale = np.abs(x).max()
    if not np.any(np.abs(xc) > 1e-12 * max(scale, 1e-300)):
        warnings.warn("degenerate covariance: all representations identical", RuntimeWarning)
        return np.zeros((x.shape[0], 2))
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    comps = np.zeros((2, x.shape[1]))
    k = min(2, vt.shape[0])
    comps[:k] = vt[:k]
    for i in range(k):
        if sv[i] <= 1e-12 * sv[0]:
            comps[i] = 0.0
            continue
        j = np.argmax(np.abs(comps[i]))
        comps[i] *= np.sign(comps[i, j])
    return xc @ comps.T


def cluster_ratio(points, labels) -> float:
    """Mean within-label pairwise distance over mean between-label pairwise distance."""
    p = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(p), dtype=bool)
    return float(d[same & off].mean() / d[~same].mean())


def cmd_project2d(cfg: ExperimentConfig, out_dir) -> Path:
    ds = load_experiment_dataset(cfg, out_dir)
    encoder, _ = load_encoder(out_dir)
    reps = dataset_representations(ds, encoder)
    e, n_t, d = reps.shape
    pts = pca_2d(reps.reshape(-1, d))
    path = Path(out_dir) / PROJECTION_CSV
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bs_id", "ue_id", "t", "pc1", "pc2"])
        for i, ent in enumerate(ds.entries):
            for t in range(n_t):
                x, y = pts[i * n_t + t]
                w.writerow([ent.bs_id, ent.ue_id, t, _fmt(x), _fmt(y)])
    log.info("projection: %d points -> %s", len(pts), path)
    return path
