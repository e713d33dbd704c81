"""Acceptance criteria, each printed as one PASS/FAIL line.

The desk-preset pipeline is run twice end to end (the second run only feeds
the determinism check); every learned-model criterion reads the first run.
"""
import time

import numpy as np
import pytest
from scipy.stats import binomtest

from chanrep.harness.config import build_config
from chanrep.harness.evaluate import (CDF_CSV, EVAL_CSV, LINE_CSV, PROJECTION_CSV, cluster_ratio, cmd_eval,
                                      cmd_project2d, pca_2d, run_eval)
from chanrep.harness.pipeline import (cmd_gen_dataset, cmd_train, dataset_representations, load_decoder,
                                      load_encoder, load_experiment_dataset, single_thread)
from chanrep.harness.verify import (suite_diffusion, suite_gradcheck, suite_svd_dominance, suite_theorem1,
                                    suite_waterfill_grid)
from chanrep.reprlearn import retrieval_stats
from conftest import report

N_GEN_SEEDS = 10


def run_pipeline(out):
    single_thread()
    cfg = build_config({})
    timings = {}
    cmd_gen_dataset(cfg, out)
    for stage in ("encoder", "decoder", "generator"):
        t0 = time.perf_counter()
        cmd_train(stage, cfg, out)
        timings[stage] = time.perf_counter() - t0
    cmd_eval(cfg, out)
    cmd_project2d(cfg, out)
    return cfg, timings


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_a")
    cfg, timings = run_pipeline(out)
    ds = load_experiment_dataset(cfg, out)
    encoder, _ = load_encoder(out)
    return {"out": out, "cfg": cfg, "timings": timings, "ds": ds, "reps": dataset_representations(ds, encoder)}


# --------------------------------------------------------------------------
# verification suites


def test_c1_theorem_identity():
    r = suite_theorem1(n=200)
    ok = r["passed"] and r["max_error"] < 1e-9 and r["seconds"] < 5
    report(1, "dual-BS SE equals allocation objective", ok,
           f"max_rel_err={r['max_error']:.2e} (<1e-9) t={r['seconds']:.2f}s (<5s)")
    assert ok


def test_c2_waterfill_optimality():
    r = suite_waterfill_grid(n=100)
    ok = r["passed"] and r["seconds"] < 60
    report(2, "waterfill beats 0.01-step simplex grid", ok,
           f"max_grid_excess={r['max_error']:.2e} t={r['seconds']:.2f}s (<60s)")
    assert ok


def test_c3_svd_dominance():
    r = suite_svd_dominance(n=100, n_random=1000)
    ok = r["passed"] and r["max_error"] <= 0
    report(3, "SVD precoder dominates 1000 random precoders", ok, f"violations={r.get('violations', r['max_error'])}")
    assert ok


def test_c4_gradient_suite():
    r = suite_gradcheck()
    ok = r["passed"] and r["max_error"] < 1e-4 and r["seconds"] < 120
    report(4, "finite-difference gradient checks", ok,
           f"max_rel_err={r['max_error']:.2e} (<1e-4) t={r['seconds']:.1f}s (<120s)")
    assert ok


def test_c5_diffusion_identities():
    r = suite_diffusion(100, "scaled", n_mc=100_000)
    ok = r["passed"] and r["max_error"] <= 1e-10 and r["monte_carlo_error"] <= 0.01
    report(5, "diffusion identities and forward marginal", ok,
           f"exact_err={r['max_error']:.2e} (<=1e-10) mc_err={r['monte_carlo_error']:.4f} (<=0.01)")
    assert ok


# --------------------------------------------------------------------------
# desk-scale learned models


def test_c6_contrastive_separation(desk):
    st = retrieval_stats(desk["reps"])
    t = desk["timings"]["encoder"]
    gap = st["pos_sim"] - st["neg_sim"]
    ok = st["top1"] >= 0.9 and gap >= 0.2 and t <= 600
    report(6, "contrastive separation", ok,
           f"top1={st['top1']:.3f} (>=0.9) pos-neg={gap:.3f} (>=0.2) t={t:.0f}s (<=600s)")
    assert ok


def test_c7_reconstruction(desk):
    _, meta = load_decoder(desk["out"])
    nmse_db = meta["final_nmse_db"]
    t = desk["timings"]["decoder"]
    ok = nmse_db <= -5.0 and t <= 600
    report(7, "decoder reconstruction", ok, f"nmse={nmse_db:.2f} dB (<=-5) t={t:.0f}s (<=600s)")
    assert ok


def test_c8_generation_utility(desk):
    wins, gen_means, base_means = 0, [], []
    for seed in range(N_GEN_SEEDS):
        rep = run_eval(desk["cfg"], desk["out"], ("mean-representation", "generated-10"), gen_seed=seed)
        g, b = rep.mean("generated-10", "task1_1"), rep.mean("mean-representation", "task1_1")
        gen_means.append(g)
        base_means.append(b)
        wins += g >= b
    p = binomtest(wins, N_GEN_SEEDS, 0.5, alternative="greater").pvalue
    ok = np.mean(gen_means) >= np.mean(base_means) and p < 0.05
    report(8, "generated-10 vs mean-representation TASK1_1", ok,
           f"gen10={np.mean(gen_means):.4f} mean_rep={np.mean(base_means):.4f} "
           f"wins={wins}/{N_GEN_SEEDS} sign_p={p:.4f} (<0.05)")
    assert ok


def test_c9_cluster_structure(desk):
    reps = desk["reps"]
    e, n_t, d = reps.shape
    ratio = cluster_ratio(pca_2d(reps.reshape(-1, d)), np.repeat(np.arange(e), n_t))
    ok = ratio < 0.5
    report(9, "PCA cluster structure", ok, f"intra/inter={ratio:.3f} (<0.5)")
    assert ok


def test_c10_determinism(desk, tmp_path_factory):
    other = tmp_path_factory.mktemp("desk_b")
    run_pipeline(other)
    names = (EVAL_CSV, CDF_CSV, LINE_CSV, PROJECTION_CSV)
    diff = [n for n in names if (desk["out"] / n).read_bytes() != (other / n).read_bytes()]
    ok = not diff
    report(10, "byte-identical CSV reports across runs", ok, f"compared={len(names)} differing={diff or 'none'}")
    assert ok
