import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from chanrep.nncore import DecoderConfig, EncoderConfig
from chanrep.reprlearn import (ContrastiveConfig, DecoderTrainConfig, NegativeQueue, Representation, decode,
                               encode_images, infonce_loss, mean_representation, momentum_update,
                               retrieval_stats, train_decoder, train_encoder, warmup_lr)

TINY_ENC = EncoderConfig((2, 4, 4), 2, 8, 2, 1, 4)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def loss_oracle(q, k, negs, gamma):
    sims = np.concatenate([[q @ k], negs @ q]) / gamma
    return -math.log2(math.exp(sims[0] - sims.max()) / np.exp(sims - sims.max()).sum())


# --------------------------------------------------------------------------
# InfoNCE


def test_infonce_one_negative_equal_similarity():
    q = unit([1.0, 0.0])
    k = unit([0.0, 1.0])
    assert infonce_loss(q, k, k[None], 0.5).item() == pytest.approx(1.0, abs=1e-12)


def test_infonce_two_negatives_equal_similarity():
    q = torch.tensor(unit([1.0, 0.0, 0.0]))
    k = torch.tensor(unit([0.0, 1.0, 0.0]))
    negs = torch.tensor(unit([[0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]))
    assert infonce_loss(q, k, negs, 0.1).item() == pytest.approx(math.log2(3), abs=1e-12)


def test_infonce_large_margin_limit():
    q = torch.tensor(unit([1.0, 0.0]))
    negs = torch.tensor(unit([[0.0, 1.0], [-1.0, 0.0]]))
    assert infonce_loss(q, q, negs, 5e-3).item() < 1e-80


@given(seed=st.integers(0, 10_000), n_q=st.integers(1, 20), gamma=st.floats(0.05, 2.0))
def test_infonce_matches_oracle_and_bounds(seed, n_q, gamma):
    rng = np.random.default_rng(seed)
    q, k = unit(rng.standard_normal(6)), unit(rng.standard_normal(6))
    negs = unit(rng.standard_normal((n_q, 6)))
    got = infonce_loss(torch.tensor(q), torch.tensor(k), torch.tensor(negs), gamma).item()
    assert got == pytest.approx(loss_oracle(q, k, negs, gamma), rel=1e-10, abs=1e-12)
    assert got >= 0


@pytest.mark.parametrize("n_q", [1, 7, 512])
def test_infonce_uniform_upper_value(n_q):
    q = torch.tensor(unit([1.0, 2.0, 3.0]))
    negs = q.expand(n_q, 3)
    assert infonce_loss(q, q, negs, 5e-3).item() == pytest.approx(math.log2(n_q + 1), rel=1e-12)


def test_infonce_temperature_monotone():
    q = torch.tensor(unit([1.0, 0.2, 0.0]))
    k = torch.tensor(unit([1.0, 0.1, 0.0]))
    negs = torch.tensor(unit([[0.0, 1.0, 0.0], [0.3, 0.0, 1.0], [-1.0, 0.0, 0.5]]))
    vals = [infonce_loss(q, k, negs, g).item() for g in np.linspace(0.01, 1.0, 40)]
    assert np.all(np.diff(vals) > 0)


def test_infonce_batch_is_mean():
    rng = np.random.default_rng(0)
    q, k, negs = unit(rng.standard_normal((4, 5))), unit(rng.standard_normal((4, 5))), unit(rng.standard_normal((3, 5)))
    batch = infonce_loss(torch.tensor(q), torch.tensor(k), torch.tensor(negs), 0.2).item()
    assert batch == pytest.approx(np.mean([loss_oracle(q[i], k[i], negs, 0.2) for i in range(4)]), rel=1e-12)


def test_infonce_errors():
    q = torch.tensor([1.0, 0.0])
    with pytest.raises(ValueError):
        infonce_loss(q, q, torch.zeros(0, 2), 0.1)
    with pytest.raises(ValueError):
        infonce_loss(torch.zeros(2), q, q[None], 0.1)
    with pytest.raises(ValueError):
        infonce_loss(q, q, torch.zeros(1, 2), 0.1)


# --------------------------------------------------------------------------
# momentum update and queue


def test_momentum_examples():
    assert np.allclose(momentum_update([np.zeros(3)], [np.ones(3)], 0.99)[0], 0.01)
    assert np.array_equal(momentum_update([np.zeros(3)], [np.arange(3.0)], 0.0)[0], np.arange(3.0))
    with pytest.raises(ValueError):
        momentum_update([np.zeros(3)], [np.ones(3)], 1.0)
    with pytest.raises(ValueError):
        momentum_update([np.zeros(3)], [np.ones(4)], 0.5)
    with pytest.raises(ValueError):
        momentum_update([np.zeros(3)], [], 0.5)


def test_momentum_in_place_torch():
    neg = torch.nn.Parameter(torch.zeros(2))
    momentum_update([neg], [torch.ones(2)], 0.75)
    assert torch.allclose(neg.data, torch.full((2,), 0.25))


@given(seed=st.integers(0, 10_000), beta=st.floats(0.0, 0.999))
def test_momentum_contraction(seed, beta):
    rng = np.random.default_rng(seed)
    neg, pos = rng.standard_normal(7), rng.standard_normal(7)
    new = momentum_update([neg], [pos], beta)[0]
    assert np.linalg.norm(new - pos) == pytest.approx(beta * np.linalg.norm(neg - pos), rel=1e-9, abs=1e-12)


@given(batches=st.lists(st.integers(1, 9), min_size=1, max_size=12), cap=st.integers(1, 16))
def test_queue_fifo(batches, cap):
    q = NegativeQueue(cap, 1)
    pushed = []
    counter = 0
    for b in batches:
        rows = torch.arange(counter, counter + b, dtype=torch.float32)[:, None]
        counter += b
        q.enqueue(rows)
        pushed += list(range(counter - b, counter))
        assert len(q) == min(len(pushed), cap)
        assert q.keys()[:, 0].tolist() == pushed[-cap:]


def test_warmup_lr():
    assert warmup_lr(0, 100, 1.0, 0.05) == pytest.approx(0.2)
    assert warmup_lr(4, 100, 1.0, 0.05) == 1.0
    assert warmup_lr(99, 100, 1.0, 0.05) == 1.0


def test_warmup_lr_decay():
    lrs = [warmup_lr(i, 100, 1.0, 0.05, decay_frac=0.5) for i in range(100)]
    assert lrs[4] == 1.0 and lrs[50] == 1.0
    assert lrs[75] == pytest.approx(0.5)
    assert lrs[99] == pytest.approx(0.02)
    assert all(a >= b for a, b in zip(lrs[4:], lrs[5:]))


# --------------------------------------------------------------------------
# training


def tiny_images(n_ent=2, n_t=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    base = torch.randn(n_ent, 1, 2, 4, 4, generator=g)
    return base + 0.1 * torch.randn(n_ent, n_t, 2, 4, 4, generator=g)


def test_train_encoder_smoke():
    cfg = ContrastiveConfig(queue_size=4, batch_size=2, steps=50, lr=1e-3)
    pair, log = train_encoder(tiny_images(), TINY_ENC, cfg)
    n_fill = 2
    assert len(log) == n_fill + 50
    assert all(r["loss"] is None for r in log[:n_fill])
    assert all(math.isfinite(r["loss"]) for r in log[n_fill:])
    assert [r["queue_fill"] for r in log[:3]] == [2, 4, 4]
    assert set(log[0]) == {"step", "loss", "lr", "queue_fill"}


def test_train_encoder_deterministic(tmp_path):
    cfg = ContrastiveConfig(queue_size=4, batch_size=2, steps=20)
    _, a = train_encoder(tiny_images(), TINY_ENC, cfg, tmp_path / "a.jsonl")
    _, b = train_encoder(tiny_images(), TINY_ENC, cfg, tmp_path / "b.jsonl")
    assert a == b
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_train_encoder_errors():
    with pytest.raises(ValueError, match="N_t"):
        train_encoder(tiny_images(n_t=1), TINY_ENC, ContrastiveConfig(queue_size=1, batch_size=1, steps=1))
    with pytest.raises(ValueError, match="queue"):
        train_encoder(tiny_images(), TINY_ENC, ContrastiveConfig(queue_size=8, batch_size=2, steps=1))
    with pytest.raises(ValueError):
        ContrastiveConfig(momentum=1.0)
    with pytest.raises(ValueError):
        ContrastiveConfig(temperature=0.0)


def test_encode_images_count_and_determinism():
    pair, _ = train_encoder(tiny_images(), TINY_ENC, ContrastiveConfig(queue_size=4, batch_size=2, steps=5))
    imgs = tiny_images(3, 5, seed=1)
    reps = encode_images(pair.encoder, imgs)
    assert reps.shape == (3, 5, 4)
    twin = encode_images(pair.encoder, imgs[:1, :1].expand(1, 2, 2, 4, 4))
    assert np.array_equal(twin[0, 0], twin[0, 1])


def test_train_decoder_loss_decreases():
    g = torch.Generator().manual_seed(0)
    reps = torch.randn(8, 3, 4, generator=g).numpy()
    w = torch.randn(4, 32, generator=g)
    images = (torch.as_tensor(reps, dtype=torch.float32) @ w).reshape(8, 3, 2, 4, 4)
    cfg = DecoderConfig(4, (2, 4, 4), (1, 2), 16, 2, 1, 32)
    dec, log = train_decoder(reps, images, cfg, DecoderTrainConfig(steps=300, batch_size=8, lr=3e-3))
    losses = np.array([r["loss"] for r in log])
    ma = np.convolve(losses, np.ones(50) / 50, mode="valid")[::50]
    assert np.all(np.diff(ma) <= 0)
    out = decode(dec, reps)
    assert out.shape == (8, 3, 2, 4, 4)
    with pytest.raises(ValueError):
        train_decoder(reps[:0], images[:0], cfg, DecoderTrainConfig(steps=1))


# --------------------------------------------------------------------------
# representations


def test_mean_representation():
    v = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(mean_representation([v]), v)
    assert np.array_equal(mean_representation([v, -v]), np.zeros(3))
    reps = [Representation(v, (0, 0, 0)), Representation(3 * v, (0, 0, 1))]
    assert np.allclose(mean_representation(reps), 2 * v)
    with pytest.raises(ValueError):
        mean_representation([])


def test_retrieval_stats_hand():
    reps = np.array([[[1.0, 0.0], [0.9, 0.1]], [[0.0, 1.0], [0.1, 0.9]]])
    st_ = retrieval_stats(reps)
    assert st_["top1"] == 1.0
    assert st_["pos_sim"] > 0.9 and st_["neg_sim"] < 0.25
    swapped = reps[:, ::-1].copy()
    swapped[:, 1] = swapped[::-1, 1]
    assert retrieval_stats(swapped)["top1"] == 0.0
