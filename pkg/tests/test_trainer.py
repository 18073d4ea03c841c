import math

import numpy as np
import pytest

from conftest import read_metrics
from protokws.audio_io import load_clip
from protokws.encoder import EncoderConfig, init_params
from protokws.features import FeatureStore
from protokws.frontend import log_mel
from protokws.sampler import TRAIN_STREAM, episode_at
from protokws.trainer import (AdamState, CheckpointError, EpisodeRecord, MetricsLog,
                              TrainConfig, TrainingError, adam_step, decode_checkpoint,
                              encode_checkpoint, episode_step, load_checkpoint,
                              save_checkpoint, train)

TINY = EncoderConfig(blocks=((4, 2),), embed_dim=3, input_shape=(8, 8))


def test_adam_zero_gradient_is_identity():
    p = init_params(TINY, 0)
    grads = {k: np.zeros_like(a) for k, a in p.arrays.items()}
    q, st = adam_step(p, grads, AdamState.zeros_like(p), TrainConfig())
    assert q.equals(p) and st.t == 1


def test_adam_constant_gradient_steps_by_lr():
    p = init_params(TINY, 0)
    rng = np.random.default_rng(1)
    grads = {k: rng.normal(size=a.shape) for k, a in p.arrays.items()}
    cfg = TrainConfig(lr=1e-3)
    state, cur = AdamState.zeros_like(p), p
    for _ in range(5):
        nxt, state = adam_step(cur, grads, state, cfg)
        for k in p.names():
            # bias correction makes every step exactly lr * m/sqrt(v) = lr * sign(g), up to eps
            np.testing.assert_allclose(cur[k] - nxt[k], cfg.lr * np.sign(grads[k]), rtol=1e-5)
        cur = nxt


def test_adam_matches_scalar_oracle():
    p = init_params(TINY, 2)
    cfg = TrainConfig(lr=0.01)
    rng = np.random.default_rng(3)
    seq = [{k: rng.normal(size=a.shape) for k, a in p.arrays.items()} for _ in range(4)]
    name, idx = "conv0.w", (1, 0, 2, 1)
    theta, m, v = p[name][idx], 0.0, 0.0
    state, cur = AdamState.zeros_like(p), p
    for t, g in enumerate(seq, start=1):
        cur, state = adam_step(cur, g, state, cfg)
        gi = g[name][idx]
        m = 0.9 * m + 0.1 * gi
        v = 0.999 * v + 0.001 * gi * gi
        theta -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(cur[name][idx] - theta) < 1e-12


def test_adam_does_not_mutate_inputs():
    p = init_params(TINY, 0)
    before = p.copy()
    grads = {k: np.ones_like(a) for k, a in p.arrays.items()}
    state = AdamState.zeros_like(p)
    adam_step(p, grads, state, TrainConfig())
    assert p.equals(before) and state.t == 0
    assert all(not a.any() for a in state.m.values())


def test_adam_rejects_non_finite_gradient():
    p = init_params(TINY, 0)
    grads = {k: np.zeros_like(a) for k, a in p.arrays.items()}
    grads["head.b"][0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        adam_step(p, grads, AdamState.zeros_like(p), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(n_way=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = init_params(EncoderConfig.for_frontend(), 9)
    path = tmp_path / "m.pkws"
    save_checkpoint(p, path)
    ck = load_checkpoint(path)
    assert ck.params.equals(p) and ck.encoder == p.config
    assert encode_checkpoint(ck.params, ck.frontend) == path.read_bytes()


def test_checkpoint_rejects_truncation_and_version():
    data = encode_checkpoint(init_params(TINY, 0))
    for cut in (2, 10, 30, len(data) - 8, len(data) - 1):
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:cut])
    bumped = data[:4] + (2).to_bytes(4, "little") + data[8:]
    with pytest.raises(CheckpointError, match="version mismatch"):
        decode_checkpoint(bumped)
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_checkpoint(b"XXXX" + data[4:])


def test_metrics_log_ordering_and_csv():
    log = MetricsLog()
    log.append(EpisodeRecord(0, 1.5, 0.5, 3.2))
    with pytest.raises(ValueError):
        log.append(EpisodeRecord(0, 1.0, 0.5, 1.0))
    log.append(EpisodeRecord(1, 1.0, 0.75, 2.0))
    lines = log.to_csv("config: {}", timing=False).splitlines()
    assert lines == ["# config: {}", "episode,loss,acc,wall_ms", "0,1.5,0.5,0", "1,1.0,0.75,0"]


def test_feature_store_matches_direct_computation(small_corpus):
    fs = FeatureStore(small_corpus)
    entries = small_corpus.entries[:6]
    fs.warm(entries, threads=3)
    for e in entries:
        direct = log_mel(load_clip(small_corpus.resolve(e)))
        assert np.array_equal(fs.get(e), direct)
        assert fs.get(e) is fs.get(e)
    assert fs.batch(entries).shape == (6, 98, 64)


def test_episode_zero_loss_envelope(corpus_dir):
    # loss is summed over the queries; the envelope applies to the per-query mean
    from protokws.manifest import load_manifest
    pool = load_manifest(str(corpus_dir / "split" / "train.csv"))
    fs = FeatureStore(pool)
    cfg = EncoderConfig.for_frontend()
    lo, hi = 0.5 * math.log(10), 2 * math.log(10)
    for seed in range(20):
        ep = episode_at(pool, 10, 5, 10, seed, TRAIN_STREAM, 0)
        loss, _, _ = episode_step(init_params(cfg, seed), fs.batch(ep.clips()),
                                  ep.support_labels(), ep.query_labels(), 10)
        assert lo <= loss / 100 <= hi, (seed, loss / 100)


def test_training_is_deterministic_and_finite(small_corpus, tmp_path):
    fs = FeatureStore(small_corpus)
    tcfg = TrainConfig(n_way=4, k_shot=2, q_queries=3, episodes=12, seed=5, checkpoint_every=5)
    p1, log1 = train(small_corpus, tcfg, features=fs, out_dir=str(tmp_path / "a"))
    p2, log2 = train(small_corpus, tcfg, features=fs)
    assert np.array_equal(log1.losses(), log2.losses())
    assert p1.equals(p2) and p1.all_finite()
    names = sorted(f.name for f in (tmp_path / "a").iterdir())
    assert names == ["ckpt_000005.pkws", "ckpt_000010.pkws", "final.pkws"]
    assert load_checkpoint(tmp_path / "a" / "final.pkws").params.equals(p1)
    _, log3 = train(small_corpus, TrainConfig(n_way=4, k_shot=2, q_queries=3, episodes=12,
                                              seed=6), features=fs)
    assert not np.array_equal(log1.losses(), log3.losses())


@pytest.mark.slow
def test_zeroed_support_gradient_degrades_convergence(corpus_dir):
    from protokws.manifest import load_manifest
    pool = load_manifest(str(corpus_dir / "split" / "train.csv"))
    fs = FeatureStore(pool)
    fs.warm()
    tcfg = TrainConfig(episodes=200, seed=0)
    _, full = train(pool, tcfg, features=fs)
    _, broken = train(pool, tcfg, features=fs, support_grad=False)
    late_full, late_broken = full.losses()[100:].mean(), broken.losses()[100:].mean()
    assert late_full < 0.5 * late_broken, (late_full, late_broken)


def test_trained_run_reaches_accuracy(trained):
    rows = read_metrics(trained["metrics_path"])
    assert [r[0] for r in rows] == list(range(2000))
    acc = np.array([r[2] for r in rows])
    assert acc[-100:].mean() >= 0.95


def test_trained_run_loss_decreases(trained):
    loss = np.array([r[1] for r in read_metrics(trained["metrics_path"])])
    assert np.all(np.isfinite(loss))
    assert loss[-100:].mean() < 0.8 * loss[:100].mean()
    assert trained["checkpoint"].params.all_finite()
