import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from repdib.bottleneck import Codebook, quantize
from repdib.numcore import Adam, Tensor, backward
from repdib.pipeline import (
    ConfigError,
    DivergenceError,
    ReplayBuffer,
    ReplayError,
    RunConfig,
    StageOrderError,
    Trainer,
    sample_pairs,
)
from repdib.pipeline import trainer as trainer_mod

from conftest import tiny_config


# --------------------------------------------------------------- config


def test_config_json_round_trip_exact(tmp_path):
    cfg = RunConfig(seed=7, lr=3e-3, beta_vib=0.1 + 0.2, env="loop")
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg
    assert set(json.loads((tmp_path / "c.json").read_text())) == set(RunConfig.field_names())


def test_overrides_coerce_types():
    cfg = RunConfig().with_overrides(["groups=4", "use_vib=false", "lr=0.01", "env=spiral"])
    assert cfg.groups == 4 and cfg.use_vib is False and cfg.lr == 0.01 and cfg.env == "spiral"


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError, match="unknown config key 'gropus'.*groups"):
        RunConfig().with_overrides(["gropus=4"])
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict({"nope": 1})


@pytest.mark.parametrize("kw, msg", [
    (dict(stage1_end=5000, stage2_end=100), "stage boundaries"),
    (dict(gamma=1.0), "gamma"),
    (dict(feature_dim=30, groups=8), "not divisible"),
    (dict(env="maze"), "env kinds"),
    (dict(train_goals="1;2"), "train_goals"),
])
def test_validation_errors(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        RunConfig(**kw).validate()


def test_flat_json_required(tmp_path):
    (tmp_path / "c.json").write_text('{"seed": {"a": 1}}')
    with pytest.raises(ConfigError, match="flat JSON"):
        RunConfig.load(tmp_path / "c.json")


# --------------------------------------------------------------- replay


def fill(buf, lengths, truncate_last=False):
    """Episodes of the given lengths; observation value = global transition index."""
    t = 0
    for i, n in enumerate(lengths):
        for j in range(n):
            last = j == n - 1
            terminal = last and not (truncate_last and i == len(lengths) - 1)
            buf.add([t], 0, -1.0, [t + 1], terminal, last)
            t += 1
    return t


def test_single_transition_episode_unique_pair():
    buf = ReplayBuffer(10, 1)
    buf.add([0.0], 2, -1.0, [1.0], True, True)
    b = sample_pairs(buf, [1], 5, np.random.default_rng(0))
    assert (b.obs[:, 0] == 0).all() and (b.next_obs[:, 0] == 1).all() and (b.actions == 2).all()


def test_two_step_episode_k2_unique_pair():
    buf = ReplayBuffer(10, 1)
    fill(buf, [2])
    b = sample_pairs(buf, [2], 6, np.random.default_rng(0))
    assert (b.obs[:, 0] == 0).all() and (b.next_obs[:, 0] == 2).all() and (b.ks == 2).all()


def test_k_beyond_every_episode_errors():
    buf = ReplayBuffer(10, 1)
    fill(buf, [2, 3])
    with pytest.raises(ReplayError, match="no valid"):
        sample_pairs(buf, [4], 1, np.random.default_rng(0))
    with pytest.raises(ReplayError):
        sample_pairs(buf, [0], 1, np.random.default_rng(0))


def test_pair_distribution_uniform_chi2():
    buf = ReplayBuffer(64, 1)
    lengths = [3, 5, 1, 4]
    fill(buf, lengths)
    ks = [1, 2, 3]
    valid = []
    start = 0
    for n in lengths:
        for t in range(start, start + n):
            valid += [(t, k) for k in ks if t + k <= start + n]
        start += n
    b = sample_pairs(buf, ks, 10 ** 5, np.random.default_rng(5))
    index = {pair: i for i, pair in enumerate(valid)}
    counts = np.zeros(len(valid))
    for t, k, nxt in zip(b.obs[:, 0].astype(int), b.ks, b.next_obs[:, 0].astype(int)):
        assert nxt == t + k
        counts[index[(t, int(k))]] += 1
    assert (counts > 0).all()
    assert chisquare(counts).pvalue > 0.01


@settings(max_examples=60, deadline=None)
@given(lengths=st.lists(st.integers(1, 9), min_size=1, max_size=12),
       capacity=st.integers(4, 40), k=st.integers(1, 6), seed=st.integers(0, 2 ** 16))
def test_pairs_never_cross_episode_boundary(lengths, capacity, k, seed):
    buf = ReplayBuffer(capacity, 1)
    fill(buf, lengths)
    # oracle over the surviving window: episode id of each global index
    ep_of = np.repeat(np.arange(len(lengths)), lengths)
    total = len(ep_of)
    first = max(0, total - capacity)
    ok = [t for t in range(first, total) if t + k - 1 < total and ep_of[t + k - 1] == ep_of[t]]
    rng = np.random.default_rng(seed)
    if not ok:
        with pytest.raises(ReplayError):
            buf.sample_pairs(8, [k], rng)
        return
    b = buf.sample_pairs(64, [k], rng)
    t = b.obs[:, 0].astype(int)
    assert set(t) <= set(ok)
    np.testing.assert_array_equal(b.next_obs[:, 0].astype(int), t + k)
    # only the final transition of an episode may carry done
    assert ((b.dones == 1) <= (np.isin(t + k - 1, np.cumsum(lengths) - 1))).all()


def test_truncated_episode_boundary_respected():
    buf = ReplayBuffer(20, 1)
    buf.add([0], 0, -1.0, [1], False, True)   # truncation, not terminal
    buf.add([10], 0, -1.0, [11], False, False)
    with pytest.raises(ReplayError):
        buf.sample_pairs(5, [2], np.random.default_rng(0))


def test_replay_state_round_trip():
    buf = ReplayBuffer(7, 2)
    for i in range(11):
        buf.add([i, -i], i % 4, -1.0, [i + 1, 0], i % 3 == 2, i % 3 == 2)
    other = ReplayBuffer(7, 2)
    other.load_state(buf.state())
    r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
    a, b = buf.sample_pairs(20, [1, 2], r1), other.sample_pairs(20, [1, 2], r2)
    np.testing.assert_array_equal(a.obs, b.obs)
    np.testing.assert_array_equal(a.next_obs, b.next_obs)


# --------------------------------------------------------------- stages


def params_snapshot(trainer):
    out = {}
    for name, mod in trainer._modules().items():
        for k, v in mod.state_dict().items():
            out[f"{name}/{k}"] = v.copy()
    if trainer.model.codebook is not None:
        out["codes"] = trainer.model.codebook.vectors.copy()
    return out


def assert_same(a, b):
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)


def test_stage1_zero_frames_leaves_modules_unchanged():
    t = Trainer(tiny_config(stage1_end=0))
    before = params_snapshot(t)
    t.stage1()
    assert t.stage_done == 1 and t.frame == 0
    assert_same(before, params_snapshot(t))


def test_collapsed_input_stream_single_code_per_group():
    rng = np.random.default_rng(0)
    cb = Codebook(16, 4, 8, rng)
    x = Tensor(np.tile(rng.normal(size=(1, 16)), (32, 1)), requires_grad=True)
    opt = Adam({"x": x, "codes": cb.codes}, lr=1e-2)
    for _ in range(1500):
        qr = quantize(x, cb)
        backward(qr.vq_loss)
        opt.step()
    qr = quantize(x, cb, track=False)
    assert all(len(np.unique(qr.codes[:, g])) == 1 for g in range(4))
    assert float(qr.vq_loss.data) < 1e-6


def test_stage_order_enforced():
    t = Trainer(tiny_config())
    with pytest.raises(StageOrderError, match="stage I"):
        t.stage2()
    with pytest.raises(StageOrderError):
        t.stage3()


def test_stage3_refuses_untrained_codebook():
    t = Trainer(tiny_config(stage1_end=0, stage2_end=0))
    t.stage1()
    t.stage2()
    with pytest.raises(StageOrderError, match="untrained codebook"):
        t.stage3()
    # the no-bottleneck ablation has nothing to pretrain
    t = Trainer(tiny_config(stage1_end=0, stage2_end=0, stage3_end=50, use_vq=False, use_vib=False))
    t.run_all()
    assert t.stage_done == 3


def test_frozen_codebook_bit_identical_through_stage3():
    t = Trainer(tiny_config())
    t.stage1()
    t.stage2()
    codes = t.model.codebook.vectors.copy()
    vib = {k: v.copy() for k, v in t.model.vib.state_dict().items()}
    enc = t.model.encoder.state_dict()["layers.0.weight"].copy()
    t.stage3()
    np.testing.assert_array_equal(codes, t.model.codebook.vectors)
    for k, v in t.model.vib.state_dict().items():
        np.testing.assert_array_equal(vib[k], v)
    # the encoder stays trainable by default
    assert not np.array_equal(enc, t.model.encoder.state_dict()["layers.0.weight"])


def test_freeze_encoder_stage3_flag():
    t = Trainer(tiny_config(freeze_encoder_stage3=True))
    t.stage1()
    t.stage2()
    enc = {k: v.copy() for k, v in t.model.encoder.state_dict().items()}
    t.stage3()
    for k, v in t.model.encoder.state_dict().items():
        np.testing.assert_array_equal(enc[k], v)


def test_zero_finetune_steps_evaluates_pretrained_policy(tmp_path):
    t = Trainer(tiny_config(stage3_end=140), tmp_path)
    t.run_all()
    t.close()
    rows = t.final_eval()
    assert len(rows) == 4 and {r[0] for r in rows} == {140}
    assert len(t.eval_rows) == 4


def test_baseline_ablation_runs_without_bottleneck():
    t = Trainer(tiny_config(use_vib=False, use_vq=False))
    t.run_all()
    assert t.model.codebook is None and t.model.vib is None and t.stage_done == 3


@pytest.mark.parametrize("objective", ["contrastive", "proto", "inverseK"])
def test_objectives_train_finite(objective):
    t = Trainer(tiny_config(objective=objective, stage3_end=140))
    t.stage1()
    t.stage2()
    assert np.isfinite(t.last["loss_objective"]) and np.isfinite(t.last["loss_q"])


def test_epsilon_schedule_linear_over_first_half():
    t = Trainer(tiny_config(stage1_end=0, stage2_end=100))
    t.frame = 0
    assert t._epsilon(0, 100) == 1.0
    t.frame = 25
    assert t._epsilon(0, 100) == pytest.approx(0.55)
    t.frame = 80
    assert t._epsilon(0, 100) == pytest.approx(0.1)


def test_divergence_aborts_with_checkpoint(tmp_path, monkeypatch):
    t = Trainer(tiny_config(), tmp_path)

    def boom(*a, **k):
        raise FloatingPointError("non-finite value produced by op 'mul'")

    monkeypatch.setattr(trainer_mod, "total_loss", boom)
    with pytest.raises(DivergenceError, match="mul"):
        t.stage1()
    assert (tmp_path / "checkpoint_diverged.bin").exists()
    t.close()


# ------------------------------------------------- determinism and resume


def run_to(cfg, out, until2=None):
    t = Trainer(cfg, out)
    t.stage1()
    t.stage2(until=until2)
    return t


def test_metrics_byte_identical_across_runs(tmp_path):
    cfg = tiny_config(trace_intrinsic=True)
    for name in ("a", "b"):
        t = Trainer(cfg, tmp_path / name)
        t.run_all()
        t.close()
    for f in ("metrics.csv", "eval.csv", "trajectory.csv", "intrinsic.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_resume_mid_stage2_is_bit_identical(tmp_path):
    cfg = tiny_config(stage2_end=300, stage3_end=320, log_every=5, trace_intrinsic=True)
    ref = run_to(cfg, tmp_path / "ref", until2=150)
    ref.save(tmp_path / "mid.bin")
    ref.stage2(until=250)
    ref.close()
    expect = params_snapshot(ref)

    # a second process writes past the checkpoint, then crashes; resume truncates its logs
    t = run_to(cfg, tmp_path / "res", until2=150)
    t.save(tmp_path / "res" / "mid.bin")
    t.stage2(until=180)
    t.close()
    resumed = Trainer.load(tmp_path / "res" / "mid.bin", tmp_path / "res")
    assert resumed.frame == 150
    resumed.stage2(until=250)
    resumed.close()
    assert_same(expect, params_snapshot(resumed))
    np.testing.assert_array_equal(ref.queue.items, resumed.queue.items)
    for f in ("metrics.csv", "trajectory.csv", "intrinsic.csv"):
        assert (tmp_path / "ref" / f).read_bytes() == (tmp_path / "res" / f).read_bytes(), f
    for name, opt in ref.optimizers.items():
        other = resumed.optimizers[name].state_dict()
        for k, v in opt.state_dict().items():
            np.testing.assert_array_equal(v, other[k])


def test_intrinsic_trace_reproducible_from_checkpoint(tmp_path):
    cfg = tiny_config(trace_intrinsic=True, stage2_end=200)
    t = run_to(cfg, tmp_path / "a", until2=100)
    t.save(tmp_path / "ck.bin")
    t.stage2()
    t.close()
    shutil.copytree(tmp_path / "a", tmp_path / "b")
    resumed = Trainer.load(tmp_path / "ck.bin", tmp_path / "b")
    resumed.stage2()
    resumed.close()
    text = (tmp_path / "a" / "intrinsic.csv").read_text()
    assert len(text.splitlines()) > 50
    assert text == (tmp_path / "b" / "intrinsic.csv").read_text()


def test_collection_time_rewards_stored_in_buffer():
    cfg = tiny_config(reward_relabel=False, trace_intrinsic=False)
    t = run_to(cfg, None)
    n = t.explore_buffer.size
    rewards = t.explore_buffer.rewards[:n]
    # stage I transitions keep -1 task rewards; stage II stores non-negative kNN distances
    assert (rewards[60:n] >= 0).all() and (rewards[:60] == -1).all()
