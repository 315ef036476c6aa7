import math
from dataclasses import dataclass

import numpy as np
import pytest

from tinyforge.env import GridConfig, GridEnv, RewardOnEvent, wrap
from tinyforge.pipeline import RandomAgent, record_to_store, run_episode
from tinyforge.policy import grad_loss
from tinyforge.pretrain import (
    BCTrainer,
    Objective,
    TrainConfig,
    TrainingError,
    bc_loss,
    bc_term,
    load_checkpoint,
    lr_at,
    train_bc,
    write_loss_curve,
)
from tinyforge.trajstore import Modality, TrajStore


def small_store(path, n=12, seed0=0):
    st = TrajStore(path, "a")
    env = wrap(GridEnv(GridConfig(width=4, height=3, num_items=1, max_steps=30)), [RewardOnEvent("pickup", 1.0)])
    for s in range(seed0, seed0 + n):
        record_to_store(run_episode(RandomAgent(), env, s, "tiny"), st, clip_len=8)
    return st


@pytest.fixture
def store(tmp_path):
    st = small_store(tmp_path / "s")
    yield st
    st.close()


def tiny_cfg(**kw):
    base = dict(batch_size=3, seq_len=5, total_steps=40, base_lr=0.05, warmup_steps=5, hidden=6, checkpoint_every=10)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule():
    c = TrainConfig(base_lr=0.01, warmup_steps=100)
    assert lr_at(0, c) == 0.0
    assert lr_at(100, c) == 0.01
    assert lr_at(50, c) == pytest.approx(0.005)
    assert lr_at(5000, c) == 0.01
    seq = [lr_at(s, c) for s in range(300)]
    assert all(a <= b for a, b in zip(seq, seq[1:]))
    assert lr_at(0, TrainConfig(warmup_steps=0)) == c.base_lr


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, warmup_steps=20)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(num_shards=2, shard_id=2)
    with pytest.raises(ValueError):
        TrainConfig.from_json({"bogus": 1})


def test_bc_loss_examples():
    assert bc_loss(np.zeros((3, 6)), np.array([0, 3, 5]), np.ones(3, bool)) == pytest.approx(math.log(6))
    big = np.zeros((2, 6))
    big[0, 2] = big[1, 4] = 60.0
    assert bc_loss(big, np.array([2, 4]), np.ones(2, bool)) < 1e-20
    # two positions, the second masked: equals the first position's term alone
    logits = np.array([[1.0, 2.0, 0.0, 0.0, 0.0, -1.0], [5.0, 0, 0, 0, 0, 0]])
    z = np.exp(logits[0]).sum()
    expected = -(2.0 - math.log(z))
    assert bc_loss(logits, np.array([1, 3]), np.array([True, False])) == pytest.approx(expected, abs=1e-14)
    with pytest.raises(ValueError):
        bc_loss(logits, np.array([1, 3]), np.array([False, False]))


def test_zero_init_loss_is_ln6(store):
    res = train_bc(store, tiny_cfg(init="zero", total_steps=1, warmup_steps=0))
    assert res.losses[0][1] == pytest.approx(math.log(6), abs=1e-12)


def test_deterministic(store):
    a = train_bc(store, tiny_cfg())
    b = train_bc(store, tiny_cfg())
    assert [l for _, l in a.losses] == [l for _, l in b.losses]
    assert a.params.flat().tobytes() == b.params.flat().tobytes()
    c = train_bc(store, tiny_cfg(seed=1))
    assert [l for _, l in c.losses] != [l for _, l in a.losses]


def test_loss_decreases(store):
    res = train_bc(store, tiny_cfg(total_steps=300, base_lr=0.2))
    first, last = np.mean([l for _, l in res.losses[:10]]), np.mean([l for _, l in res.losses[-20:]])
    assert last < first


def test_resume_equivalence(store, tmp_path):
    cfg = tiny_cfg(total_steps=60, checkpoint_every=20)
    full = train_bc(store, cfg, checkpoint_dir=tmp_path / "ck")
    assert (tmp_path / "ck" / "latest").read_text().strip() == "ckpt_00000060"
    # the run crosses epoch boundaries, so resumption restores epoch state too
    assert full.state.epoch >= 1
    resumed = train_bc(store, cfg, resume_from=tmp_path / "ck" / "ckpt_00000020")
    assert resumed.params.flat().tobytes() == full.params.flat().tobytes()
    assert resumed.losses == full.losses
    longer = train_bc(store, tiny_cfg(total_steps=80, checkpoint_every=20), resume_from=tmp_path / "ck")
    assert longer.losses[:60] == full.losses and len(longer.losses) == 80
    with pytest.raises(TrainingError):
        load_checkpoint(tmp_path / "ck", tiny_cfg(total_steps=60, base_lr=0.3))


@dataclass
class Union:
    obs: np.ndarray
    actions: np.ndarray
    first: np.ndarray
    mask: np.ndarray


def test_shard_gradient_sum_equals_union(store):
    cfg = tiny_cfg(num_shards=2, data_parallel=True)
    tr = BCTrainer(store, cfg)
    state = tr.initial_state()
    batches = tr.batches_for(state)
    assert sorted(batches) == [0, 1]
    loss, g, _ = tr.compute(state, batches)
    bs = [batches[0], batches[1]]
    u = Union(
        np.concatenate([b.obs for b in bs]), np.concatenate([b.actions for b in bs]),
        np.concatenate([b.first for b in bs]), np.concatenate([b.mask for b in bs]),
    )
    m0 = np.concatenate([state.lane_states[0], state.lane_states[1]])
    uloss, ug, _, _ = grad_loss(state.params, u, m0, Objective(u, [(bc_term, 1.0)]))
    assert loss == pytest.approx(uloss, rel=1e-12)
    np.testing.assert_allclose(g.flat(), ug.flat(), rtol=1e-10, atol=1e-14)
    # the data-parallel run trains bitwise reproducibly too
    a = train_bc(store, tiny_cfg(num_shards=2, data_parallel=True, total_steps=15))
    b = train_bc(store, tiny_cfg(num_shards=2, data_parallel=True, total_steps=15))
    assert a.losses == b.losses


def test_missing_modalities(tmp_path):
    with TrajStore(tmp_path / "s", "a") as st:
        st.write_episode(b"e" * 16, {Modality.OBSERVATION: np.zeros((5, 3), np.float32)}, clip_len=4)
        with pytest.raises(TrainingError, match="lacks"):
            train_bc(st, tiny_cfg())
    with TrajStore(tmp_path / "empty", "a") as st:
        with pytest.raises(TrainingError):
            train_bc(st, tiny_cfg())


def test_non_finite_loss_keeps_checkpoint(store, tmp_path):
    calls = {"n": 0}

    def poison(batch, logits, values, mask):
        calls["n"] += 1
        v = np.nan if calls["n"] > 12 else 0.0
        return v, np.zeros_like(logits), np.zeros_like(values)

    cfg = tiny_cfg(checkpoint_every=10)
    with pytest.raises(TrainingError, match="ckpt_00000010"):
        train_bc(store, cfg, checkpoint_dir=tmp_path / "ck", objectives=[["bc", 1.0], (poison, 1.0)])
    assert (tmp_path / "ck" / "ckpt_00000010.tfpl").exists()


def test_entropy_objective_changes_training(store):
    a = train_bc(store, tiny_cfg(total_steps=10))
    b = train_bc(store, tiny_cfg(total_steps=10, objectives=[["bc", 1.0], ["entropy", 0.5]]))
    assert a.losses[0] != b.losses[0]
    with pytest.raises(ValueError):
        train_bc(store, tiny_cfg(objectives=[["nope", 1.0]]))


def test_loss_curve_file(store, tmp_path):
    cfg = tiny_cfg(total_steps=5)
    res = train_bc(store, cfg)
    path = write_loss_curve(tmp_path / "loss.txt", res.losses, cfg)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config ")
    rows = [l.split() for l in lines if not l.startswith("#")]
    assert [int(s) for s, _ in rows] == list(range(5))
    assert [float(l) for _, l in rows] == [l for _, l in res.losses]


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="stock base_lr=1e-2 plateaus near 0.83 agreement within 2000 steps; "
                   "gradients are never clipped, so plain SGD step size is the bottleneck")
def test_stock_config_reaches_expert_agreement(tmp_path):
    from tinyforge.bench import ScriptedExpert, action_agreement, get_task, make_env

    task = get_task("collect_simple")
    with TrajStore(tmp_path / "demos", "a") as st:
        for seed in range(200):
            record_to_store(run_episode(ScriptedExpert(task), make_env(task), seed, task.task_id), st)
        res = train_bc(st, TrainConfig())
    assert action_agreement(res.params, task, task.eval_seeds) >= 0.9


def test_final_checkpoint_off_boundary(store, tmp_path):
    with pytest.raises(TrainingError, match="no checkpoint"):
        load_checkpoint(tmp_path / "nowhere", tiny_cfg())
    cfg = tiny_cfg(total_steps=15, checkpoint_every=10)
    train_bc(store, cfg, checkpoint_dir=tmp_path / "ck")
    assert (tmp_path / "ck" / "latest").read_text().strip() == "ckpt_00000015"
    state = load_checkpoint(tmp_path / "ck", cfg)
    assert state.step == 15
