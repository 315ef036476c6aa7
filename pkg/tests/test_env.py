import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyforge.env import (
    DOWN,
    INTERACT,
    LEFT,
    NOOP,
    RIGHT,
    UP,
    Callback,
    CallbackError,
    CommandOnReset,
    EnvError,
    EpisodeLogger,
    FpsMonitor,
    GridConfig,
    GridEnv,
    ObservationOverride,
    PlacementError,
    RewardOnEvent,
    XorShift64Star,
    place_items,
    wrap,
)
from tinyforge.exchange import EpisodeExchange


def xorshift_ref(seed, n):
    # straight-line reference, written against the published algorithm
    m = 2**64 - 1
    x = (seed ^ 0x9E3779B97F4A7C15) & m
    out = []
    for _ in range(n):
        x ^= x >> 12
        x ^= (x << 25) & m
        x ^= x >> 27
        out.append((x * 0x2545F4914F6CDD1D) % 2**64)
    return out


def test_xorshift_matches_reference():
    for seed in (0, 1, 7, 2**63 + 5):
        rng = XorShift64Star(seed)
        assert [rng.next() for _ in range(20)] == xorshift_ref(seed, 20)


def test_reset_deterministic():
    env = GridEnv(GridConfig(num_items=3))
    a = env.reset(7)
    b = env.reset(7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, env.reset(8))


def test_placement_distinct_cells():
    env = GridEnv(GridConfig(num_items=3))
    for seed in range(50):
        env.reset(seed)
        s = env.state
        cells = {s.agent, s.goal, *s.items}
        assert len(cells) == 5
        assert s.agent == (0, 0) and s.goal == (7, 7)


def test_placement_infeasible():
    with pytest.raises(PlacementError):
        GridEnv(GridConfig(width=1, height=1, num_items=1)).reset(0)
    with pytest.raises(PlacementError):
        place_items(GridConfig(width=2, height=2, num_items=3), 0)


def test_observation_layout():
    env = GridEnv(GridConfig(width=5, height=4, num_items=2))
    obs = env.reset(3)
    assert obs.shape == (3 * 20 + 2,) and obs.dtype == np.float32
    s = env.state
    planes = obs[:60].reshape(3, 4, 5)
    assert planes[0].sum() == 1 and planes[0][0, 0] == 1
    assert {tuple(c) for c in np.argwhere(planes[1])} == s.items
    assert planes[2][3, 4] == 1 and planes[2].sum() == 1
    assert obs[60] == 0 and obs[61] == 0


def test_moves_and_border_clamp():
    env = GridEnv()
    env.reset(0)
    _, _, _, info = env.step(RIGHT)
    assert env.state.agent == (0, 1) and info["event"] == "move"
    env.reset(0)
    _, r, _, info = env.step(UP)
    assert env.state.agent == (0, 0) and info["event"] == "bump" and r == 0.0
    env.step(LEFT)
    assert env.state.agent == (0, 0)
    env.step(DOWN)
    assert env.state.agent == (1, 0)


def test_pickup():
    env = GridEnv()
    env.reset(0)
    item = next(iter(env.state.items))
    env.state.agent = item
    obs, _, _, info = env.step(INTERACT)
    assert info["event"] == "pickup"
    assert env.state.inventory == 1 and item not in env.state.items
    assert obs[3 * 64] == 1


def test_goal_needs_inventory_and_max_steps():
    env = GridEnv(GridConfig(num_items=1, max_steps=5))
    env.reset(0)
    env.state.agent = env.state.goal
    _, _, done, info = env.step(INTERACT)
    assert not done and info["event"] == "interact_noop"
    env.state.inventory = 1
    _, _, done, info = env.step(INTERACT)
    assert done and info["terminated"] and info["event"] == "goal"
    with pytest.raises(EnvError):
        env.step(NOOP)
    env.reset(0)
    for i in range(5):
        _, _, done, info = env.step(NOOP)
    assert done and info["truncated"] and not info["terminated"]


def test_craft():
    env = GridEnv(GridConfig(num_items=2, craft_cell=(0, 7), goal_k=0, craft_cost=2))
    env.reset(0)
    env.state.agent = (0, 7)
    env.state.inventory = 2
    _, _, _, info = env.step(INTERACT)
    assert info["event"] == "craft" and env.state.tools == 1 and env.state.inventory == 0


def rollout(env, seed, actions):
    out = [env.reset(seed)]
    for a in actions:
        obs, r, done, info = env.step(a)
        out.append((obs, r, done, info["event"]))
        if done:
            break
    return out


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), actions=st.lists(st.integers(0, 5), max_size=80))
def test_empty_wrapper_is_neutral(seed, actions):
    cfg = GridConfig(num_items=2, max_steps=40)
    bare = rollout(GridEnv(cfg), seed, actions)
    wrapped = rollout(wrap(GridEnv(cfg), []), seed, actions)
    assert np.array_equal(bare[0], wrapped[0])
    assert len(bare) == len(wrapped)
    for x, y in zip(bare[1:], wrapped[1:]):
        assert np.array_equal(x[0], y[0]) and x[1:] == y[1:]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), actions=st.lists(st.integers(0, 5), min_size=1, max_size=120))
def test_reward_counts_pickups_and_conservation(seed, actions):
    env = wrap(GridEnv(GridConfig(num_items=3, max_steps=200)), [RewardOnEvent("pickup", 1.0)])
    env.reset(seed)
    n0 = len(env.state.items)
    total = 0.0
    seen_removed = set()
    for a in actions:
        before = set(env.state.items)
        _, r, done, _ = env.step(a)
        total += r
        seen_removed |= before - env.state.items
        assert not (seen_removed & env.state.items)
        assert env.state.inventory <= n0
        if done:
            break
    assert total == env.state.inventory


def test_scripted_pickup_count():
    # walk the whole top row, pressing interact at every cell
    env = wrap(GridEnv(GridConfig(num_items=3, max_steps=200)), [RewardOnEvent("pickup", 1.0)])
    env.reset(0)
    items = set(env.state.items)
    expected = sum(1 for r, c in items if r == 0)
    actions = []
    for _ in range(8):
        actions += [INTERACT, RIGHT]
    total = sum(env.step(a)[1] for a in actions)
    assert total == expected == env.state.inventory


def test_stacked_rewards_sum():
    env = wrap(GridEnv(), [RewardOnEvent("move", 1.0), RewardOnEvent("move", 0.5)])
    env.reset(0)
    assert env.step(RIGHT)[1] == 1.5
    assert env.step(UP)[1] == 0.0


class Recorder(Callback):
    def __init__(self, tag, log):
        self.tag, self.log = tag, log

    def on_reset_pre(self, ctx):
        self.log.append((self.tag, "reset_pre"))

    def on_reset_post(self, ctx):
        self.log.append((self.tag, "reset_post"))

    def on_step_pre(self, ctx):
        self.log.append((self.tag, "step_pre", ctx.action))

    def on_step_post(self, ctx):
        self.log.append((self.tag, "step_post", ctx.reward))


class SetAction(Callback):
    def on_step_pre(self, ctx):
        ctx.action = RIGHT


def test_hook_order_and_visibility():
    log = []
    env = wrap(GridEnv(), [Recorder("a", log), SetAction(), RewardOnEvent("move", 2.0), Recorder("b", log)])
    env.reset(0)
    assert log == [("a", "reset_pre"), ("b", "reset_pre"), ("a", "reset_post"), ("b", "reset_post")]
    log.clear()
    env.step(NOOP)
    # b sees the action rewritten by SetAction and the reward added before it
    assert log == [("a", "step_pre", NOOP), ("b", "step_pre", RIGHT), ("a", "step_post", 0.0), ("b", "step_post", 2.0)]
    assert env.state.agent == (0, 1)


class QueueOnStep(Callback):
    def __init__(self, cmds):
        self.cmds = cmds

    def on_step_pre(self, ctx):
        ctx.commands.extend(self.cmds)
        self.cmds = []


def test_commands_applied_before_physics_in_order():
    env = wrap(GridEnv(GridConfig(num_items=1)), [QueueOnStep([("clear_items",), ("set_agent", (3, 3)), ("add_item", (3, 3))])])
    env.reset(0)
    _, _, _, info = env.step(INTERACT)
    assert info["event"] == "pickup" and env.state.inventory == 1 and not env.state.items


def test_command_on_reset_and_max_steps():
    env = wrap(GridEnv(GridConfig(num_items=1)), [CommandOnReset([("clear_items",), ("add_item", (2, 2)), ("set_max_steps", 3)])])
    obs = env.reset(5)
    assert env.state.items == {(2, 2)}
    assert obs[64 + 2 * 8 + 2] == 1
    done = False
    n = 0
    while not done:
        _, _, done, _ = env.step(NOOP)
        n += 1
    assert n == 3
    with pytest.raises(EnvError):
        wrap(GridEnv(), [CommandOnReset([("teleport",)])]).reset(0)


class Boom(Callback):
    name = "Boom"

    def on_step_post(self, ctx):
        raise RuntimeError("kaboom")


def test_callback_error_attributed():
    env = wrap(GridEnv(), [RewardOnEvent("move", 1.0), Boom()])
    env.reset(0)
    with pytest.raises(CallbackError) as ei:
        env.step(RIGHT)
    assert ei.value.callback == "Boom" and ei.value.hook == "on_step_post"
    with pytest.raises(EnvError):
        env.step(RIGHT)
    env.reset(0)  # reset clears the abort


def test_observation_override():
    env = wrap(GridEnv(), [ObservationOverride(lambda o: o * 0 - 1)])
    assert (env.reset(0) == -1).all()
    assert (env.step(RIGHT)[0] == -1).all()


def test_fps_monitor_fake_clock():
    ticks = iter(np.arange(0, 100, 0.5))
    env = wrap(GridEnv(), [FpsMonitor(window=4, clock=lambda: next(ticks))])
    env.reset(0)
    for _ in range(6):
        info = env.step(NOOP)[3]
    assert info["fps"] == pytest.approx(2.0)


def test_episode_logger(tmp_path):
    log = EpisodeLogger(tmp_path, task_id="t")
    env = wrap(GridEnv(GridConfig(max_steps=6)), [RewardOnEvent("move", 1.0), log])
    obs0 = env.reset(11)
    acts = [RIGHT, DOWN, UP, LEFT, NOOP, RIGHT]
    for a in acts:
        env.step(a)
    assert len(log.written) == 1
    ex = EpisodeExchange.read(log.written[0])
    assert ex.seed == 11 and ex.task_id == "t"
    assert ex.actions.tolist() == acts
    assert ex.rewards.tolist() == [1, 1, 1, 1, 0, 1]
    assert ex.obs.shape == (6, 194) and np.array_equal(ex.obs[0], obs0)
