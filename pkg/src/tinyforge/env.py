"""Deterministic gridworld and a hook-based callback wrapper around it.

The bare :class:`GridEnv` pays no reward; all reward, logging and world
edits come from :class:`Callback` subclasses stacked by :func:`wrap`.
"""

from __future__ import annotations

import collections
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UP, DOWN, LEFT, RIGHT, INTERACT, NOOP = range(6)
NUM_ACTIONS = 6
ACTION_NAMES = ("up", "down", "left", "right", "interact", "noop")
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}

MASK64 = (1 << 64) - 1


class XorShift64Star:
    """xorshift64* (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D).

    The seed is xored with 0x9E3779B97F4A7C15 so that seed 0 still yields a
    non-zero state. :meth:`below` uses the high 32 output bits.
    """

    MULT = 0x2545F4914F6CDD1D
    SEED_XOR = 0x9E3779B97F4A7C15

    def __init__(self, seed: int):
        s = (int(seed) ^ self.SEED_XOR) & MASK64
        self.state = s or self.SEED_XOR

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & MASK64

    def below(self, n: int) -> int:
        return (self.next() >> 32) % n


class EnvError(Exception):
    pass


class PlacementError(EnvError):
    pass


class CallbackError(EnvError):
    def __init__(self, name: str, hook: str, cause: BaseException):
        self.callback = name
        self.hook = hook
        super().__init__(f"callback {name}.{hook} failed: {cause!r}")


@dataclass(frozen=True)
class GridConfig:
    width: int = 8
    height: int = 8
    num_items: int = 1
    max_steps: int = 64
    # inventory needed for interact-on-goal to end the episode; None -> num_items
    goal_k: int | None = None
    craft_cell: tuple[int, int] | None = None
    craft_cost: int = 2

    @property
    def goal_requirement(self) -> int:
        return self.num_items if self.goal_k is None else self.goal_k

    @property
    def goal(self) -> tuple[int, int]:
        return (self.height - 1, self.width - 1)

    @property
    def obs_dim(self) -> int:
        return 3 * self.width * self.height + 2


@dataclass
class GridState:
    width: int
    height: int
    agent: tuple[int, int]
    items: set[tuple[int, int]]
    goal: tuple[int, int]
    inventory: int = 0
    tools: int = 0
    step_count: int = 0
    rng_seed: int = 0
    max_steps: int = 64
    done: bool = False
    initial_items: int = 0


def place_items(cfg: GridConfig, seed: int) -> list[tuple[int, int]]:
    """Draw ``num_items`` distinct free cells (row-major free list, index = below(len))."""
    blocked = {(0, 0), cfg.goal}
    if cfg.craft_cell is not None:
        blocked.add(tuple(cfg.craft_cell))
    free = [(r, c) for r in range(cfg.height) for c in range(cfg.width) if (r, c) not in blocked]
    if len(free) < cfg.num_items or cfg.width * cfg.height < 2:
        raise PlacementError(
            f"cannot place {cfg.num_items} items on a {cfg.height}x{cfg.width} grid"
        )
    rng = XorShift64Star(seed)
    out = []
    for _ in range(cfg.num_items):
        out.append(free.pop(rng.below(len(free))))
    return out


class GridEnv:
    def __init__(self, config: GridConfig | None = None, **overrides):
        cfg = config or GridConfig()
        self.config = replace(cfg, **overrides) if overrides else cfg
        self.state: GridState | None = None

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    def reset(self, seed: int = 0) -> np.ndarray:
        cfg = self.config
        items = place_items(cfg, seed)
        self.state = GridState(
            width=cfg.width,
            height=cfg.height,
            agent=(0, 0),
            items=set(items),
            goal=cfg.goal,
            rng_seed=int(seed) & MASK64,
            max_steps=cfg.max_steps,
            initial_items=len(items),
        )
        return self.observe()

    def observe(self) -> np.ndarray:
        s = self.state
        hw = s.width * s.height
        obs = np.zeros(3 * hw + 2, dtype=np.float32)
        obs[s.agent[0] * s.width + s.agent[1]] = 1.0
        for r, c in s.items:
            obs[hw + r * s.width + c] = 1.0
        obs[2 * hw + s.goal[0] * s.width + s.goal[1]] = 1.0
        obs[3 * hw] = s.inventory
        obs[3 * hw + 1] = s.tools
        return obs

    def _in_bounds(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.state.height and 0 <= c < self.state.width

    def apply_command(self, cmd: Sequence) -> None:
        name, *args = cmd
        s = self.state
        if name == "set_agent":
            cell = tuple(int(v) for v in args[0])
            if not self._in_bounds(cell):
                raise EnvError(f"set_agent {cell} out of bounds")
            s.agent = cell
        elif name == "add_item":
            cell = tuple(int(v) for v in args[0])
            if not self._in_bounds(cell):
                raise EnvError(f"add_item {cell} out of bounds")
            if cell not in s.items:
                s.items.add(cell)
                s.initial_items += 1
        elif name == "clear_items":
            s.items.clear()
        elif name == "set_max_steps":
            s.max_steps = int(args[0])
        else:
            raise EnvError(f"unknown command {name!r}")

    def step(self, action: int) -> tuple[np.ndarray, float, bool, dict[str, Any]]:
        s = self.state
        if s is None:
            raise EnvError("step before reset")
        if s.done:
            raise EnvError("step after done")
        action = int(action)
        if not 0 <= action < NUM_ACTIONS:
            raise EnvError(f"invalid action {action}")
        cfg = self.config
        terminated = False
        if action in _MOVES:
            dr, dc = _MOVES[action]
            target = (s.agent[0] + dr, s.agent[1] + dc)
            if self._in_bounds(target):
                s.agent = target
                event = "move"
            else:
                event = "bump"
        elif action == INTERACT:
            if s.agent in s.items:
                s.items.discard(s.agent)
                s.inventory += 1
                event = "pickup"
            elif cfg.craft_cell is not None and s.agent == tuple(cfg.craft_cell) and s.inventory >= cfg.craft_cost:
                s.inventory -= cfg.craft_cost
                s.tools += 1
                event = "craft"
            elif s.agent == s.goal and s.inventory >= cfg.goal_requirement:
                terminated = True
                event = "goal"
            else:
                event = "interact_noop"
        else:
            event = "noop"
        s.step_count += 1
        truncated = not terminated and s.step_count >= s.max_steps
        s.done = terminated or truncated
        info = {
            "event": event,
            "step": s.step_count,
            "terminated": terminated,
            "truncated": truncated,
        }
        return self.observe(), 0.0, s.done, info


# -- hooks -------------------------------------------------------------------


@dataclass
class HookContext:
    env: GridEnv
    seed: int = 0
    obs: np.ndarray | None = None
    action: int | None = None
    reward: float = 0.0
    done: bool = False
    info: dict[str, Any] = field(default_factory=dict)
    commands: list[tuple] = field(default_factory=list)


class Callback:
    """Subclass and override any of the four hook points."""

    @property
    def name(self) -> str:
        return type(self).__name__

    def on_reset_pre(self, ctx: HookContext) -> None:
        pass

    def on_reset_post(self, ctx: HookContext) -> None:
        pass

    def on_step_pre(self, ctx: HookContext) -> None:
        pass

    def on_step_post(self, ctx: HookContext) -> None:
        pass


class HookedEnv:
    """``env`` with ``callbacks`` invoked in list order at every hook point.

    Reset: on_reset_pre -> base reset -> queued commands -> observe -> on_reset_post.
    Step:  on_step_pre -> queued commands (queue order) -> physics -> on_step_post.
    Commands queued during a post hook wait for the next step's drain point.
    """

    def __init__(self, env: GridEnv, callbacks: Iterable[Callback] = ()):
        self.env = env
        self.callbacks = list(callbacks)
        self.ctx: HookContext | None = None
        self.aborted = False

    @property
    def config(self) -> GridConfig:
        return self.env.config

    @property
    def state(self) -> GridState:
        return self.env.state

    @property
    def obs_dim(self) -> int:
        return self.env.obs_dim

    def _run(self, hook: str) -> None:
        for cb in self.callbacks:
            try:
                getattr(cb, hook)(self.ctx)
            except Exception as e:
                self.aborted = True
                logger.error("episode aborted by %s.%s: %r", cb.name, hook, e)
                raise CallbackError(cb.name, hook, e) from e

    def _drain(self) -> None:
        queue, self.ctx.commands = self.ctx.commands, []
        for cmd in queue:
            self.env.apply_command(cmd)

    def reset(self, seed: int = 0) -> np.ndarray:
        self.aborted = False
        self.ctx = HookContext(env=self.env, seed=seed)
        self._run("on_reset_pre")
        self.env.reset(seed)
        self._drain()
        self.ctx.obs = self.env.observe()
        self._run("on_reset_post")
        return self.ctx.obs

    def step(self, action: int):
        if self.aborted:
            raise EnvError("episode was aborted; reset first")
        ctx = self.ctx
        ctx.action = int(action)
        ctx.reward = 0.0
        ctx.info = {}
        self._run("on_step_pre")
        self._drain()
        obs, reward, done, info = self.env.step(ctx.action)
        ctx.obs, ctx.reward, ctx.done = obs, ctx.reward + reward, done
        ctx.info.update(info)
        self._run("on_step_post")
        return ctx.obs, ctx.reward, ctx.done, ctx.info


def wrap(env: GridEnv, callbacks: Iterable[Callback] = ()) -> HookedEnv:
    return HookedEnv(env, callbacks)


# -- built-in callbacks ------------------------------------------------------


class RewardOnEvent(Callback):
    """Add ``value`` to the step reward when the physics event matches.

    ``event="step"`` fires on every step.
    """

    def __init__(self, event: str, value: float):
        self.event = event
        self.value = float(value)

    @property
    def name(self) -> str:
        return f"RewardOnEvent[{self.event}]"

    def on_step_post(self, ctx):
        if self.event == "step" or ctx.info.get("event") == self.event:
            ctx.reward += self.value


class CommandOnReset(Callback):
    def __init__(self, commands: Iterable[Sequence]):
        self.commands = [tuple(c) for c in commands]

    def on_reset_pre(self, ctx):
        ctx.commands.extend(self.commands)


class ObservationOverride(Callback):
    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def on_reset_post(self, ctx):
        ctx.obs = self.fn(ctx.obs)

    def on_step_post(self, ctx):
        ctx.obs = self.fn(ctx.obs)


class FpsMonitor(Callback):
    """Report steps/sec over the last ``window`` steps as ``info["fps"]``."""

    def __init__(self, window: int = 100, clock: Callable[[], float] = time.perf_counter):
        self.window = window
        self.clock = clock
        self._stamps: collections.deque[float] = collections.deque(maxlen=window + 1)

    def on_reset_post(self, ctx):
        self._stamps.clear()
        self._stamps.append(self.clock())

    def on_step_post(self, ctx):
        self._stamps.append(self.clock())
        span = self._stamps[-1] - self._stamps[0]
        ctx.info["fps"] = (len(self._stamps) - 1) / span if span > 0 else float("inf")


class EpisodeLogger(Callback):
    """Write each finished episode as an exchange file under ``path``."""

    def __init__(self, path, task_id: str = "unknown"):
        from pathlib import Path

        self.path = Path(path)
        self.task_id = task_id
        self.written: list = []
        self._obs: list[np.ndarray] = []
        self._actions: list[int] = []
        self._rewards: list[float] = []

    def on_reset_post(self, ctx):
        self._seed = ctx.seed
        self._obs = [np.array(ctx.obs, copy=True)]
        self._actions, self._rewards = [], []

    def on_step_post(self, ctx):
        self._actions.append(int(ctx.action))
        self._rewards.append(float(ctx.reward))
        if ctx.done:
            from .exchange import EpisodeExchange, episode_id_for

            ex = EpisodeExchange(
                episode_id=episode_id_for(self.task_id, self._seed),
                task_id=self.task_id,
                seed=self._seed,
                obs=np.stack(self._obs),
                actions=np.array(self._actions, dtype=np.int64),
                rewards=np.array(self._rewards, dtype=np.float64),
            )
            self.path.mkdir(parents=True, exist_ok=True)
            self.written.append(ex.write(self.path / ex.filename()))
        else:
            self._obs.append(np.array(ctx.obs, copy=True))
