"""Benchmark tasks, success checkers, the scripted expert, and evaluation reports.

Task families map onto distinct success-predicate shapes:

* ``collect`` - inventory counter reaches ``k`` (mining analog)
* ``deliver`` - episode ended by interacting on the goal with the full
  inventory (building analog: location + state)
* ``combine`` - items crafted into tools on the craft cell (crafting analog:
  derived item)

``max_steps`` is derived from a Manhattan tour bound: every leg of the expert's
route costs at most ``(width - 1) + (height - 1)`` moves plus one interact, so
``legs * (width + height - 1) + extra_interacts`` steps always suffice.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .env import DOWN, INTERACT, LEFT, RIGHT, UP, GridConfig, GridEnv, HookedEnv, RewardOnEvent, wrap
from .pipeline import EpisodeRecord, PipelineConfig, PipelineError, PolicyAgent, RandomAgent, run_pipeline
from .policy import PolicyParams, policy_hash, policy_step

EVAL_SEED_START = 100_000
DEFAULT_EVAL_SEEDS = 100


class BenchError(Exception):
    pass


@dataclass
class TaskSpec:
    task_id: str
    family: str
    mode: str
    width: int
    height: int
    num_items: int
    max_steps: int
    rewards: list = field(default_factory=list)  # [[event, value], ...]
    success: dict = field(default_factory=dict)  # {"name": ..., "params": {...}}
    eval_seeds: list = field(default_factory=list)
    goal_k: int | None = None
    craft_cell: list | None = None

    def __post_init__(self):
        if self.mode not in ("simple", "hard"):
            raise BenchError(f"{self.task_id}: mode must be simple or hard")
        if self.width * self.height < self.num_items + 2 + (1 if self.craft_cell else 0):
            raise BenchError(f"{self.task_id}: grid too small for {self.num_items} items")
        if self.max_steps < tour_bound(self):
            raise BenchError(f"{self.task_id}: max_steps {self.max_steps} below tour bound {tour_bound(self)}")
        if self.success.get("name") not in PREDICATES:
            raise BenchError(f"{self.task_id}: unknown success predicate {self.success.get('name')!r}")

    def grid_config(self) -> GridConfig:
        return GridConfig(
            width=self.width,
            height=self.height,
            num_items=self.num_items,
            max_steps=self.max_steps,
            goal_k=self.goal_k,
            craft_cell=tuple(self.craft_cell) if self.craft_cell else None,
        )

    @property
    def obs_dim(self) -> int:
        return self.grid_config().obs_dim

    @property
    def tools_needed(self) -> int:
        return int(self.success.get("params", {}).get("n", 0)) if self.family == "combine" else 0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TaskSpec":
        return cls(**obj)


def tour_bound(task: TaskSpec) -> int:
    legs = task.num_items + 1 + (1 if task.craft_cell else 0)
    extra = max(task.tools_needed - 1, 0)
    return legs * (task.width + task.height - 1) + extra


# -- success predicates: pure functions of (final_obs, terminated) -----------


def _counts(task: TaskSpec, final_obs) -> tuple[int, int]:
    hw = task.width * task.height
    return int(round(float(final_obs[3 * hw]))), int(round(float(final_obs[3 * hw + 1])))


def _inventory_at_least(task, final_obs, terminated, k):
    return _counts(task, final_obs)[0] >= k


def _delivered(task, final_obs, terminated, k):
    return bool(terminated) and _counts(task, final_obs)[0] >= k


def _tools_at_least(task, final_obs, terminated, n):
    return _counts(task, final_obs)[1] >= n


PREDICATES: dict[str, Callable] = {
    "inventory_at_least": _inventory_at_least,
    "delivered": _delivered,
    "tools_at_least": _tools_at_least,
}


def check_final(task: TaskSpec, final_obs, terminated: bool) -> bool:
    if final_obs is None:
        return False
    fn = PREDICATES[task.success["name"]]
    return bool(fn(task, final_obs, terminated, **task.success.get("params", {})))


def make_checker(task: TaskSpec) -> Callable[[EpisodeRecord], bool]:
    def check(rec: EpisodeRecord) -> bool:
        return check_final(task, rec.final_obs, rec.terminated)

    return check


def make_step_checker(task: TaskSpec) -> Callable[[np.ndarray, dict], bool]:
    """Adapter for the PPO collector: (final obs, step info) -> success."""
    return lambda obs, info: check_final(task, obs, bool(info.get("terminated", False)))


def make_env(task: TaskSpec, extra_callbacks: Sequence = ()) -> HookedEnv:
    callbacks = [RewardOnEvent(ev, val) for ev, val in task.rewards]
    return wrap(GridEnv(task.grid_config()), callbacks + list(extra_callbacks))


# -- suite -------------------------------------------------------------------


def _task(task_id, family, mode, w, h, k, rewards, success, goal_k=None, craft=None, n_seeds=DEFAULT_EVAL_SEEDS):
    probe = TaskSpec(task_id, family, mode, w, h, k, 10**9, rewards, success, [], goal_k, craft)
    bound = tour_bound(probe)
    max_steps = 2 * bound if mode == "simple" else math.ceil(1.5 * bound)
    return dataclasses.replace(
        probe, max_steps=max_steps, eval_seeds=list(range(EVAL_SEED_START, EVAL_SEED_START + n_seeds))
    )


def builtin_suite() -> list[TaskSpec]:
    collect_r = [["pickup", 1.0], ["goal", 10.0]]
    combine_r = [["pickup", 1.0], ["craft", 5.0], ["goal", 1.0]]
    return [
        _task("collect_simple", "collect", "simple", 8, 8, 1, collect_r, {"name": "inventory_at_least", "params": {"k": 1}}),
        _task("collect_hard", "collect", "hard", 12, 12, 3, collect_r, {"name": "inventory_at_least", "params": {"k": 3}}),
        _task("deliver_simple", "deliver", "simple", 8, 8, 2, collect_r, {"name": "delivered", "params": {"k": 2}}),
        _task("deliver_hard", "deliver", "hard", 12, 12, 4, collect_r, {"name": "delivered", "params": {"k": 4}}),
        _task("combine_simple", "combine", "simple", 8, 8, 2, combine_r, {"name": "tools_at_least", "params": {"n": 1}},
              goal_k=0, craft=[0, 7]),
        _task("combine_hard", "combine", "hard", 12, 12, 4, combine_r, {"name": "tools_at_least", "params": {"n": 2}},
              goal_k=0, craft=[0, 11]),
    ]


def get_task(task_id: str, suite: Sequence[TaskSpec] | None = None) -> TaskSpec:
    for t in suite if suite is not None else builtin_suite():
        if t.task_id == task_id:
            return t
    raise BenchError(f"unknown task {task_id!r}")


def save_suite(tasks: Sequence[TaskSpec], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"format": "tinyforge-suite", "version": 1, "tasks": [t.to_json() for t in tasks]},
                               indent=2, sort_keys=True) + "\n")
    return path


def load_suite(path) -> list[TaskSpec]:
    if str(path) == "builtin":
        return builtin_suite()
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != "tinyforge-suite":
        raise BenchError(f"{path}: not a suite file")
    return [TaskSpec.from_json(t) for t in obj["tasks"]]


# -- scripted expert ---------------------------------------------------------


def _step_toward(agent, target) -> int:
    (r, c), (tr, tc) = agent, target
    if tr > r:
        return DOWN
    if tr < r:
        return UP
    if tc > c:
        return RIGHT
    return LEFT


class ScriptedExpert:
    """Greedy Manhattan agent: nearest item (row-major tie-break), then craft cell / goal.

    Moves vertically before horizontally. Reads everything it needs from the
    observation vector.
    """

    def __init__(self, task: TaskSpec):
        self.task = task
        self.craft = tuple(task.craft_cell) if task.craft_cell else None

    def reset(self, seed: int) -> None:
        pass

    def parse(self, obs):
        w, h = self.task.width, self.task.height
        hw = w * h
        agent = divmod(int(np.argmax(obs[:hw])), w)
        items = [divmod(int(i), w) for i in np.flatnonzero(obs[hw : 2 * hw] > 0.5)]
        goal = divmod(int(np.argmax(obs[2 * hw : 3 * hw])), w)
        return agent, items, goal, int(round(float(obs[3 * hw]))), int(round(float(obs[3 * hw + 1])))

    def target(self, obs):
        agent, items, goal, inv, tools = self.parse(obs)
        need = self.task.tools_needed
        if self.craft is not None and tools < need:
            cost = 2 * (need - tools)
            if items and inv < cost:
                return agent, self._nearest(agent, items)
            return agent, self.craft
        if items:
            return agent, self._nearest(agent, items)
        return agent, goal

    @staticmethod
    def _nearest(agent, items):
        return min(items, key=lambda c: (abs(c[0] - agent[0]) + abs(c[1] - agent[1]), c))

    def act(self, obs) -> int:
        agent, target = self.target(obs)
        if agent == target:
            return INTERACT
        return _step_toward(agent, target)


# -- agent specs -------------------------------------------------------------


class AgentSpec:
    name: str

    def make(self, task: TaskSpec):
        raise NotImplementedError

    def fits(self, task: TaskSpec) -> bool:
        return True

    def metadata(self) -> dict:
        return {"name": self.name}


class ExpertSpec(AgentSpec):
    name = "scripted-expert"

    def make(self, task):
        return ScriptedExpert(task)

    def metadata(self):
        return {"name": self.name, "kind": "scripted"}


class RandomSpec(AgentSpec):
    name = "random"

    def make(self, task):
        return RandomAgent()

    def metadata(self):
        return {"name": self.name, "kind": "random"}


class PolicySpec(AgentSpec):
    def __init__(self, params: PolicyParams, name: str = "policy", sample: bool = True):
        self.params = params
        self.name = name
        self.sample = sample

    def fits(self, task):
        return task.obs_dim == self.params.obs_dim

    def make(self, task):
        if task.obs_dim != self.params.obs_dim:
            raise BenchError(f"policy obs_dim {self.params.obs_dim} does not fit task {task.task_id} ({task.obs_dim})")
        return PolicyAgent(self.params, sample=self.sample)

    def metadata(self):
        return {"name": self.name, "kind": "policy", "policy_sha256": policy_hash(self.params), "sample": self.sample}


# -- evaluation --------------------------------------------------------------


@dataclass
class TaskResult:
    task_id: str
    seeds: list[int]
    success_rate: float | None = None
    mean_return: float | None = None
    mean_length: float | None = None
    samples: int = 0
    failures: int = 0
    error: str = ""
    per_seed: dict = field(default_factory=dict)  # seed -> success


@dataclass
class RunReport:
    agent: dict
    tasks: dict[str, TaskResult]

    def to_json(self) -> dict:
        return {
            "agent": self.agent,
            "tasks": {
                k: {f.name: getattr(v, f.name) if f.name != "per_seed" else {str(s): b for s, b in v.per_seed.items()}
                    for f in dataclasses.fields(v)}
                for k, v in sorted(self.tasks.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunReport":
        tasks = {}
        for k, v in obj["tasks"].items():
            v = dict(v)
            v["per_seed"] = {int(s): b for s, b in v["per_seed"].items()}
            tasks[k] = TaskResult(**v)
        return cls(obj["agent"], tasks)


def evaluate(agent: AgentSpec, suite: Sequence[TaskSpec], seeds_per_task: int | None = None,
             pipeline_cfg: PipelineConfig | None = None) -> RunReport:
    base = pipeline_cfg or PipelineConfig(num_generators=4)
    results = {}
    for task in suite:
        seeds = list(task.eval_seeds[:seeds_per_task] if seeds_per_task else task.eval_seeds)
        tr = TaskResult(task.task_id, seeds)
        cfg = dataclasses.replace(base, task_id=task.task_id, seeds=seeds,
                                  num_generators=min(base.num_generators, max(len(seeds), 1)),
                                  report_path=None, store_path=None)
        try:
            if not agent.fits(task):
                raise BenchError(f"agent {agent.name} does not fit task {task.task_id}")
            res = run_pipeline(lambda: agent.make(task), lambda: make_env(task), cfg, make_checker(task))
        except (PipelineError, BenchError) as e:
            tr.error = str(e)
            results[task.task_id] = tr
            continue
        ok = [r for r in res.rows if r["outcome"] != "failed"]
        tr.failures = len(res.rows) - len(ok)
        tr.samples = len(ok)
        tr.per_seed = {r["seed"]: bool(r["success"]) for r in ok}
        if ok:
            tr.success_rate = float(np.mean([r["success"] for r in ok]))
            tr.mean_return = float(np.mean([r["return"] for r in ok]))
            tr.mean_length = float(np.mean([r["length"] for r in ok]))
        results[task.task_id] = tr
    return RunReport(agent.metadata(), results)


@dataclass
class Comparison:
    agents: list[str]
    deltas: dict  # (a, b) -> {task: success_rate(a) - success_rate(b)}
    summary: dict  # (a, b) -> {"win": n, "tie": n, "loss": n}

    def render(self) -> str:
        lines = []
        for (a, b), per_task in self.deltas.items():
            s = self.summary[(a, b)]
            lines.append(f"{a} vs {b}: win {s['win']} / tie {s['tie']} / loss {s['loss']}")
            width = max(len(t) for t in per_task) if per_task else 4
            for t, d in per_task.items():
                lines.append(f"  {t:<{width}}  {'n/a' if d is None else f'{d:+.3f}'}")
        return "\n".join(lines) + "\n"


def compare(reports: Sequence[RunReport], tol: float = 0.0) -> Comparison:
    if not reports:
        raise BenchError("nothing to compare")
    ref = reports[0]
    for r in reports[1:]:
        if set(r.tasks) != set(ref.tasks):
            raise BenchError("reports cover different task suites")
        for t in ref.tasks:
            if list(r.tasks[t].seeds) != list(ref.tasks[t].seeds):
                raise BenchError(f"seed lists differ for task {t}")
    names = [r.agent.get("name", f"agent{i}") for i, r in enumerate(reports)]
    deltas, summary = {}, {}
    for i in range(len(reports)):
        for j in range(i + 1, len(reports)):
            a, b = reports[i], reports[j]
            key = (names[i], names[j]) if names[i] != names[j] else (f"{names[i]}#{i}", f"{names[j]}#{j}")
            per, s = {}, {"win": 0, "tie": 0, "loss": 0}
            for t in sorted(ref.tasks):
                ra, rb = a.tasks[t].success_rate, b.tasks[t].success_rate
                if ra is None or rb is None:
                    per[t] = None
                    continue
                d = ra - rb
                per[t] = d
                s["win" if d > tol else "loss" if d < -tol else "tie"] += 1
            deltas[key], summary[key] = per, s
    return Comparison(names, deltas, summary)


# -- imitation quality -------------------------------------------------------


def action_agreement(params: PolicyParams, task: TaskSpec, seeds: Sequence[int]) -> float:
    """Fraction of expert states where the policy's argmax matches the expert action.

    The policy observes the expert's trajectory with its memory carried
    along each episode.
    """
    hits = total = 0
    expert = ScriptedExpert(task)
    for seed in seeds:
        env = make_env(task)
        obs = env.reset(seed)
        state = np.zeros(params.hidden)
        done = False
        while not done:
            a = expert.act(obs)
            out = policy_step(params, obs, state)
            state = out.next_state
            hits += int(np.argmax(out.logits) == a)
            total += 1
            obs, _, done, _ = env.step(a)
    return hits / total
