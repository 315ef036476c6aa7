"""Asynchronous generator -> filter -> recorder rollout pipeline.

Generators each own one env and one agent and run a fixed, deterministic
block of seeds. Filters are stateless workers on a bounded queue. A single
recorder (the calling thread) aggregates, writes the report and optionally
appends accepted episodes to a trajectory store.

Every assigned seed ends in exactly one of three buckets: recorded,
filtered_out or failed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .exchange import episode_id_for
from .policy import PolicyParams, log_softmax, policy_step
from .trajstore import EpisodeManifest, Modality, TrajStore

logger = logging.getLogger(__name__)

RECORDED, FILTERED, FAILED = "recorded", "filtered", "failed"


class PipelineError(Exception):
    pass


class Agent(Protocol):
    def reset(self, seed: int) -> None: ...

    def act(self, obs: np.ndarray) -> int: ...


class PolicyAgent:
    """Drives a recurrent policy; memory resets at every episode start.

    ``sample=True`` draws actions from a per-episode RNG seeded by the
    episode seed, so rollouts stay reproducible.
    """

    def __init__(self, params: PolicyParams, sample: bool = True):
        self.params = params
        self.sample = sample
        self.state = np.zeros(params.hidden)
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int) -> None:
        self.state = np.zeros(self.params.hidden)
        self.rng = np.random.default_rng([int(seed), 7])

    def act(self, obs) -> int:
        out = policy_step(self.params, obs, self.state)
        self.state = out.next_state
        if not self.sample:
            return int(np.argmax(out.logits))
        p = np.exp(log_softmax(out.logits))
        return int(min(np.searchsorted(np.cumsum(p), self.rng.random(), side="right"), len(p) - 1))


class RandomAgent:
    def __init__(self, num_actions: int = 6):
        self.num_actions = num_actions
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int) -> None:
        self.rng = np.random.default_rng([int(seed), 11])

    def act(self, obs) -> int:
        return int(self.rng.integers(self.num_actions))


@dataclass
class EpisodeRecord:
    episode_id: bytes
    task_id: str
    seed: int
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    final_obs: np.ndarray | None
    terminated: bool
    success: bool
    generator_id: int
    status: str = "ok"  # or "failed"
    error: str = ""
    labels: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards)) if len(self.rewards) else 0.0

    def report_row(self, outcome: str) -> dict:
        return {
            "task_id": self.task_id,
            "seed": self.seed,
            "episode_id": self.episode_id.hex(),
            "outcome": outcome,
            "return": self.total_return,
            "success": bool(self.success),
            "length": self.length,
            "generator_id": self.generator_id,
            "error": self.error,
        }


def failed_record(task_id: str, seed: int, generator_id: int, error: str, salt: str = "") -> EpisodeRecord:
    return EpisodeRecord(
        episode_id=episode_id_for(task_id, seed, salt),
        task_id=task_id,
        seed=seed,
        obs=np.zeros((0, 0), dtype=np.float32),
        actions=np.zeros(0, dtype=np.int64),
        rewards=np.zeros(0),
        final_obs=None,
        terminated=False,
        success=False,
        generator_id=generator_id,
        status="failed",
        error=error,
    )


def run_episode(agent, env, seed: int, task_id: str, generator_id: int = 0,
                success_fn: Callable[[EpisodeRecord], bool] | None = None, salt: str = "") -> EpisodeRecord:
    t0 = time.perf_counter()
    agent.reset(seed)
    obs = env.reset(seed)
    obs_list, actions, rewards = [], [], []
    done, info = False, {}
    while not done:
        obs_list.append(np.array(obs, dtype=np.float32, copy=True))
        a = int(agent.act(obs))
        obs, r, done, info = env.step(a)
        actions.append(a)
        rewards.append(float(r))
    rec = EpisodeRecord(
        episode_id=episode_id_for(task_id, seed, salt),
        task_id=task_id,
        seed=int(seed),
        obs=np.stack(obs_list),
        actions=np.array(actions, dtype=np.int64),
        rewards=np.array(rewards, dtype=np.float64),
        final_obs=np.array(obs, dtype=np.float32, copy=True),
        terminated=bool(info.get("terminated", False)),
        success=False,
        generator_id=generator_id,
        labels=[task_id],
    )
    rec.success = bool(success_fn(rec)) if success_fn else False
    rec.wall_time = time.perf_counter() - t0
    return rec


# -- filters -----------------------------------------------------------------


def truncate_record(rec: EpisodeRecord, n: int, success_fn=None) -> EpisodeRecord:
    if rec.length <= n:
        return rec
    out = dataclasses.replace(
        rec,
        obs=rec.obs[:n],
        actions=rec.actions[:n],
        rewards=rec.rewards[:n],
        final_obs=rec.obs[n],
        terminated=False,
    )
    out.success = bool(success_fn(out)) if success_fn else False
    return out


def filter_chain(spec: Sequence, success_fn: Callable[[EpisodeRecord], bool] | None = None):
    """Build ``record -> (accepted, record)`` from a list of filter specs.

    Specs are names or ``[name, arg]`` pairs: ``success_only``,
    ``["min_return", x]``, ``["truncate", n]``, ``["relabel", label]``.
    Filters run in order and stop at the first reject; ``truncate`` recomputes
    success, so ``truncate`` before ``success_only`` tests the truncated episode.
    """
    steps: list[Callable[[EpisodeRecord], EpisodeRecord | None]] = []
    for item in spec:
        name, *args = [item] if isinstance(item, str) else list(item)
        if name == "success_only":
            steps.append(lambda r: r if r.success else None)
        elif name == "min_return":
            x = float(args[0])
            steps.append(lambda r, x=x: r if r.total_return >= x else None)
        elif name == "truncate":
            n = int(args[0])
            steps.append(lambda r, n=n: truncate_record(r, n, success_fn))
        elif name == "relabel":
            label = str(args[0])
            steps.append(lambda r, label=label: dataclasses.replace(r, labels=[label]))
        else:
            raise ValueError(f"unknown filter {name!r}")

    def apply(rec: EpisodeRecord) -> tuple[bool, EpisodeRecord]:
        for f in steps:
            out = f(rec)
            if out is None:
                return False, rec
            rec = out
        return True, rec

    return apply


# -- recorder ----------------------------------------------------------------


def record_to_store(record: EpisodeRecord, store: TrajStore, clip_len: int = 64) -> EpisodeManifest:
    labels = record.labels or [record.task_id]
    return store.write_episode(
        record.episode_id,
        {
            Modality.OBSERVATION: record.obs.astype(np.float32),
            Modality.ACTION: record.actions.astype(np.int64),
            Modality.REWARD: record.rewards.astype(np.float64),
        },
        clip_len=clip_len,
        labels=[(l, 0, record.length) for l in labels],
        source=f"rollout task={record.task_id} seed={record.seed} generator={record.generator_id}",
    )


@dataclass
class PipelineConfig:
    task_id: str = "task"
    num_generators: int = 1
    episodes_per_generator: int = 1
    queue_capacity: int = 8
    num_filters: int = 1
    filters: list = field(default_factory=list)
    report_path: str | None = None
    store_path: str | None = None
    clip_len: int = 64
    seed_base: int = 0
    # explicit seed list, split into contiguous per-generator blocks
    seeds: list[int] | None = None
    id_salt: str = ""

    def __post_init__(self):
        for name in ("num_generators", "episodes_per_generator", "queue_capacity", "num_filters", "clip_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def assign_seeds(cfg: PipelineConfig) -> list[list[int]]:
    if cfg.seeds is not None:
        return [list(map(int, block)) for block in np.array_split(np.array(cfg.seeds, dtype=np.int64), cfg.num_generators)]
    E = cfg.episodes_per_generator
    return [[cfg.seed_base + g * E + i for i in range(E)] for g in range(cfg.num_generators)]


@dataclass
class PipelineStats:
    produced: int = 0
    recorded: int = 0
    filtered_out: int = 0
    failed: int = 0
    per_generator: dict[int, int] = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def throughput(self) -> float:
        return self.produced / self.elapsed if self.elapsed > 0 else 0.0


@dataclass
class PipelineResult:
    stats: PipelineStats
    rows: list[dict]  # sorted by (task_id, seed)
    run_id: str
    recorded: list[EpisodeRecord] = field(default_factory=list)

    def outcomes(self) -> dict[int, tuple]:
        return {r["seed"]: (r["outcome"], r["return"], r["success"], r["length"]) for r in self.rows}


def run_id_for(cfg_echo: dict) -> str:
    return hashlib.sha1(json.dumps(cfg_echo, sort_keys=True).encode()).hexdigest()[:12]


def write_report(path, cfg_echo: dict, rows: list[dict], partial: bool = False) -> Path:
    path = Path(path)
    header = {"kind": "header", "run_id": run_id_for(cfg_echo), "config": cfg_echo}
    if partial:
        header["partial"] = True
    lines = [json.dumps(header, sort_keys=True)] + [json.dumps(r, sort_keys=True) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_report(path) -> tuple[dict, list[dict]]:
    lines = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
    return lines[0], lines[1:]


_DONE = object()


def _put(q: queue.Queue, item, stop: threading.Event) -> bool:
    while not stop.is_set():
        try:
            q.put(item, timeout=0.05)
            return True
        except queue.Full:
            continue
    return False


def run_pipeline(
    agent_factory: Callable[[], Any],
    env_factory: Callable[[], Any],
    cfg: PipelineConfig,
    success_fn: Callable[[EpisodeRecord], bool] | None = None,
    fault: Callable[[int, int], None] | None = None,
    keep_records: bool = False,
    config_echo: dict | None = None,
) -> PipelineResult:
    """Run every assigned seed through generate -> filter -> record.

    ``fault(generator_id, seed)`` is a test hook called before each episode;
    raising from it crashes that generator, whose remaining seeds become
    failed records.
    """
    blocks = assign_seeds(cfg)
    chain = filter_chain(cfg.filters, success_fn)
    produced_q: queue.Queue = queue.Queue(maxsize=cfg.queue_capacity)
    filtered_q: queue.Queue = queue.Queue(maxsize=cfg.queue_capacity)
    stop = threading.Event()
    t0 = time.perf_counter()

    def generator(g: int, seeds: list[int]):
        agent, env = None, None
        for i, seed in enumerate(seeds):
            try:
                if agent is None:
                    agent, env = agent_factory(), env_factory()
                if fault is not None:
                    fault(g, seed)
                rec = run_episode(agent, env, seed, cfg.task_id, g, success_fn, cfg.id_salt)
            except Exception as e:
                logger.error("generator %d crashed on seed %d: %r", g, seed, e)
                for s in seeds[i:]:
                    if not _put(produced_q, failed_record(cfg.task_id, s, g, f"generator crash: {e!r}", cfg.id_salt), stop):
                        return
                return
            if not _put(produced_q, rec, stop):
                return

    def filter_worker():
        while True:
            item = produced_q.get()
            if item is _DONE:
                _put(filtered_q, _DONE, stop)
                return
            if item.status == "failed":
                msg = (FAILED, item)
            else:
                try:
                    ok, out = chain(item)
                    msg = (RECORDED if ok else FILTERED, out)
                except Exception as e:
                    item.status, item.error = "failed", f"filter error: {e!r}"
                    msg = (FAILED, item)
            if not _put(filtered_q, msg, stop):
                return

    gens = [threading.Thread(target=generator, args=(g, b), name=f"gen-{g}", daemon=True) for g, b in enumerate(blocks)]
    filts = [threading.Thread(target=filter_worker, name=f"filter-{i}", daemon=True) for i in range(cfg.num_filters)]

    def closer():
        for t in gens:
            t.join()
        for _ in filts:
            _put(produced_q, _DONE, stop)

    for t in gens + filts:
        t.start()
    closing = threading.Thread(target=closer, name="closer", daemon=True)
    closing.start()

    echo = config_echo if config_echo is not None else cfg.to_json()
    stats = PipelineStats(per_generator={g: 0 for g in range(len(blocks))})
    rows: list[dict] = []
    kept: list[EpisodeRecord] = []
    store = TrajStore(cfg.store_path, mode="a") if cfg.store_path else None
    done_filters = 0
    try:
        while done_filters < len(filts):
            item = filtered_q.get()
            if item is _DONE:
                done_filters += 1
                continue
            outcome, rec = item
            stats.produced += 1
            stats.per_generator[rec.generator_id] += 1
            if outcome == RECORDED:
                stats.recorded += 1
                if store is not None:
                    record_to_store(rec, store, cfg.clip_len)
                if keep_records:
                    kept.append(rec)
            elif outcome == FILTERED:
                stats.filtered_out += 1
            else:
                stats.failed += 1
            rows.append(rec.report_row(outcome))
    except Exception as e:
        stop.set()
        rows.sort(key=lambda r: (r["task_id"], r["seed"]))
        if cfg.report_path:
            write_report(cfg.report_path, echo, rows, partial=True)
        raise PipelineError(f"recorder failed: {e!r}") from e
    finally:
        if store is not None:
            store.close()
    closing.join()
    stats.elapsed = time.perf_counter() - t0
    rows.sort(key=lambda r: (r["task_id"], r["seed"]))
    kept.sort(key=lambda r: (r.task_id, r.seed))
    if cfg.report_path:
        write_report(cfg.report_path, echo, rows)
    return PipelineResult(stats, rows, run_id_for(echo), kept)


def run_sequential(
    agent_factory: Callable[[], Any],
    env_factory: Callable[[], Any],
    cfg: PipelineConfig,
    success_fn=None,
    fault: Callable[[int, int], None] | None = None,
) -> dict[int, tuple]:
    """Single-threaded reference execution: seed -> (outcome, return, success, length)."""
    chain = filter_chain(cfg.filters, success_fn)
    out = {}
    for g, seeds in enumerate(assign_seeds(cfg)):
        agent, env = agent_factory(), env_factory()
        crashed = False
        for seed in seeds:
            if crashed:
                out[seed] = (FAILED, 0.0, False, 0)
                continue
            try:
                if fault is not None:
                    fault(g, seed)
                rec = run_episode(agent, env, seed, cfg.task_id, g, success_fn, cfg.id_salt)
            except Exception:
                crashed = True
                out[seed] = (FAILED, 0.0, False, 0)
                continue
            ok, rec = chain(rec)
            out[seed] = (RECORDED if ok else FILTERED, rec.total_return, bool(rec.success), rec.length)
    return out
