"""Offline behavior cloning over the episode-continuous sampler."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .policy import (
    PolicyError,
    PolicyParams,
    grad_loss,
    init_params,
    load_policy,
    log_softmax,
    save_policy,
    softmax,
)
from .sampler import Batch, EmptyShardError, SamplerPlan, build_plan, next_batch
from .trajstore import Modality, TrajStore

logger = logging.getLogger(__name__)


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    """Behavior-cloning hyperparameters. The defaults are untuned stand-ins; base_lr=0.2
    converges far faster on the built-in tasks."""

    batch_size: int = 16
    seq_len: int = 32
    total_steps: int = 2000
    base_lr: float = 1e-2
    warmup_steps: int = 100
    grad_clip_norm: float = 1.0
    seed: int = 0
    num_shards: int = 1
    shard_id: int = 0
    # simulate every shard in-process and sum their gradients each step
    data_parallel: bool = False
    checkpoint_every: int = 500
    hidden: int = 64
    init: str = "uniform"  # or "zero"
    objectives: list = field(default_factory=lambda: [["bc", 1.0]])

    def __post_init__(self):
        for name in ("batch_size", "seq_len", "total_steps", "checkpoint_every", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must be in [0, total_steps]")
        if self.base_lr <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("base_lr and grad_clip_norm must be positive")
        if not 0 <= self.shard_id < self.num_shards:
            raise ValueError("shard_id out of range")
        if self.init not in ("uniform", "zero"):
            raise ValueError(f"unknown init {self.init!r}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**obj)

    def resume_hash(self) -> str:
        d = self.to_json()
        for k in ("total_steps", "checkpoint_every"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def lr_at(step: int, config: TrainConfig) -> float:
    if config.warmup_steps == 0 or step >= config.warmup_steps:
        return config.base_lr
    return config.base_lr * step / config.warmup_steps


def bc_loss(logits: np.ndarray, target_actions: np.ndarray, mask: np.ndarray) -> float:
    """Mean masked softmax cross-entropy."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("bc_loss: mask selects no positions")
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    nll = -np.take_along_axis(lp, np.asarray(target_actions)[..., None].astype(np.int64), -1)[..., 0]
    return float(nll[mask].sum() / mask.sum())


# -- objective terms: (batch, logits, values, mask) -> (sum-loss, dlogits, dvalues)


def bc_term(batch: Batch, logits, values, mask):
    targets = np.asarray(batch.actions).astype(np.int64)
    lp = log_softmax(logits)
    nll = -np.take_along_axis(lp, targets[..., None], -1)[..., 0]
    grad = softmax(logits)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
    grad *= mask[..., None]
    return float(nll[mask].sum()), grad, np.zeros_like(values)


def entropy_term(batch: Batch, logits, values, mask):
    """Negative entropy, so a positive weight encourages exploration."""
    lp = log_softmax(logits)
    p = np.exp(lp)
    ent = -(p * lp).sum(-1)
    grad = p * (lp + ent[..., None])  # d(-H)/dz
    grad *= mask[..., None]
    return float(-ent[mask].sum()), grad, np.zeros_like(values)


OBJECTIVES: dict[str, Callable] = {"bc": bc_term, "entropy": entropy_term}


class Objective:
    """Weighted sum of objective terms, divided by ``normalizer`` (default: masked count)."""

    def __init__(self, batch: Batch, terms: Sequence[tuple[Callable, float]], normalizer: float | None = None):
        self.batch = batch
        self.terms = list(terms)
        self.normalizer = normalizer

    def __call__(self, logits, values, mask):
        n = self.normalizer if self.normalizer is not None else mask.sum()
        if n <= 0:
            raise ValueError("objective over an empty mask")
        total, dl, dv = 0.0, np.zeros_like(logits), np.zeros_like(values)
        comps = {}
        for fn, w in self.terms:
            loss, gl, gv = fn(self.batch, logits, values, mask)
            total += w * loss
            dl += w * gl
            dv += w * gv
            comps[getattr(fn, "__name__", "term")] = loss / n
        return total / n, dl / n, dv / n, comps


def resolve_objectives(spec) -> list[tuple[Callable, float]]:
    out = []
    for item in spec:
        name, weight = (item, 1.0) if isinstance(item, str) else item
        if callable(name):
            out.append((name, float(weight)))
        elif name in OBJECTIVES:
            out.append((OBJECTIVES[name], float(weight)))
        else:
            raise ValueError(f"unknown objective {name!r}")
    return out


def global_norm(g: PolicyParams) -> float:
    return math.sqrt(sum(float((a * a).sum()) for a in g.arrays()))


def clip_grads(g: PolicyParams, max_norm: float) -> tuple[PolicyParams, float]:
    norm = global_norm(g)
    if norm > max_norm:
        scale = max_norm / norm
        g = PolicyParams.from_arrays([a * scale for a in g.arrays()])
    return g, norm


def sgd_update(params: PolicyParams, grads: PolicyParams, lr: float) -> PolicyParams:
    return PolicyParams.from_arrays([p - lr * g for p, g in zip(params.arrays(), grads.arrays())])


def sum_grads(gs: Sequence[PolicyParams]) -> PolicyParams:
    return PolicyParams.from_arrays([sum(arrs) for arrs in zip(*(g.arrays() for g in gs))])


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class TrainState:
    step: int
    params: PolicyParams
    lane_states: dict[int, np.ndarray]  # shard -> (B, H)
    epoch: int = 0
    epoch_start: int = 0
    losses: list[tuple[int, float]] = field(default_factory=list)

    def sidecar(self, config: TrainConfig) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "epoch_start": self.epoch_start,
            "lane_states": {str(k): v.tolist() for k, v in self.lane_states.items()},
            "config_hash": config.resume_hash(),
            "losses": [[s, l] for s, l in self.losses],
        }


def save_checkpoint(state: TrainState, config: TrainConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"ckpt_{state.step:08d}"
    save_policy(state.params, stem.with_suffix(".tfpl"))
    tmp = stem.with_suffix(".state.json.tmp")
    tmp.write_text(json.dumps(state.sidecar(config), sort_keys=True))
    tmp.replace(stem.with_suffix(".state.json"))
    (directory / "latest").write_text(stem.name + "\n")
    return stem


def load_checkpoint(path, config: TrainConfig) -> TrainState:
    """``path`` is a checkpoint directory (uses ``latest``) or a ``ckpt_*`` stem."""
    path = Path(path)
    if path.is_dir():
        if not (path / "latest").exists():
            raise TrainingError(f"no checkpoint in {path}")
        path = path / (path / "latest").read_text().strip()
    try:
        side = json.loads(Path(str(path) + ".state.json").read_text())
    except FileNotFoundError:
        raise TrainingError(f"no checkpoint at {path}") from None
    if side["config_hash"] != config.resume_hash():
        raise TrainingError("checkpoint was written under a different config")
    return TrainState(
        step=side["step"],
        params=load_policy(str(path) + ".tfpl"),
        lane_states={int(k): np.array(v, dtype=np.float64) for k, v in side["lane_states"].items()},
        epoch=side["epoch"],
        epoch_start=side["epoch_start"],
        losses=[(int(s), float(l)) for s, l in side["losses"]],
    )


@dataclass
class TrainResult:
    params: PolicyParams
    losses: list[tuple[int, float]]
    state: TrainState


def _store_obs_dim(store: TrajStore) -> int:
    mans = store.manifests()
    if not mans:
        raise TrainingError("store is empty")
    dims = set()
    for m in mans:
        missing = {Modality.OBSERVATION, Modality.ACTION} - set(m.modalities)
        if missing:
            raise TrainingError(f"episode {m.episode_id.hex()} lacks modalities {sorted(int(x) for x in missing)}")
        dims.add(m.frame_shapes[Modality.OBSERVATION])
    if len(dims) != 1:
        raise TrainingError(f"inconsistent observation shapes {dims}")
    (shape,) = dims
    return int(np.prod(shape))


class BCTrainer:
    def __init__(self, store: TrajStore, config: TrainConfig, objectives=None):
        self.store = store
        self.config = config
        self.obs_dim = _store_obs_dim(store)
        self.terms = resolve_objectives(objectives if objectives is not None else config.objectives)
        self.shards = list(range(config.num_shards)) if config.data_parallel else [config.shard_id]
        self._plans: dict[tuple[int, int], SamplerPlan | None] = {}

    def plan(self, shard: int, epoch: int) -> SamplerPlan | None:
        key = (shard, epoch)
        if key not in self._plans:
            c = self.config
            try:
                self._plans[key] = build_plan(
                    self.store.manifests(), c.batch_size, c.seq_len, c.num_shards, shard, epoch_seed(c.seed, epoch)
                )
            except EmptyShardError:
                if not c.data_parallel:
                    raise
                self._plans[key] = None
            if len(self._plans) > 4 * len(self.shards):
                self._plans.pop(next(iter(self._plans)))
        return self._plans[key]

    def epoch_length(self, epoch: int) -> int:
        return max((p.num_steps for s in self.shards if (p := self.plan(s, epoch)) is not None), default=0)

    def initial_state(self) -> TrainState:
        c = self.config
        if c.init == "zero":
            params = init_params(self.obs_dim, c.hidden, 6, c.seed).zeros_like()
        else:
            params = init_params(self.obs_dim, c.hidden, 6, c.seed)
        lanes = {s: np.zeros((c.batch_size, c.hidden)) for s in self.shards}
        return TrainState(step=0, params=params, lane_states=lanes)

    def batches_for(self, state: TrainState) -> dict[int, Batch]:
        k = state.step - state.epoch_start
        if k >= self.epoch_length(state.epoch):
            state.epoch += 1
            state.epoch_start = state.step
            state.lane_states = {s: np.zeros_like(v) for s, v in state.lane_states.items()}
            k = 0
        out = {}
        for s in self.shards:
            plan = self.plan(s, state.epoch)
            if plan is not None and k < plan.num_steps:
                out[s] = next_batch(plan, k, self.store, [Modality.OBSERVATION, Modality.ACTION])
        return out

    def compute(self, state: TrainState, batches: dict[int, Batch]):
        """Per-shard summed gradients exchanged once, normalized by the global masked count."""
        total = sum(int(b.mask.sum()) for b in batches.values())
        losses, grads, finals = [], [], {}
        for s, b in batches.items():
            obj = Objective(b, self.terms, normalizer=total)
            loss, g, _, final = grad_loss(state.params, b, state.lane_states[s], obj)
            losses.append(loss)
            grads.append(g)
            finals[s] = final
        return float(sum(losses)), sum_grads(grads), finals

    def train(self, state: TrainState | None = None, checkpoint_dir=None) -> TrainResult:
        c = self.config
        state = state or self.initial_state()
        last_ckpt = None
        while state.step < c.total_steps:
            batches = self.batches_for(state)
            try:
                loss, grads, finals = self.compute(state, batches)
            except PolicyError as e:
                raise TrainingError(f"{e} at step {state.step}; last checkpoint: {last_ckpt}") from e
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {state.step}; last checkpoint: {last_ckpt}")
            grads, _ = clip_grads(grads, c.grad_clip_norm)
            state.params = sgd_update(state.params, grads, lr_at(state.step, c))
            state.losses.append((state.step, loss))
            # carried memory is a constant across windows
            state.lane_states.update(finals)
            state.step += 1
            if checkpoint_dir is not None and state.step % c.checkpoint_every == 0:
                last_ckpt = save_checkpoint(state, c, checkpoint_dir)
            if state.step % 100 == 0:
                logger.info("bc step %d loss %.4f", state.step, loss)
        if checkpoint_dir is not None and state.step % c.checkpoint_every:
            save_checkpoint(state, c, checkpoint_dir)  # always leave a resumable end state
        return TrainResult(state.params, list(state.losses), state)


def train_bc(store: TrajStore, config: TrainConfig, checkpoint_dir=None, resume_from=None, objectives=None) -> TrainResult:
    trainer = BCTrainer(store, config, objectives)
    state = load_checkpoint(resume_from, config) if resume_from is not None else None
    return trainer.train(state, checkpoint_dir)


def write_loss_curve(path, losses, config: TrainConfig | None = None) -> Path:
    path = Path(path)
    lines = []
    if config is not None:
        lines.append("# config " + json.dumps(config.to_json(), sort_keys=True))
    lines.append("# step loss")
    lines += [f"{s} {l!r}" for s, l in losses]
    path.write_text("\n".join(lines) + "\n")
    return path
