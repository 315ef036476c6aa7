"""KL-regularized PPO fine-tuning of a recurrent policy toward a frozen anchor.

Rollouts are collected in fixed-length fragments. Each env's memory at the
end of a fragment is the next fragment's initial state, and that initial
state is stored with the buffer so updates re-evaluate sequences exactly as
they were acted on.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .policy import PolicyParams, _cell, grad_loss, log_softmax, evaluate_sequence
from .pretrain import clip_grads, global_norm

logger = logging.getLogger(__name__)


class PPOError(Exception):
    pass


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    kl_coef: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    fragment_len: int = 64
    num_envs: int = 8
    epochs: int = 4
    minibatches: int = 2
    lr: float = 3e-4
    total_env_steps: int = 200_000
    seed: int = 0
    max_grad_norm: float = 1.0
    optimizer: str = "adam"  # or "sgd"
    # "policy_anchor" = KL(pi || anchor); "anchor_policy" = KL(anchor || pi)
    kl_direction: str = "policy_anchor"
    kl_in_reward: bool = False
    max_env_failures: int = 5

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.clip_eps <= 0 or self.kl_coef < 0:
            raise ValueError("clip_eps must be > 0 and kl_coef >= 0")
        if self.kl_direction not in ("policy_anchor", "anchor_policy"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.minibatches > self.num_envs:
            raise ValueError("minibatches cannot exceed num_envs (minibatches split env lanes)")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PPOConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown PPOConfig keys: {sorted(unknown)}")
        return cls(**obj)


def compute_gae(rewards, values, dones, bootstrap_value, gamma, lam):
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    if T < 1 or len(values) != T or len(dones) != T:
        raise ValueError("rewards, values and dones must share a length >= 1")
    if not (np.isfinite(rewards).all() and np.isfinite(values).all() and math.isfinite(bootstrap_value)):
        raise ValueError("non-finite GAE input")
    adv = np.zeros(T)
    next_value, next_adv = float(bootstrap_value), 0.0
    for t in reversed(range(T)):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = max(float(adv.std()), 1e-8)
    return (adv - adv.mean()) / std


def kl_divergence(p_logits, q_logits) -> np.ndarray:
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    return (np.exp(lp) * (lp - lq)).sum(-1)


class PPOLoss:
    """Clipped surrogate + value + entropy bonus + anchor KL, over masked positions."""

    def __init__(self, actions, old_logps, advantages, returns, anchor_logits, cfg: PPOConfig):
        self.actions = np.asarray(actions).astype(np.int64)
        self.old_logps = np.asarray(old_logps, dtype=np.float64)
        self.advantages = np.asarray(advantages, dtype=np.float64)
        self.returns = np.asarray(returns, dtype=np.float64)
        self.anchor_logits = np.asarray(anchor_logits, dtype=np.float64)
        self.cfg = cfg

    def __call__(self, logits, values, mask=None):
        cfg = self.cfg
        if mask is None:
            mask = np.ones(values.shape, dtype=bool)
        n = mask.sum()
        if n == 0:
            raise ValueError("PPO loss over an empty mask")
        w = mask / n
        lp = log_softmax(logits)
        p = np.exp(lp)
        onehot = np.zeros_like(lp)
        np.put_along_axis(onehot, self.actions[..., None], 1.0, -1)
        lp_a = (lp * onehot).sum(-1)
        ratio = np.exp(lp_a - self.old_logps)
        A = self.advantages
        s1 = ratio * A
        s2 = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * A
        unclipped = s1 <= s2
        pg = -(np.minimum(s1, s2) * w).sum()
        d_lpa = -np.where(unclipped, s1, 0.0) * w
        dlogits = d_lpa[..., None] * (onehot - p)

        err = values - self.returns
        vf = cfg.vf_coef * (err**2 * w).sum()
        dvalues = 2.0 * cfg.vf_coef * err * w

        ent = -(p * lp).sum(-1)
        ent_mean = (ent * w).sum()
        dlogits += cfg.ent_coef * (p * (lp + ent[..., None])) * w[..., None]

        lq = log_softmax(self.anchor_logits)
        if cfg.kl_direction == "policy_anchor":
            kl = (p * (lp - lq)).sum(-1)
            dkl = p * ((lp - lq) - kl[..., None])
        else:
            q = np.exp(lq)
            kl = (q * (lq - lp)).sum(-1)
            dkl = p - q
        kl_mean = (kl * w).sum()
        kl_weight = 0.0 if cfg.kl_in_reward else cfg.kl_coef
        dlogits += kl_weight * dkl * w[..., None]

        loss = pg + vf - cfg.ent_coef * ent_mean + kl_weight * kl_mean
        comps = {
            "policy_loss": float(pg),
            "value_loss": float(vf),
            "entropy": float(ent_mean),
            "kl": float(kl_mean),
            "clip_frac": float(((~unclipped) * w).sum()),
        }
        for k, v in comps.items():
            if not math.isfinite(v):
                raise PPOError(f"non-finite {k}")
        dlogits = np.where(mask[..., None], dlogits, 0.0)
        return float(loss), dlogits, np.where(mask, dvalues, 0.0), comps


def ppo_kl_loss(new_logits, actions, old_logps, advantages, returns, values, anchor_logits, cfg: PPOConfig):
    loss, _, _, comps = PPOLoss(actions, old_logps, advantages, returns, anchor_logits, cfg)(
        np.asarray(new_logits, dtype=np.float64), np.asarray(values, dtype=np.float64)
    )
    return loss, comps


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def update(self, params: PolicyParams, grads: PolicyParams) -> PolicyParams:
        gs = grads.arrays()
        if self.m is None:
            self.m = [np.zeros_like(g) for g in gs]
            self.v = [np.zeros_like(g) for g in gs]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params.arrays(), gs)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1**self.t)
            vh = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * mh / (np.sqrt(vh) + self.eps))
        return PolicyParams.from_arrays(out)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def update(self, params, grads):
        return PolicyParams.from_arrays([p - self.lr * g for p, g in zip(params.arrays(), grads.arrays())])


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (N, T, D)
    actions: np.ndarray  # (N, T)
    logps: np.ndarray  # behavior log-probs of taken actions
    logits: np.ndarray  # behavior logits, (N, T, A)
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    first: np.ndarray  # memory reset before position
    anchor_logits: np.ndarray
    init_states: np.ndarray  # (N, H) policy memory entering the fragment
    anchor_init_states: np.ndarray
    bootstrap: np.ndarray  # (N,) value estimate after the last position

    @property
    def mask(self) -> np.ndarray:
        return np.ones(self.actions.shape, dtype=bool)


@dataclass
class _Lanes:
    """Batch-shaped view consumed by grad_loss / evaluate_sequence."""

    obs: np.ndarray
    first: np.ndarray
    mask: np.ndarray


def sample_actions(rng: np.random.Generator, logits: np.ndarray) -> np.ndarray:
    p = np.exp(log_softmax(logits))
    u = rng.random(len(p))
    cdf = np.cumsum(p, axis=-1)
    return np.minimum((cdf < u[:, None]).sum(-1), p.shape[-1] - 1)


class RolloutCollector:
    """Lockstep collection from ``num_envs`` envs with per-env memory carry."""

    def __init__(self, env_factory: Callable[[int], Any], cfg: PPOConfig, hidden: int,
                 success_fn: Callable[[np.ndarray, dict], bool] | None = None):
        self.cfg = cfg
        self.envs = [env_factory(i) for i in range(cfg.num_envs)]
        self.success_fn = success_fn
        self.rng = np.random.default_rng(cfg.seed)
        self.episode_counter = [0] * cfg.num_envs
        self.hidden = hidden
        self.obs = None
        self.memory = np.zeros((cfg.num_envs, hidden))
        self.anchor_memory = None
        self.next_first = np.ones(cfg.num_envs, dtype=bool)
        self.ep_return = np.zeros(cfg.num_envs)
        self.finished: list[dict] = []
        self.events: list[dict] = []
        self.env_steps = 0

    def _seed_for(self, i: int) -> int:
        seed = self.cfg.seed * 1_000_003 + self.episode_counter[i] * self.cfg.num_envs + i
        self.episode_counter[i] += 1
        return seed

    def _reset(self, i: int) -> np.ndarray:
        fails = 0
        while True:
            try:
                return np.asarray(self.envs[i].reset(self._seed_for(i)), dtype=np.float64)
            except Exception as e:
                fails += 1
                self.events.append({"env": i, "event": "reset_failed", "error": repr(e)})
                logger.warning("env %d reset failed (%d): %r", i, fails, e)
                if fails >= self.cfg.max_env_failures:
                    raise PPOError(f"env {i}: {fails} consecutive failed resets") from e

    def start(self, anchor_hidden: int):
        self.obs = np.stack([self._reset(i) for i in range(self.cfg.num_envs)])
        self.anchor_memory = np.zeros((self.cfg.num_envs, anchor_hidden))

    def collect(self, params: PolicyParams, anchor: PolicyParams) -> RolloutBuffer:
        cfg = self.cfg
        N, T, D, A = cfg.num_envs, cfg.fragment_len, params.obs_dim, params.num_actions
        if self.obs is None:
            self.start(anchor.hidden)
        buf = dict(
            obs=np.zeros((N, T, D)), actions=np.zeros((N, T), dtype=np.int64), logps=np.zeros((N, T)),
            logits=np.zeros((N, T, A)), rewards=np.zeros((N, T)), values=np.zeros((N, T)),
            dones=np.zeros((N, T), dtype=bool), first=np.zeros((N, T), dtype=bool),
            anchor_logits=np.zeros((N, T, A)),
        )
        init_states = self.memory.copy()
        anchor_init = self.anchor_memory.copy()
        m, am = self.memory, self.anchor_memory
        for t in range(T):
            first = self.next_first.copy()
            buf["first"][:, t] = first
            buf["obs"][:, t] = self.obs
            m_in = np.where(first[:, None], 0.0, m)
            _, m, lg, v = _cell(params, buf["obs"][:, t], m_in)
            am_in = np.where(first[:, None], 0.0, am)
            _, am, alg, _ = _cell(anchor, buf["obs"][:, t], am_in)
            acts = sample_actions(self.rng, lg)
            lp = log_softmax(lg)
            buf["logits"][:, t], buf["values"][:, t], buf["anchor_logits"][:, t] = lg, v, alg
            buf["actions"][:, t] = acts
            buf["logps"][:, t] = lp[np.arange(N), acts]
            self.next_first[:] = False
            for i in range(N):
                try:
                    obs, r, done, info = self.envs[i].step(int(acts[i]))
                except Exception as e:
                    # env instability: end the episode here, reset, keep training
                    self.events.append({"env": i, "event": "step_failed", "error": repr(e), "step": self.env_steps})
                    logger.warning("env %d step failed: %r", i, e)
                    obs, r, done, info = None, 0.0, True, {"failed": True}
                self.env_steps += 1
                buf["rewards"][i, t] = r
                buf["dones"][i, t] = done
                self.ep_return[i] += r
                if done:
                    success = bool(self.success_fn(obs, info)) if (self.success_fn and obs is not None) else False
                    self.finished.append({"return": float(self.ep_return[i]), "success": success,
                                          "failed": bool(info.get("failed", False))})
                    self.ep_return[i] = 0.0
                    obs = self._reset(i)
                    self.next_first[i] = True
                self.obs[i] = obs
        m_in = np.where(self.next_first[:, None], 0.0, m)
        _, _, _, boot = _cell(params, self.obs, m_in)
        self.memory, self.anchor_memory = m, am
        return RolloutBuffer(init_states=init_states, anchor_init_states=anchor_init, bootstrap=boot, **buf)


@dataclass
class PPOResult:
    params: PolicyParams
    metrics: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)


def buffer_advantages(buf: RolloutBuffer, cfg: PPOConfig):
    rewards = buf.rewards
    if cfg.kl_in_reward:
        alp = log_softmax(buf.anchor_logits)
        anchor_lp = np.take_along_axis(alp, buf.actions[..., None], -1)[..., 0]
        rewards = rewards - cfg.kl_coef * (buf.logps - anchor_lp)
    adv = np.zeros_like(rewards)
    ret = np.zeros_like(rewards)
    for i in range(rewards.shape[0]):
        adv[i], ret[i] = compute_gae(rewards[i], buf.values[i], buf.dones[i], float(buf.bootstrap[i]), cfg.gamma, cfg.lam)
    return adv, ret


def mean_kl_to_anchor(params: PolicyParams, buf: RolloutBuffer, cfg: PPOConfig) -> float:
    out = evaluate_sequence(params, buf.obs, buf.first, buf.mask, buf.init_states)
    if cfg.kl_direction == "policy_anchor":
        return float(kl_divergence(out.logits, buf.anchor_logits).mean())
    return float(kl_divergence(buf.anchor_logits, out.logits).mean())


def ppo_update(params: PolicyParams, buf: RolloutBuffer, cfg: PPOConfig, opt, rng: np.random.Generator):
    adv, ret = buffer_advantages(buf, cfg)
    adv = normalize_advantages(adv)
    N = buf.actions.shape[0]
    comps_log: list[dict] = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(N)
        for mb in np.array_split(perm, cfg.minibatches):
            lanes = _Lanes(buf.obs[mb], buf.first[mb], buf.mask[mb])
            spec = PPOLoss(buf.actions[mb], buf.logps[mb], adv[mb], ret[mb], buf.anchor_logits[mb], cfg)
            loss, grads, comps, _ = grad_loss(params, lanes, buf.init_states[mb], spec)
            grads, norm = clip_grads(grads, cfg.max_grad_norm)
            params = opt.update(params, grads)
            comps_log.append(dict(comps, loss=loss, grad_norm=norm))
    summary = {k: float(np.mean([c[k] for c in comps_log])) for k in comps_log[0]}
    return params, summary


def train_ppo(
    env_factory: Callable[[int], Any],
    init_params: PolicyParams,
    anchor_params: PolicyParams,
    cfg: PPOConfig,
    success_fn: Callable[[np.ndarray, dict], bool] | None = None,
    log_path=None,
    callback: Callable[[dict, PolicyParams], None] | None = None,
) -> PPOResult:
    """Run PPO until ``cfg.total_env_steps`` env steps have been collected."""
    anchor = anchor_params.copy()  # frozen
    params = init_params.copy()
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)
    collector = RolloutCollector(env_factory, cfg, params.hidden, success_fn)
    rng = np.random.default_rng([cfg.seed, 1])
    result = PPOResult(params)
    log = open(log_path, "w") if log_path else None
    try:
        if log:
            log.write(json.dumps({"config": cfg.to_json()}, sort_keys=True) + "\n")
        update = 0
        while collector.env_steps < cfg.total_env_steps:
            n_done = len(collector.finished)
            buf = collector.collect(params, anchor)
            params, comps = ppo_update(params, buf, cfg, opt, rng)
            eps = collector.finished[n_done:]
            rec = {
                "update": update,
                "step": collector.env_steps,
                "episodes": len(eps),
                "mean_return": float(np.mean([e["return"] for e in eps])) if eps else None,
                "success_rate": float(np.mean([e["success"] for e in eps])) if eps else None,
                "mean_kl": mean_kl_to_anchor(params, buf, cfg),
                **{f"loss_{k}": v for k, v in comps.items()},
            }
            result.metrics.append(rec)
            if log:
                log.write(json.dumps(rec, sort_keys=True) + "\n")
                log.flush()
            if callback:
                callback(rec, params)
            if update % 10 == 0:
                logger.info("ppo update %d steps %d success %s kl %.4f", update, rec["step"], rec["success_rate"], rec["mean_kl"])
            update += 1
    finally:
        if log:
            log.close()
    result.params = params
    result.events = collector.events
    return result
