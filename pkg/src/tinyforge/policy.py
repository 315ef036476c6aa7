"""Recurrent policy template and the reference tiny recurrent network.

The cell, per lane and time step::

    h  = tanh(W1 x + b1)
    m' = tanh(Wm m + Wh h + bm)
    logits = Wa m' + ba,   value = wv . m' + bv

Sequences come from the sampler with ``first``/``mask`` flags: memory is
zeroed before every ``first`` position, padding positions neither advance
memory nor receive gradient, and the state carried in from the previous
window is a constant (truncated BPTT).
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

DEFAULT_HIDDEN = 64
MAGIC = b"TFPL"
FILE_VERSION = 1
_DIMS = struct.Struct(">III")

FIELDS = ("W1", "b1", "Wm", "Wh", "bm", "Wa", "ba", "wv", "bv")


class PolicyError(Exception):
    pass


class DimensionError(PolicyError, ValueError):
    pass


class PolicyFileError(PolicyError):
    pass


@dataclass
class PolicyParams:
    W1: np.ndarray
    b1: np.ndarray
    Wm: np.ndarray
    Wh: np.ndarray
    bm: np.ndarray
    Wa: np.ndarray
    ba: np.ndarray
    wv: np.ndarray
    bv: np.ndarray  # shape ()

    @property
    def obs_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def num_actions(self) -> int:
        return self.Wa.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f) for f in FIELDS]

    @classmethod
    def from_arrays(cls, arrays) -> "PolicyParams":
        return cls(*[np.array(a, dtype=np.float64) for a in arrays])

    def copy(self) -> "PolicyParams":
        return PolicyParams.from_arrays(self.arrays())

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams.from_arrays([np.zeros_like(a) for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec: np.ndarray) -> "PolicyParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[i : i + a.size], dtype=np.float64).reshape(a.shape))
            i += a.size
        return PolicyParams.from_arrays(out)

    def check_shapes(self) -> None:
        H, D, A = self.hidden, self.obs_dim, self.num_actions
        want = {"W1": (H, D), "b1": (H,), "Wm": (H, H), "Wh": (H, H), "bm": (H,),
                "Wa": (A, H), "ba": (A,), "wv": (H,), "bv": ()}
        for f, shape in want.items():
            if getattr(self, f).shape != shape:
                raise DimensionError(f"{f} has shape {getattr(self, f).shape}, expected {shape}")


def init_params(obs_dim: int, hidden: int = DEFAULT_HIDDEN, num_actions: int = 6, seed: int = 0) -> PolicyParams:
    if min(obs_dim, hidden, num_actions) < 1:
        raise DimensionError("all dims must be >= 1")
    rng = np.random.default_rng(seed)

    def u(shape, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    return PolicyParams(
        W1=u((hidden, obs_dim), obs_dim),
        b1=np.zeros(hidden),
        Wm=u((hidden, hidden), hidden),
        Wh=u((hidden, hidden), hidden),
        bm=np.zeros(hidden),
        Wa=u((num_actions, hidden), hidden),
        ba=np.zeros(num_actions),
        wv=u(hidden, hidden),
        bv=np.array(0.0),
    )


def zero_params(obs_dim: int, hidden: int = DEFAULT_HIDDEN, num_actions: int = 6) -> PolicyParams:
    return init_params(obs_dim, hidden, num_actions).zeros_like()


@dataclass
class PolicyOutput:
    logits: np.ndarray
    value: np.ndarray | float
    next_state: np.ndarray


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _cell(p: PolicyParams, x: np.ndarray, m: np.ndarray):
    h = np.tanh(x @ p.W1.T + p.b1)
    m_new = np.tanh(m @ p.Wm.T + h @ p.Wh.T + p.bm)
    logits = m_new @ p.Wa.T + p.ba
    value = m_new @ p.wv + p.bv
    return h, m_new, logits, value


def policy_step(params: PolicyParams, obs: np.ndarray, state: np.ndarray) -> PolicyOutput:
    """One forward step for a single lane (1-D inputs) or a stack of lanes (2-D)."""
    obs = np.asarray(obs, dtype=np.float64)
    state = np.asarray(state, dtype=np.float64)
    if obs.shape[-1] != params.obs_dim:
        raise DimensionError(f"obs dim {obs.shape[-1]} != {params.obs_dim}")
    if state.shape[-1] != params.hidden:
        raise DimensionError(f"state dim {state.shape[-1]} != {params.hidden}")
    if not (np.isfinite(obs).all() and np.isfinite(state).all()):
        raise ValueError("non-finite policy input")
    single = obs.ndim == 1
    _, m_new, logits, value = _cell(params, np.atleast_2d(obs), np.atleast_2d(state))
    if single:
        return PolicyOutput(logits[0], float(value[0]), m_new[0])
    return PolicyOutput(logits, value, m_new)


@dataclass
class SequenceOutput:
    logits: np.ndarray  # (B, T, A)
    values: np.ndarray  # (B, T)
    final_states: np.ndarray  # (B, H)
    cache: dict


def evaluate_sequence(
    params: PolicyParams,
    obs: np.ndarray,
    first: np.ndarray,
    mask: np.ndarray,
    initial_states: np.ndarray,
) -> SequenceOutput:
    obs = np.asarray(obs, dtype=np.float64)
    B, T = first.shape
    if initial_states.shape != (B, params.hidden):
        raise DimensionError(f"initial_states shape {initial_states.shape} != {(B, params.hidden)}")
    if obs.shape[:2] != (B, T) or obs.shape[2] != params.obs_dim:
        raise DimensionError(f"obs shape {obs.shape} incompatible with ({B}, {T}, {params.obs_dim})")
    H, A = params.hidden, params.num_actions
    hs = np.empty((B, T, H))
    m_ins = np.empty((B, T, H))
    m_news = np.empty((B, T, H))
    logits = np.empty((B, T, A))
    values = np.empty((B, T))
    m = np.array(initial_states, dtype=np.float64)
    for t in range(T):
        m_in = np.where(first[:, t, None], 0.0, m)
        h, m_new, lg, v = _cell(params, obs[:, t], m_in)
        hs[:, t], m_ins[:, t], m_news[:, t] = h, m_in, m_new
        logits[:, t], values[:, t] = lg, v
        m = np.where(mask[:, t, None], m_new, m)
    cache = {"obs": obs, "first": first, "mask": mask, "h": hs, "m_in": m_ins, "m_new": m_news}
    return SequenceOutput(logits, values, m, cache)


def backward_sequence(params: PolicyParams, cache: dict, dlogits: np.ndarray, dvalues: np.ndarray) -> PolicyParams:
    """Reverse-mode pass through one window; no gradient to the carried-in state."""
    obs, first, mask = cache["obs"], cache["first"], cache["mask"]
    hs, m_ins, m_news = cache["h"], cache["m_in"], cache["m_new"]
    mk = mask[..., None]
    dlogits = np.where(mk, dlogits, 0.0)
    dvalues = np.where(mask, dvalues, 0.0)
    g = params.zeros_like()
    B, T = first.shape
    dm = np.zeros((B, params.hidden))
    for t in reversed(range(T)):
        m_new, h, m_in = m_news[:, t], hs[:, t], m_ins[:, t]
        dl, dv = dlogits[:, t], dvalues[:, t]
        g.Wa += dl.T @ m_new
        g.ba += dl.sum(0)
        g.wv += dv @ m_new
        g.bv += dv.sum()
        dm_new = dl @ params.Wa + dv[:, None] * params.wv + np.where(mk[:, t], dm, 0.0)
        da = dm_new * (1.0 - m_new**2)
        g.Wm += da.T @ m_in
        g.Wh += da.T @ h
        g.bm += da.sum(0)
        dz = (da @ params.Wh) * (1.0 - h**2)
        g.W1 += dz.T @ obs[:, t]
        g.b1 += dz.sum(0)
        dm_in = np.where(first[:, t, None], 0.0, da @ params.Wm)
        dm = dm_in + np.where(mk[:, t], 0.0, dm)
    return g


class LossSpec(Protocol):
    def __call__(self, logits: np.ndarray, values: np.ndarray, mask: np.ndarray):
        """Return (loss, dloss/dlogits, dloss/dvalues, components)."""


def grad_loss(params: PolicyParams, batch, initial_states: np.ndarray, loss_spec: LossSpec):
    """Loss and exact gradient for one window. Returns (loss, grads, components, final_states)."""
    out = evaluate_sequence(params, batch.obs, batch.first, batch.mask, initial_states)
    loss, dlogits, dvalues, comps = loss_spec(out.logits, out.values, batch.mask)
    if not np.isfinite(loss):
        raise PolicyError(f"non-finite loss {loss}")
    grads = backward_sequence(params, out.cache, dlogits, dvalues)
    return loss, grads, comps, out.final_states


# -- template ------------------------------------------------------------


class Policy:
    """Interface shared by every policy used by the trainers, pipeline and bench."""

    hidden: int

    def initial_state(self, num_lanes: int = 1) -> np.ndarray:
        return np.zeros((num_lanes, self.hidden))

    def step(self, obs: np.ndarray, state: np.ndarray) -> PolicyOutput:
        raise NotImplementedError

    def evaluate_sequence(self, batch, initial_states: np.ndarray) -> SequenceOutput:
        raise NotImplementedError


class RecurrentPolicy(Policy):
    def __init__(self, params: PolicyParams):
        params.check_shapes()
        self.params = params

    @property
    def hidden(self) -> int:
        return self.params.hidden

    def step(self, obs, state):
        return policy_step(self.params, obs, state)

    def evaluate_sequence(self, batch, initial_states):
        return evaluate_sequence(self.params, batch.obs, batch.first, batch.mask, initial_states)


# -- persistence ---------------------------------------------------------


def policy_bytes(params: PolicyParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(bytes([FILE_VERSION]))
    buf.write(_DIMS.pack(params.obs_dim, params.hidden, params.num_actions))
    for a in params.arrays():
        buf.write(np.ascontiguousarray(a, dtype=">f8").tobytes())
    return buf.getvalue()


def policy_hash(params: PolicyParams) -> str:
    return hashlib.sha256(policy_bytes(params)).hexdigest()


def save_policy(params: PolicyParams, path) -> Path:
    params.check_shapes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(policy_bytes(params))
    tmp.replace(path)
    return path


def load_policy(path, obs_dim: int | None = None, hidden: int | None = None, num_actions: int | None = None) -> PolicyParams:
    raw = Path(path).read_bytes()
    head = len(MAGIC) + 1 + _DIMS.size
    if len(raw) < head or raw[:4] != MAGIC:
        raise PolicyFileError(f"{path}: not a policy file")
    if raw[4] != FILE_VERSION:
        raise PolicyFileError(f"{path}: unsupported version {raw[4]}")
    D, H, A = _DIMS.unpack(raw[5:head])
    for name, want, got in (("obs_dim", obs_dim, D), ("hidden", hidden, H), ("num_actions", num_actions, A)):
        if want is not None and want != got:
            raise DimensionError(f"{path}: {name} is {got}, expected {want}")
    shapes = [(H, D), (H,), (H, H), (H, H), (H,), (A, H), (A,), (H,), ()]
    need = head + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != need:
        raise PolicyFileError(f"{path}: corrupt policy file ({len(raw)} bytes, expected {need})")
    arrays, off = [], head
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(raw, dtype=">f8", count=n, offset=off).astype(np.float64).reshape(s))
        off += 8 * n
    params = PolicyParams.from_arrays(arrays)
    if not all(np.isfinite(a).all() for a in params.arrays()):
        raise PolicyFileError(f"{path}: non-finite weights")
    return params
