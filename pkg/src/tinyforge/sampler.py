"""Episode-continuous, shard-aware batch streaming over a trajectory store.

Each batch lane streams its episodes back to back. Window ``k`` of lane ``l``
covers frames ``[k*seq_len, (k+1)*seq_len)`` of that lane's concatenation, so a
recurrent learner can carry memory from one window into the next and reset
it wherever ``first`` is set. Lanes that run out early are padded and masked.
"""

from __future__ import annotations

import bisect
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .trajstore import EpisodeManifest, Modality, TrajStore


class EmptyShardError(Exception):
    """The requested shard owns no episodes."""


class EpochExhausted(IndexError):
    """``step_index`` lies past the end of every lane."""


def shard_of(episode_id: bytes, num_shards: int) -> int:
    digest = hashlib.blake2b(episode_id, digest_size=8).digest()
    return int.from_bytes(digest, "big") % num_shards


@dataclass(frozen=True)
class SamplerPlan:
    shard_id: int
    num_shards: int
    batch_size: int
    seq_len: int
    epoch_seed: int
    lanes: tuple[tuple[bytes, ...], ...]
    lane_lengths: tuple[tuple[int, ...], ...]
    _starts: tuple[tuple[int, ...], ...] = field(repr=False, compare=False, default=())

    def __post_init__(self):
        starts = tuple(tuple(np.concatenate([[0], np.cumsum(l)]).astype(int).tolist()) for l in self.lane_lengths)
        object.__setattr__(self, "_starts", starts)

    @property
    def lane_totals(self) -> tuple[int, ...]:
        return tuple(s[-1] for s in self._starts)

    @property
    def num_steps(self) -> int:
        return math.ceil(max(self.lane_totals) / self.seq_len)

    @property
    def episodes(self) -> tuple[bytes, ...]:
        return tuple(e for lane in self.lanes for e in lane)


@dataclass
class Batch:
    frames: dict[int, np.ndarray]  # modality -> (B, T, *frame_shape)
    first: np.ndarray  # (B, T) bool
    mask: np.ndarray  # (B, T) bool
    episode_ids: list[list[bytes | None]]  # (B, T)
    frame_index: np.ndarray  # (B, T) int, -1 on padding

    @property
    def shape(self) -> tuple[int, int]:
        return self.first.shape

    @property
    def obs(self) -> np.ndarray:
        return self.frames[Modality.OBSERVATION]

    @property
    def actions(self) -> np.ndarray:
        return self.frames[Modality.ACTION]

    def lanes(self, idx: Sequence[int]) -> "Batch":
        idx = list(idx)
        return Batch(
            frames={m: a[idx] for m, a in self.frames.items()},
            first=self.first[idx],
            mask=self.mask[idx],
            episode_ids=[self.episode_ids[i] for i in idx],
            frame_index=self.frame_index[idx],
        )


def _deal(ids: list[bytes], lengths: dict[bytes, int], batch_size: int, epoch_seed: int):
    ids = sorted(ids)
    perm = np.random.default_rng(epoch_seed).permutation(len(ids))
    rank = {ids[p]: r for r, p in enumerate(perm)}
    # longest first onto the currently shortest lane; ties broken by shuffled rank / lane index
    order = sorted(ids, key=lambda e: (-lengths[e], rank[e]))
    totals = [0] * batch_size
    lanes: list[list[bytes]] = [[] for _ in range(batch_size)]
    for e in order:
        lane = min(range(batch_size), key=lambda i: (totals[i], i))
        lanes[lane].append(e)
        totals[lane] += lengths[e]
    return [sorted(lane, key=rank.__getitem__) for lane in lanes]


def build_plan(
    manifests: Sequence[EpisodeManifest],
    batch_size: int,
    seq_len: int,
    num_shards: int = 1,
    shard_id: int = 0,
    epoch_seed: int = 0,
) -> SamplerPlan:
    if batch_size < 1 or seq_len < 1:
        raise ValueError("batch_size and seq_len must be >= 1")
    if not 0 <= shard_id < num_shards:
        raise ValueError(f"shard_id {shard_id} not in [0, {num_shards})")
    lengths = {m.episode_id: m.length for m in manifests}
    mine = [e for e in lengths if shard_of(e, num_shards) == shard_id]
    if not mine:
        raise EmptyShardError(f"shard {shard_id}/{num_shards} has no episodes")
    lanes = _deal(mine, lengths, batch_size, epoch_seed)
    return SamplerPlan(
        shard_id=shard_id,
        num_shards=num_shards,
        batch_size=batch_size,
        seq_len=seq_len,
        epoch_seed=epoch_seed,
        lanes=tuple(tuple(l) for l in lanes),
        lane_lengths=tuple(tuple(lengths[e] for e in l) for l in lanes),
    )


def next_batch(
    plan: SamplerPlan,
    step_index: int,
    store: TrajStore,
    modalities: Sequence[int] | None = None,
) -> Batch:
    """Fetch window ``step_index`` of the epoch. Pure in its arguments."""
    if step_index < 0:
        raise ValueError("step_index must be >= 0")
    if step_index >= plan.num_steps:
        raise EpochExhausted(f"step {step_index} >= epoch length {plan.num_steps}")
    B, T = plan.batch_size, plan.seq_len
    lo, hi = step_index * T, (step_index + 1) * T
    first = np.zeros((B, T), dtype=bool)
    mask = np.zeros((B, T), dtype=bool)
    frame_index = np.full((B, T), -1, dtype=np.int64)
    ids: list[list[bytes | None]] = [[None] * T for _ in range(B)]
    pieces: list[tuple[int, int, bytes, int, int]] = []  # lane, offset, episode, start, n
    for lane in range(B):
        starts = plan._starts[lane]
        total = starts[-1]
        pos = lo
        j = bisect.bisect_right(starts, pos) - 1
        while pos < min(hi, total):
            e_start = starts[j]
            n = min(starts[j + 1], hi) - pos
            ep = plan.lanes[lane][j]
            f0 = pos - e_start
            t0 = pos - lo
            pieces.append((lane, t0, ep, f0, n))
            mask[lane, t0 : t0 + n] = True
            frame_index[lane, t0 : t0 + n] = np.arange(f0, f0 + n)
            ids[lane][t0 : t0 + n] = [ep] * n
            if f0 == 0:
                first[lane, t0] = True
            pos += n
            j += 1

    frames: dict[int, np.ndarray] = {}
    for lane, t0, ep, f0, n in pieces:
        seg = store.read_segment(ep, f0, n, modalities)
        for m, arr in seg.frames.items():
            if m not in frames:
                frames[m] = np.zeros((B, T) + arr.shape[1:], dtype=arr.dtype)
            frames[m][lane, t0 : t0 + n] = arr
    return Batch(frames=frames, first=first, mask=mask, episode_ids=ids, frame_index=frame_index)


def iter_batches(plan: SamplerPlan, store: TrajStore, modalities=None) -> Iterator[Batch]:
    for k in range(plan.num_steps):
        yield next_batch(plan, k, store, modalities)
