"""Line-delimited JSON episode exchange files.

Line 1 is a header::

    {"format": "tinyforge-episode", "version": 1, "episode_id": <32 hex>,
     "task_id": str, "seed": int, "length": T, "obs_dim": D}

followed by exactly ``T`` step lines ``{"t": i, "obs": [D floats], "action": int,
"reward": float}``. ``obs[i]`` is the observation the action was taken from.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trajstore import EpisodeManifest, Modality, TrajStore

FORMAT = "tinyforge-episode"
VERSION = 1


class ExchangeFormatError(ValueError):
    pass


def episode_id_for(task_id: str, seed: int, salt: str = "") -> bytes:
    return hashlib.blake2b(f"{task_id}\x00{int(seed)}\x00{salt}".encode(), digest_size=16).digest()


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


@dataclass
class EpisodeExchange:
    episode_id: bytes
    task_id: str
    seed: int
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def obs_dim(self) -> int:
        return int(self.obs.shape[1])

    def filename(self) -> str:
        return f"{self.task_id}_{self.seed:010d}.jsonl"

    def header(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "episode_id": self.episode_id.hex(),
            "task_id": self.task_id,
            "seed": int(self.seed),
            "length": self.length,
            "obs_dim": self.obs_dim,
        }

    def write(self, path) -> Path:
        path = Path(path)
        lines = [_dumps(self.header())]
        for t in range(self.length):
            lines.append(
                _dumps(
                    {
                        "t": t,
                        "obs": [float(v) for v in self.obs[t]],
                        "action": int(self.actions[t]),
                        "reward": float(self.rewards[t]),
                    }
                )
            )
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "EpisodeExchange":
        lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
        if not lines:
            raise ExchangeFormatError(f"{path}: empty file")
        head = json.loads(lines[0])
        if head.get("format") != FORMAT or head.get("version") != VERSION:
            raise ExchangeFormatError(f"{path}: not a {FORMAT} v{VERSION} file")
        steps = [json.loads(l) for l in lines[1:]]
        if len(steps) != head["length"]:
            raise ExchangeFormatError(f"{path}: header length {head['length']} but {len(steps)} step records")
        if [s["t"] for s in steps] != list(range(len(steps))):
            raise ExchangeFormatError(f"{path}: step indices out of order")
        obs = np.array([s["obs"] for s in steps], dtype=np.float32).reshape(len(steps), head["obs_dim"])
        return cls(
            episode_id=bytes.fromhex(head["episode_id"]),
            task_id=head["task_id"],
            seed=int(head["seed"]),
            obs=obs,
            actions=np.array([s["action"] for s in steps], dtype=np.int64),
            rewards=np.array([s["reward"] for s in steps], dtype=np.float64),
        )

    def frames(self) -> dict[int, np.ndarray]:
        return {
            Modality.OBSERVATION: np.asarray(self.obs, dtype=np.float32),
            Modality.ACTION: np.asarray(self.actions, dtype=np.int64),
            Modality.REWARD: np.asarray(self.rewards, dtype=np.float64),
        }

    def to_store(self, store: TrajStore, clip_len: int, source: str = "") -> EpisodeManifest:
        return store.write_episode(
            self.episode_id,
            self.frames(),
            clip_len=clip_len,
            labels=[(self.task_id, 0, self.length)],
            source=source or f"task={self.task_id} seed={self.seed}",
        )


def ingest_dir(input_dir, store: TrajStore, clip_len: int) -> list[EpisodeManifest]:
    files = sorted(Path(input_dir).glob("*.jsonl"))
    return [EpisodeExchange.read(f).to_store(store, clip_len, source=f.name) for f in files]
