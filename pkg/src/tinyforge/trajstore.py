"""Chunked, append-only trajectory storage.

An episode is a set of temporally aligned modality streams (observations,
actions, rewards, per-frame labels). Each stream is cut into fixed-length
clips and every clip is appended to ``data.bin`` as an independent,
checksummed record::

    [21-byte ClipKey][4-byte BE record length][ClipRecord]
    ClipRecord = [1-byte codec_id][2-byte BE frame_count][payload][4-byte BE crc32]
    ClipKey    = [16-byte episode_id][1-byte modality][4-byte BE clip_index]

``manifest.log`` holds one JSON object per line. A ``put`` line publishes an
episode (lengths, frame layout, labels and the byte offset of every clip);
a ``delete`` line retracts one. The manifest line is the commit point: clips
written without a manifest line are unreachable and are dropped by
:meth:`TrajStore.compact`.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DATA_FILE = "data.bin"
MANIFEST_FILE = "manifest.log"
LOCK_FILE = "writer.lock"

DEFAULT_CLIP_LEN = 64
CODEC_RAW = 0
KEY_SIZE = 21
_KEY = struct.Struct(">16sBI")
_LEN = struct.Struct(">I")
_REC_HEAD = struct.Struct(">BH")
_CRC = struct.Struct(">I")
MAX_FRAMES_PER_CLIP = 0xFFFF


class Modality(IntEnum):
    OBSERVATION = 0
    ACTION = 1
    REWARD = 2
    LABEL = 3


class StoreError(Exception):
    """Base class for trajectory store failures."""


class DuplicateEpisodeError(StoreError):
    pass


class ModalityLengthMismatch(StoreError):
    pass


class UnknownEpisodeError(StoreError, KeyError):
    pass


class RangeError(StoreError, IndexError):
    pass


class ChecksumError(StoreError):
    def __init__(self, key: "ClipKey", detail: str = "checksum mismatch"):
        self.key = key
        super().__init__(f"{detail} in clip {key}")


class ConcurrentWriterError(StoreError):
    pass


def checksum32(data: bytes) -> int:
    """CRC-32 (reflected, poly 0xEDB88320, init/xorout 0xFFFFFFFF)."""
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True, order=True)
class ClipKey:
    episode_id: bytes
    modality: int
    clip_index: int

    def pack(self) -> bytes:
        return _KEY.pack(self.episode_id, self.modality, self.clip_index)

    @classmethod
    def unpack(cls, raw: bytes) -> "ClipKey":
        eid, mod, idx = _KEY.unpack(raw)
        return cls(eid, mod, idx)

    def __str__(self) -> str:
        return f"ClipKey({self.episode_id.hex()}, modality={self.modality}, clip={self.clip_index})"


def encode_clip(payload: bytes, frame_count: int, codec_id: int = CODEC_RAW) -> bytes:
    if not 1 <= frame_count <= MAX_FRAMES_PER_CLIP:
        raise ValueError(f"frame_count {frame_count} out of range")
    body = _REC_HEAD.pack(codec_id, frame_count) + payload
    return body + _CRC.pack(checksum32(body))


def decode_clip(record: bytes, key: ClipKey) -> tuple[int, int, bytes]:
    """Verify and split a ClipRecord into (codec_id, frame_count, payload)."""
    if len(record) < _REC_HEAD.size + _CRC.size:
        raise ChecksumError(key, "short record")
    body, (crc,) = record[:-4], _CRC.unpack(record[-4:])
    if checksum32(body) != crc:
        raise ChecksumError(key)
    codec_id, frame_count = _REC_HEAD.unpack(body[: _REC_HEAD.size])
    return codec_id, frame_count, body[_REC_HEAD.size :]


def as_episode_id(value: bytes | str) -> bytes:
    if isinstance(value, str):
        value = bytes.fromhex(value)
    if len(value) != 16:
        raise ValueError(f"episode_id must be 16 bytes, got {len(value)}")
    return bytes(value)


@dataclass
class EpisodeManifest:
    episode_id: bytes
    length: int
    clip_len: int
    modalities: tuple[int, ...]
    frame_sizes: dict[int, int]
    dtypes: dict[int, str]
    frame_shapes: dict[int, tuple[int, ...]]
    labels: list[tuple[str, int, int]] = field(default_factory=list)
    source: str = ""
    offsets: dict[int, list[int]] = field(default_factory=dict)

    @property
    def num_clips(self) -> int:
        return math.ceil(self.length / self.clip_len)

    def to_json(self) -> dict:
        return {
            "op": "put",
            "episode_id": self.episode_id.hex(),
            "length": self.length,
            "clip_len": self.clip_len,
            "modalities": list(self.modalities),
            "frame_sizes": {str(m): s for m, s in self.frame_sizes.items()},
            "dtypes": {str(m): d for m, d in self.dtypes.items()},
            "frame_shapes": {str(m): list(s) for m, s in self.frame_shapes.items()},
            "labels": [list(x) for x in self.labels],
            "source": self.source,
            "offsets": {str(m): o for m, o in self.offsets.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "EpisodeManifest":
        return cls(
            episode_id=bytes.fromhex(obj["episode_id"]),
            length=int(obj["length"]),
            clip_len=int(obj["clip_len"]),
            modalities=tuple(int(m) for m in obj["modalities"]),
            frame_sizes={int(m): int(s) for m, s in obj["frame_sizes"].items()},
            dtypes={int(m): d for m, d in obj["dtypes"].items()},
            frame_shapes={int(m): tuple(s) for m, s in obj["frame_shapes"].items()},
            labels=[(str(a), int(b), int(c)) for a, b, c in obj["labels"]],
            source=obj.get("source", ""),
            offsets={int(m): [int(x) for x in o] for m, o in obj["offsets"].items()},
        )


@dataclass
class Segment:
    episode_id: bytes
    start_frame: int
    frames: dict[int, np.ndarray]

    def __len__(self) -> int:
        return len(next(iter(self.frames.values()))) if self.frames else 0


@dataclass
class CompactStats:
    episodes: int
    records_before: int
    records_after: int
    bytes_before: int
    bytes_after: int

    @property
    def bytes_reclaimed(self) -> int:
        return self.bytes_before - self.bytes_after


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class TrajStore:
    """Single-writer / multi-reader trajectory store rooted at a directory.

    ``mode="r"`` opens read-only; ``mode="a"`` creates the directory if needed
    and takes the writer lock. Reads are thread-safe (``os.pread``).
    """

    def __init__(self, path: str | os.PathLike, mode: str = "r"):
        if mode not in ("r", "a"):
            raise ValueError("mode must be 'r' or 'a'")
        self.path = Path(path)
        self.mode = mode
        # test hook: called with each ClipKey right before it is appended
        self.fault_hook: Callable[[ClipKey], None] | None = None
        self._lock = threading.RLock()
        self._manifests: dict[bytes, EpisodeManifest] = {}
        self._manifest_pos = 0
        self._manifest_ino: int | None = None
        self._rfd: int | None = None
        self._data = None
        self._owns_lock = False
        if mode == "a":
            self.path.mkdir(parents=True, exist_ok=True)
            self._acquire_writer_lock()
            (self.path / DATA_FILE).touch(exist_ok=True)
            (self.path / MANIFEST_FILE).touch(exist_ok=True)
        elif not (self.path / MANIFEST_FILE).exists():
            raise StoreError(f"no trajectory store at {self.path}")
        self._open_files()
        if mode == "a":
            self._truncate_torn_tail()
        self.refresh()

    # -- lifecycle -------------------------------------------------------

    def _acquire_writer_lock(self) -> None:
        lock = self.path / LOCK_FILE
        for _ in range(2):
            try:
                fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
            except FileExistsError:
                try:
                    pid = int(lock.read_text().strip() or "0")
                except (OSError, ValueError):
                    pid = 0
                if pid and _pid_alive(pid):
                    raise ConcurrentWriterError(f"store {self.path} has a live writer (pid {pid})")
                logger.warning("removing stale writer lock left by pid %s", pid)
                lock.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w") as f:
                f.write(str(os.getpid()))
            self._owns_lock = True
            return
        raise ConcurrentWriterError(f"could not lock {self.path}")

    def _open_files(self) -> None:
        if self._rfd is not None:
            os.close(self._rfd)
        self._rfd = os.open(self.path / DATA_FILE, os.O_RDONLY)
        if self.mode == "a":
            if self._data is not None:
                self._data.close()
            self._data = open(self.path / DATA_FILE, "ab")
        self._manifests = {}
        self._manifest_pos = 0
        self._manifest_ino = os.stat(self.path / MANIFEST_FILE).st_ino

    def _truncate_torn_tail(self) -> None:
        end = 0
        for _, off, total in self.scan():
            end = off + total
        size = os.fstat(self._rfd).st_size
        if end != size:
            logger.warning("truncating %d torn bytes at end of %s", size - end, DATA_FILE)
            self._data.truncate(end)
            self._data.flush()

    def close(self) -> None:
        with self._lock:
            if self._data is not None:
                self._data.close()
                self._data = None
            if self._rfd is not None:
                os.close(self._rfd)
                self._rfd = None
            if self._owns_lock:
                (self.path / LOCK_FILE).unlink(missing_ok=True)
                self._owns_lock = False

    def __enter__(self) -> "TrajStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    # -- manifest --------------------------------------------------------

    def refresh(self) -> None:
        """Pick up episodes published since the last read of the manifest."""
        with self._lock:
            mpath = self.path / MANIFEST_FILE
            if os.stat(mpath).st_ino != self._manifest_ino:
                self._open_files()
            with open(mpath, "rb") as f:
                f.seek(self._manifest_pos)
                tail = f.read()
            end = tail.rfind(b"\n")
            if end < 0:
                return
            for line in tail[: end + 1].splitlines():
                if not line.strip():
                    continue
                obj = json.loads(line)
                if obj["op"] == "put":
                    m = EpisodeManifest.from_json(obj)
                    self._manifests[m.episode_id] = m
                elif obj["op"] == "delete":
                    self._manifests.pop(bytes.fromhex(obj["episode_id"]), None)
            self._manifest_pos += end + 1

    def manifest(self, episode_id: bytes | str) -> EpisodeManifest:
        eid = as_episode_id(episode_id)
        with self._lock:
            m = self._manifests.get(eid)
            if m is None:
                self.refresh()
                m = self._manifests.get(eid)
        if m is None:
            raise UnknownEpisodeError(f"unknown episode {eid.hex()}")
        return m

    def manifests(self) -> list[EpisodeManifest]:
        with self._lock:
            return [self._manifests[k] for k in sorted(self._manifests)]

    def episode_ids(self) -> list[bytes]:
        with self._lock:
            return sorted(self._manifests)

    def __contains__(self, episode_id) -> bool:
        return as_episode_id(episode_id) in self._manifests

    def __len__(self) -> int:
        return len(self._manifests)

    def _append_manifest(self, obj: dict) -> None:
        line = json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"
        with open(self.path / MANIFEST_FILE, "ab") as f:
            f.write(line.encode())
            f.flush()
            os.fsync(f.fileno())

    # -- writing ---------------------------------------------------------

    def _require_writer(self) -> None:
        if self.mode != "a" or self._data is None:
            raise StoreError("store opened read-only")

    def write_episode(
        self,
        episode_id: bytes | str,
        frames: Mapping[int, np.ndarray],
        clip_len: int = DEFAULT_CLIP_LEN,
        labels: Iterable[tuple[str, int, int]] = (),
        source: str = "",
    ) -> EpisodeManifest:
        """Split every modality into clips, append them, then publish the manifest."""
        self._require_writer()
        eid = as_episode_id(episode_id)
        if not 1 <= clip_len <= MAX_FRAMES_PER_CLIP:
            raise ValueError("clip_len must be in [1, 65535]")
        if not frames:
            raise ValueError("episode has no modalities")
        arrays = {int(Modality(m)): np.ascontiguousarray(a) for m, a in frames.items()}
        lengths = {m: len(a) for m, a in arrays.items()}
        if len(set(lengths.values())) != 1:
            raise ModalityLengthMismatch(f"modality length mismatch: {lengths}")
        length = next(iter(lengths.values()))
        if length < 1:
            raise ValueError("episode must have at least one frame")
        labels = [(str(n), int(s), int(e)) for n, s, e in labels]
        for name, s, e in labels:
            if not 0 <= s < e <= length:
                raise ValueError(f"label {name!r} interval [{s}, {e}) outside [0, {length})")

        with self._lock:
            self.refresh()
            if eid in self._manifests:
                raise DuplicateEpisodeError(f"episode {eid.hex()} already present")
            manifest = EpisodeManifest(
                episode_id=eid,
                length=length,
                clip_len=clip_len,
                modalities=tuple(sorted(arrays)),
                frame_sizes={},
                dtypes={},
                frame_shapes={},
                labels=labels,
                source=source,
            )
            self._data.seek(0, os.SEEK_END)
            pos = self._data.tell()
            for m in manifest.modalities:
                arr = arrays[m]
                if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
                    arr = arr.astype(arr.dtype.newbyteorder("<"))
                manifest.dtypes[m] = arr.dtype.str
                manifest.frame_shapes[m] = tuple(arr.shape[1:])
                manifest.frame_sizes[m] = arr[0].nbytes
                offs = []
                for ci in range(manifest.num_clips):
                    key = ClipKey(eid, m, ci)
                    if self.fault_hook is not None:
                        self.fault_hook(key)
                    chunk = arr[ci * clip_len : (ci + 1) * clip_len]
                    rec = encode_clip(chunk.tobytes(), len(chunk))
                    self._data.write(key.pack() + _LEN.pack(len(rec)) + rec)
                    offs.append(pos)
                    pos += KEY_SIZE + _LEN.size + len(rec)
                manifest.offsets[m] = offs
            self._data.flush()
            os.fsync(self._data.fileno())
            self._append_manifest(manifest.to_json())
            self._manifests[eid] = manifest
            return manifest

    def delete_episode(self, episode_id: bytes | str) -> None:
        self._require_writer()
        eid = as_episode_id(episode_id)
        with self._lock:
            self.manifest(eid)
            self._append_manifest({"op": "delete", "episode_id": eid.hex()})
            self._manifests.pop(eid, None)

    # -- reading ---------------------------------------------------------

    def _read_record(self, key: ClipKey, offset: int) -> tuple[int, int, bytes]:
        head = os.pread(self._rfd, KEY_SIZE + _LEN.size, offset)
        if len(head) != KEY_SIZE + _LEN.size:
            raise ChecksumError(key, "truncated data file")
        if head[:KEY_SIZE] != key.pack():
            raise ChecksumError(key, "key mismatch")
        (n,) = _LEN.unpack(head[KEY_SIZE:])
        rec = os.pread(self._rfd, n, offset + len(head))
        if len(rec) != n:
            raise ChecksumError(key, "truncated record")
        return decode_clip(rec, key)

    def read_clip(self, episode_id, modality: int, clip_index: int) -> np.ndarray:
        m = self.manifest(episode_id)
        return self._decode(m, int(modality), clip_index)

    def _decode(self, m: EpisodeManifest, modality: int, ci: int) -> np.ndarray:
        key = ClipKey(m.episode_id, modality, ci)
        codec, count, payload = self._read_record(key, m.offsets[modality][ci])
        if codec != CODEC_RAW:
            raise StoreError(f"unsupported codec {codec} in {key}")
        expect = min(m.clip_len, m.length - ci * m.clip_len)
        if count != expect or len(payload) != count * m.frame_sizes[modality]:
            raise ChecksumError(key, "frame count / payload size mismatch")
        arr = np.frombuffer(payload, dtype=np.dtype(m.dtypes[modality]))
        return arr.reshape((count,) + m.frame_shapes[modality])

    def read_segment(
        self,
        episode_id: bytes | str,
        start: int,
        length: int,
        modalities: Sequence[int] | None = None,
    ) -> Segment:
        m = self.manifest(episode_id)
        if start < 0 or length < 0 or start + length > m.length:
            raise RangeError(f"range [{start}, {start + length}) outside episode of length {m.length}")
        mods = m.modalities if modalities is None else tuple(int(x) for x in modalities)
        for mod in mods:
            if mod not in m.modalities:
                raise StoreError(f"modality {mod} not stored for episode {m.episode_id.hex()}")
        out: dict[int, np.ndarray] = {}
        end = start + length
        first_clip = start // m.clip_len
        last_clip = (end - 1) // m.clip_len if length else first_clip - 1
        for mod in mods:
            parts = []
            for ci in range(first_clip, last_clip + 1):
                clip = self._decode(m, mod, ci)
                base = ci * m.clip_len
                parts.append(clip[max(start - base, 0) : min(end - base, len(clip))])
            if parts:
                out[mod] = np.concatenate(parts)
            else:
                out[mod] = np.empty((0,) + m.frame_shapes[mod], dtype=np.dtype(m.dtypes[mod]))
        return Segment(m.episode_id, start, out)

    def read_episode(self, episode_id, modalities: Sequence[int] | None = None) -> Segment:
        m = self.manifest(episode_id)
        return self.read_segment(m.episode_id, 0, m.length, modalities)

    def find_by_label(self, label: str) -> list[tuple[bytes, int, int]]:
        self.refresh()
        hits = []
        for m in self.manifests():
            for name, s, e in m.labels:
                if name == label:
                    hits.append((m.episode_id, s, e))
        return sorted(hits)

    def keys(self) -> list[ClipKey]:
        """Live clip keys in raw serialized-key order."""
        ks = [
            ClipKey(m.episode_id, mod, ci)
            for m in self.manifests()
            for mod in m.modalities
            for ci in range(m.num_clips)
        ]
        return sorted(ks, key=ClipKey.pack)

    def scan(self) -> Iterator[tuple[ClipKey, int, int]]:
        """Walk every record physically present in ``data.bin``: (key, offset, size)."""
        size = os.fstat(self._rfd).st_size
        off = 0
        while off + KEY_SIZE + _LEN.size <= size:
            head = os.pread(self._rfd, KEY_SIZE + _LEN.size, off)
            key = ClipKey.unpack(head[:KEY_SIZE])
            (n,) = _LEN.unpack(head[KEY_SIZE:])
            total = KEY_SIZE + _LEN.size + n
            if off + total > size:
                break
            yield key, off, total
            off += total

    # -- compaction ------------------------------------------------------

    def compact(self) -> CompactStats:
        """Rewrite the store keeping only clips reachable from live manifests."""
        took_lock = False
        if not self._owns_lock:
            if self.mode == "r":
                # raises ConcurrentWriterError if someone else is writing
                self._acquire_writer_lock()
                took_lock = True
        try:
            return self._compact()
        finally:
            if took_lock:
                (self.path / LOCK_FILE).unlink(missing_ok=True)
                self._owns_lock = False

    def _compact(self) -> CompactStats:
        with self._lock:
            if self._data is not None:
                self._data.flush()
            self.refresh()
            data_path = self.path / DATA_FILE
            bytes_before = os.path.getsize(data_path)
            records_before = sum(1 for _ in self.scan())
            live = self.manifests()
            tmp_data = self.path / (DATA_FILE + ".compact")
            tmp_man = self.path / (MANIFEST_FILE + ".compact")
            pos = 0
            new_manifests = []
            with open(tmp_data, "wb") as out:
                for m in live:
                    nm = EpisodeManifest.from_json(m.to_json())
                    for mod in m.modalities:
                        offs = []
                        for ci, off in enumerate(m.offsets[mod]):
                            key = ClipKey(m.episode_id, mod, ci)
                            # verify before copying so compaction never launders corruption
                            self._read_record(key, off)
                            head = os.pread(self._rfd, KEY_SIZE + _LEN.size, off)
                            (n,) = _LEN.unpack(head[KEY_SIZE:])
                            blob = head + os.pread(self._rfd, n, off + len(head))
                            out.write(blob)
                            offs.append(pos)
                            pos += len(blob)
                        nm.offsets[mod] = offs
                    new_manifests.append(nm)
                out.flush()
                os.fsync(out.fileno())
            with open(tmp_man, "wb") as f:
                for nm in new_manifests:
                    f.write((json.dumps(nm.to_json(), sort_keys=True, separators=(",", ":")) + "\n").encode())
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp_data, data_path)
            os.replace(tmp_man, self.path / MANIFEST_FILE)
            self._open_files()
            self.refresh()
            stats = CompactStats(
                episodes=len(new_manifests),
                records_before=records_before,
                records_after=sum(len(m.offsets[x]) for m in new_manifests for x in m.modalities),
                bytes_before=bytes_before,
                bytes_after=pos,
            )
            logger.info("compacted %s: reclaimed %d bytes", self.path, stats.bytes_reclaimed)
            return stats


def write_episode(store: TrajStore, episode_id, frames, clip_len=DEFAULT_CLIP_LEN, labels=(), source=""):
    return store.write_episode(episode_id, frames, clip_len=clip_len, labels=labels, source=source)


def read_segment(store: TrajStore, episode_id, start: int, length: int, modalities=None) -> Segment:
    return store.read_segment(episode_id, start, length, modalities)


def find_by_label(store: TrajStore, label: str):
    return store.find_by_label(label)


def compact(store: TrajStore) -> CompactStats:
    return store.compact()
