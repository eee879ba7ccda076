"""Little-endian binary files for episodes and checkpoints, text room catalogs,
and an append-only dataset manifest.

Episode file: a 27-byte header followed by fixed-size frame records::

    "RCEP" | version u32 | episode id u32 | room id u32 | frames u32 |
    obs kind u8 | width u16 | height u16 | camera u8 | provenance u8

    per frame: pose 4 f32 | expert 6 f32 | applied 6 f32 |
               depth H*W f32 (row-major) and/or rgb H*W*3 u8 (row-major, interleaved)

Checkpoint file::

    "RCKP" | version u32 | spec descriptor | tensor count u32 |
    per tensor: name (u16 length + UTF-8) | rank u8 | dims u32[rank] | values f32 |
    config text (u32 length + UTF-8)
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .data import CAMERA_TAGS, OBS_KINDS, Dataset, Episode, provenance_code, provenance_tag
from .nn import VARIANT_CODES, VARIANTS, NetworkSpec, param_shapes
from .world import RoomSpec, room_from_text, room_to_text

EPISODE_MAGIC = b"RCEP"
CHECKPOINT_MAGIC = b"RCKP"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIIBHHBB")
MANIFEST = "manifest.tsv"
CATALOG = "catalog.txt"


class DatastoreError(Exception):
    """Base class for unreadable or inconsistent files."""


class BadMagic(DatastoreError):
    pass


class VersionMismatch(DatastoreError):
    pass


class TruncatedPayload(DatastoreError):
    pass


class SizeMismatch(DatastoreError):
    """The file holds more bytes than its header declares."""


class SpecMismatch(DatastoreError):
    pass


class DuplicateEpisode(DatastoreError):
    pass


# ---------------------------------------------------------------- episodes

@dataclass(frozen=True)
class EpisodeFileHeader:
    episode_id: int
    room_id: int
    frames: int
    obs_kind: int
    width: int
    height: int
    camera: int
    provenance: int
    version: int = FORMAT_VERSION

    def pack(self) -> bytes:
        return HEADER.pack(EPISODE_MAGIC, self.version, self.episode_id, self.room_id, self.frames,
                           self.obs_kind, self.width, self.height, self.camera, self.provenance)

    @classmethod
    def unpack(cls, raw: bytes) -> "EpisodeFileHeader":
        if len(raw) < HEADER.size:
            if raw[:4] != EPISODE_MAGIC[:len(raw[:4])]:
                raise BadMagic("not an episode file")
            raise TruncatedPayload(f"truncated payload: header needs {HEADER.size} bytes, file has {len(raw)}")
        magic, version, eid, rid, frames, kind, w, h, cam, prov = HEADER.unpack_from(raw)
        if magic != EPISODE_MAGIC:
            raise BadMagic(f"bad magic {magic!r}, expected {EPISODE_MAGIC!r}")
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"episode format version {version}, reader supports {FORMAT_VERSION}")
        if kind >= len(OBS_KINDS) or cam >= len(CAMERA_TAGS):
            raise DatastoreError(f"invalid observation kind {kind} or camera tag {cam}")
        return cls(eid, rid, frames, kind, w, h, cam, prov, version)

    def frame_dtype(self) -> np.dtype:
        fields = [("pose", "<f4", (4,)), ("expert", "<f4", (6,)), ("applied", "<f4", (6,))]
        kind = OBS_KINDS[self.obs_kind]
        if kind in ("depth", "both"):
            fields.append(("depth", "<f4", (self.height, self.width)))
        if kind in ("rgb", "both"):
            fields.append(("rgb", "u1", (self.height, self.width, 3)))
        return np.dtype(fields)


def _header_for(episode: Episode) -> EpisodeFileHeader:
    kind = episode.obs_kind
    raster = episode.depth if episode.depth is not None else episode.rgb
    if raster is None:
        raise ValueError(f"episode {episode.episode_id} has no observations")
    h, w = raster.shape[1:3]
    if episode.depth is not None and episode.rgb is not None and episode.rgb.shape[1:3] != (h, w):
        raise ValueError("depth and rgb rasters of one episode must share a resolution")
    return EpisodeFileHeader(episode.episode_id, episode.room_id, len(episode), OBS_KINDS.index(kind),
                             w, h, CAMERA_TAGS.index(episode.camera), provenance_code(episode.provenance))


def episode_bytes(episode: Episode) -> bytes:
    header = _header_for(episode)
    records = np.zeros(len(episode), dtype=header.frame_dtype())
    records["pose"] = episode.poses
    records["expert"] = episode.expert
    records["applied"] = episode.applied
    if episode.depth is not None:
        records["depth"] = episode.depth
    if episode.rgb is not None:
        records["rgb"] = episode.rgb
    return header.pack() + records.tobytes()


def episode_from_bytes(raw: bytes) -> Episode:
    header = EpisodeFileHeader.unpack(raw)
    dtype = header.frame_dtype()
    expected = HEADER.size + header.frames * dtype.itemsize
    if len(raw) < expected:
        raise TruncatedPayload(f"truncated payload: {len(raw)} bytes, header declares {expected}")
    if len(raw) > expected:
        raise SizeMismatch(f"{len(raw) - expected} bytes beyond the declared {header.frames} frames")
    records = np.frombuffer(raw, dtype=dtype, count=header.frames, offset=HEADER.size)
    names = dtype.names
    return Episode(
        room_id=header.room_id,
        poses=records["pose"].copy(),
        expert=records["expert"].copy(),
        applied=records["applied"].copy(),
        depth=records["depth"].copy() if "depth" in names else None,
        rgb=records["rgb"].copy() if "rgb" in names else None,
        camera=CAMERA_TAGS[header.camera],
        provenance=provenance_tag(header.provenance),
        episode_id=header.episode_id)


def write_episode(path, episode: Episode) -> None:
    Path(path).write_bytes(episode_bytes(episode))


def read_episode(path) -> Episode:
    return episode_from_bytes(Path(path).read_bytes())


def episode_file_size(frames: int, width: int, height: int, obs_kind: str = "depth") -> int:
    header = EpisodeFileHeader(0, 0, frames, OBS_KINDS.index(obs_kind), width, height, 0, 0)
    return HEADER.size + frames * header.frame_dtype().itemsize


# ---------------------------------------------------------------- checkpoints

def describe_spec(spec: NetworkSpec) -> str:
    text = f"{spec.variant} input={'x'.join(map(str, spec.input_shape))} hidden={'x'.join(map(str, spec.hidden))}"
    if spec.is_conv:
        text += " conv=" + ",".join("/".join(map(str, s)) for s in spec.conv)
    if spec.frames_per_step > 1:
        text += f" stack={spec.stack}"
    return text


def _pack_spec(spec: NetworkSpec) -> bytes:
    parts = [struct.pack("<BB", VARIANT_CODES[spec.variant], len(spec.input_shape)),
             struct.pack(f"<{len(spec.input_shape)}I", *spec.input_shape),
             struct.pack("<B", len(spec.hidden)), struct.pack(f"<{len(spec.hidden)}I", *spec.hidden),
             struct.pack("<B", len(spec.conv))]
    for stage in spec.conv:
        parts.append(struct.pack("<3I", *stage))
    parts.append(struct.pack("<I", spec.stack))
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise TruncatedPayload(f"truncated payload at byte {self.pos}")
        values = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return values

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedPayload(f"truncated payload at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def _unpack_spec(r: _Reader) -> NetworkSpec:
    code, rank = r.take("<BB")
    if code >= len(VARIANTS):
        raise DatastoreError(f"unknown variant code {code}")
    shape = r.take(f"<{rank}I")
    (nh,) = r.take("<B")
    hidden = r.take(f"<{nh}I")
    (nc,) = r.take("<B")
    conv = tuple(r.take("<3I") for _ in range(nc))
    (stack,) = r.take("<I")
    return NetworkSpec(VARIANTS[code], shape, hidden, conv, stack)


def checkpoint_bytes(spec: NetworkSpec, params: dict, config_text: str = "") -> bytes:
    expected = param_shapes(spec)
    if set(expected) != set(params):
        raise SpecMismatch(f"parameter names do not match {describe_spec(spec)}")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_spec(spec), struct.pack("<I", len(params))]
    for name in expected:
        values = np.ascontiguousarray(params[name], dtype="<f4")
        if values.shape != tuple(expected[name]):
            raise SpecMismatch(f"{name} has shape {values.shape}, {describe_spec(spec)} needs {expected[name]}")
        encoded = name.encode("utf-8")
        parts += [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", values.ndim),
                  struct.pack(f"<{values.ndim}I", *values.shape), values.tobytes()]
    text = config_text.encode("utf-8")
    parts += [struct.pack("<I", len(text)), text]
    return b"".join(parts)


def checkpoint_from_bytes(raw: bytes):
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    r = _Reader(raw)
    r.take_bytes(4)
    (version,) = r.take("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, reader supports {FORMAT_VERSION}")
    spec = _unpack_spec(r)
    (count,) = r.take("<I")
    params = {}
    for _ in range(count):
        (n,) = r.take("<H")
        name = r.take_bytes(n).decode("utf-8")
        (rank,) = r.take("<B")
        dims = r.take(f"<{rank}I")
        size = int(np.prod(dims)) * 4
        params[name] = np.frombuffer(r.take_bytes(size), dtype="<f4").reshape(dims).astype(np.float32)
    (n,) = r.take("<I")
    text = r.take_bytes(n).decode("utf-8")
    if r.pos != len(raw):
        raise SizeMismatch(f"{len(raw) - r.pos} trailing bytes after the checkpoint")
    expected = param_shapes(spec)
    if set(params) != set(expected):
        raise SpecMismatch(f"tensor names do not match {describe_spec(spec)}")
    return spec, params, text


def write_checkpoint(path, spec: NetworkSpec, params: dict, config_text: str = "") -> None:
    Path(path).write_bytes(checkpoint_bytes(spec, params, config_text))


def read_checkpoint(path):
    """(NetworkSpec, parameters as f32 arrays, config text)."""
    return checkpoint_from_bytes(Path(path).read_bytes())


def load_for_finetune(path, spec: NetworkSpec) -> dict:
    stored, params, _ = read_checkpoint(path)
    if stored != spec:
        raise SpecMismatch(f"checkpoint holds {describe_spec(stored)}, training wants {describe_spec(spec)}")
    return params


# ---------------------------------------------------------------- rooms

def write_room(path, room: RoomSpec) -> None:
    Path(path).write_text(room_to_text(room))


def read_room(path) -> RoomSpec:
    return room_from_text(Path(path).read_text())


def write_catalog(directory, pairs) -> List[Path]:
    """One text file per room plus ``catalog.txt`` listing id, role and file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines, paths = [], []
    for role, room in pairs:
        name = f"room_{room.id}.txt"
        write_room(d / name, room)
        paths.append(d / name)
        lines.append(f"{room.id}\t{role}\t{name}")
    _atomic_write(d / CATALOG, "\n".join(lines) + "\n")
    return paths


def read_catalog(directory) -> List[Tuple[str, RoomSpec]]:
    d = Path(directory)
    listing = d / CATALOG
    if not listing.exists():
        raise FileNotFoundError(f"no {CATALOG} in {d}")
    pairs = []
    for line in listing.read_text().splitlines():
        if line.strip():
            _, role, name = line.split("\t")
            pairs.append((role, read_room(d / name)))
    return pairs


# ---------------------------------------------------------------- dataset directories

@dataclass(frozen=True)
class ManifestEntry:
    id: int
    file: str
    provenance: str
    frames: int

    def line(self) -> str:
        return f"{self.id}\t{self.file}\t{self.provenance}\t{self.frames}"


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(directory) -> List[ManifestEntry]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        return []
    entries = []
    for line in path.read_text().splitlines():
        if line.strip():
            eid, name, prov, frames = line.split("\t")
            entries.append(ManifestEntry(int(eid), name, prov, int(frames)))
    return entries


def aggregate(directory, episodes, provenance: Optional[str] = None) -> List[ManifestEntry]:
    """Append episodes to a dataset directory and rewrite its manifest atomically.

    Episode files are written before the manifest, so a crash leaves the old
    manifest intact. Ids must be new to the directory.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(d)
    taken = {e.id for e in entries}
    new_ids = [e.episode_id for e in episodes]
    if len(set(new_ids)) != len(new_ids) or taken & set(new_ids):
        dup = sorted((taken & set(new_ids)) | {i for i in new_ids if new_ids.count(i) > 1})
        raise DuplicateEpisode(f"episode ids already present: {dup}")
    for e in episodes:
        if provenance is not None and e.provenance != provenance:
            e = replace(e, provenance=provenance)
        name = f"episode_{e.episode_id:06d}.rcep"
        write_episode(d / name, e)
        entries.append(ManifestEntry(e.episode_id, name, e.provenance, len(e)))
    _atomic_write(d / MANIFEST, "".join(entry.line() + "\n" for entry in entries))
    return entries


def write_dataset(directory, dataset: Dataset) -> List[ManifestEntry]:
    d = Path(directory)
    if read_manifest(d):
        raise DuplicateEpisode(f"{d} already holds a dataset; aggregate onto it instead")
    return aggregate(d, dataset.episodes)


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    entries = read_manifest(d)
    if not entries:
        raise FileNotFoundError(f"no dataset manifest in {d}")
    episodes = []
    for entry in entries:
        e = read_episode(d / entry.file)
        if len(e) != entry.frames or e.episode_id != entry.id:
            raise SizeMismatch(f"{entry.file} disagrees with its manifest line")
        episodes.append(e)
    return Dataset(episodes)
