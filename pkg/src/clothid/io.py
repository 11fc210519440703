"""On-disk formats: rollout containers, model files, clip sets and manifests.

Rollout container layout (all integers little-endian)::

    b"MSNR" | u16 version | u16 flags | u32 n | n bytes UTF-8 JSON metadata
    | u32 frames | u32 count | frames*count*3 f64 positions
    | (flags bit 0) frames*count*3 f64 velocities

Every writer emits canonical bytes (sorted JSON keys, fixed separators), so
read followed by write reproduces a file byte for byte.  Writes go through a
temporary file and an atomic rename.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datagen import ClipSet, SourceRollout, SourceSpec
from .lattice import GridSpec, SpringNetwork, TopologyFlags, from_springs, rest_layout
from .resample import TargetTrajectory
from .simcore import MaterialParams

MAGIC = b"MSNR"
VERSION = 1
FLAG_VELOCITIES = 1
MODEL_FORMAT = "msn-model"
MODEL_VERSION = 1


class FormatError(ValueError):
    """A file that does not parse or whose parts disagree."""


def canonical_json(obj, indent=None) -> str:
    if indent is None:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return json.dumps(obj, sort_keys=True, indent=indent, allow_nan=False) + "\n"


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ----------------------------------------------------------------- rollouts

@dataclass
class RolloutFile:
    """Decoded rollout container: metadata plus (F, N, 3) arrays."""

    meta: dict
    positions: np.ndarray
    velocities: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return self.positions.shape[0]

    @property
    def count(self) -> int:
        return self.positions.shape[1]


def encode_rollout(rf: RolloutFile) -> bytes:
    pos = np.asarray(rf.positions, dtype="<f8")
    if pos.ndim != 3 or pos.shape[2] != 3:
        raise FormatError(f"positions must be (frames, count, 3), got {pos.shape}")
    flags = 0
    blocks = [np.ascontiguousarray(pos).tobytes()]
    if rf.velocities is not None:
        vel = np.asarray(rf.velocities, dtype="<f8")
        if vel.shape != pos.shape:
            raise FormatError("velocity block shape differs from positions")
        flags |= FLAG_VELOCITIES
        blocks.append(np.ascontiguousarray(vel).tobytes())
    meta = dict(rf.meta, frames=int(pos.shape[0]), count=int(pos.shape[1]))
    text = canonical_json(meta).encode("utf-8")
    head = MAGIC + struct.pack("<HHI", VERSION, flags, len(text)) + text
    return head + struct.pack("<II", pos.shape[0], pos.shape[1]) + b"".join(blocks)


def decode_rollout(data: bytes) -> RolloutFile:
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError("not a rollout container (bad magic)")
    version, flags, n = struct.unpack_from("<HHI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported rollout format version {version}")
    off = 12 + n
    try:
        meta = json.loads(data[12:off].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"metadata is not valid JSON: {e}") from None
    if len(data) < off + 8:
        raise FormatError("truncated payload header")
    frames, count = struct.unpack_from("<II", data, off)
    off += 8
    block = frames * count * 3 * 8
    n_blocks = 2 if flags & FLAG_VELOCITIES else 1
    if len(data) != off + n_blocks * block:
        raise FormatError(f"payload is {len(data) - off} bytes, expected {n_blocks * block}")
    if meta.get("frames") != frames or meta.get("count") != count:
        raise FormatError("metadata dimensions disagree with payload header")
    pos = np.frombuffer(data, dtype="<f8", count=frames * count * 3, offset=off)
    pos = pos.reshape(frames, count, 3).astype(float)
    vel = None
    if flags & FLAG_VELOCITIES:
        vel = np.frombuffer(data, dtype="<f8", count=frames * count * 3, offset=off + block)
        vel = vel.reshape(frames, count, 3).astype(float)
    return RolloutFile(meta, pos, vel)


def write_rollout_file(path, rf: RolloutFile):
    atomic_write(path, encode_rollout(rf))


def read_rollout_file(path) -> RolloutFile:
    return decode_rollout(Path(path).read_bytes())


def source_rollout_to_file(ro: SourceRollout) -> RolloutFile:
    meta = dict(ro.metadata(), type="source", engine=engine_name(ro.source.kind))
    return RolloutFile(meta, ro.y, ro.velocities)


def engine_name(kind: str) -> str:
    return "femsrc" if kind == "fem" else "simcore"


def file_to_source_rollout(rf: RolloutFile) -> SourceRollout:
    if rf.meta.get("type") != "source":
        raise FormatError("not a source rollout file")
    src = SourceSpec(**rf.meta["source"])
    if src.rows * src.cols != rf.count:
        raise FormatError(f"grid {src.rows}x{src.cols} does not match {rf.count} landmarks")
    pinned = np.zeros(rf.count, dtype=bool)
    pinned[np.asarray(rf.meta["pinned"], dtype=np.int64)] = True
    return SourceRollout(rf.positions, pinned, rest_layout(src.grid), src, int(rf.meta["seed"]),
                         int(rf.meta["index"]), rf.velocities)


def target_to_file(tgt: TargetTrajectory, grid: GridSpec, extra: dict | None = None) -> RolloutFile:
    meta = {"type": "target", "rows": grid.rows, "cols": grid.cols, "width": grid.width,
            "height": grid.height, "dt": tgt.dt, "gravity": list(tgt.gravity),
            "rayleigh_b": tgt.rayleigh_b, "index": int(tgt.rollout_id),
            "pinned": np.flatnonzero(tgt.pinned).tolist(),
            "masses": [float(m) for m in tgt.masses]}
    meta.update(extra or {})
    return RolloutFile(meta, tgt.xhat)


def file_to_target(rf: RolloutFile) -> tuple[TargetTrajectory, GridSpec]:
    if rf.meta.get("type") != "target":
        raise FormatError("not a target trajectory file")
    m = rf.meta
    grid = GridSpec(int(m["rows"]), int(m["cols"]), float(m["width"]), float(m["height"]))
    if grid.n_particles != rf.count or len(m["masses"]) != rf.count:
        raise FormatError("target metadata does not match particle count")
    pinned = np.zeros(rf.count, dtype=bool)
    pinned[np.asarray(m["pinned"], dtype=np.int64)] = True
    tgt = TargetTrajectory(rf.positions, pinned, np.asarray(m["masses"], dtype=float), float(m["dt"]),
                           tuple(m["gravity"]), float(m["rayleigh_b"]), int(m["index"]), dict(m))
    return tgt, grid


# ------------------------------------------------------------------- models

def _b64(arr, dtype) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii")


def _unb64(text: str, dtype) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text.encode("ascii"), validate=True), dtype=dtype).copy()


@dataclass
class ModelFile:
    net: SpringNetwork
    params: MaterialParams
    provenance: dict

    def to_dict(self) -> dict:
        g, net = self.net.spec, self.net
        return {"format": MODEL_FORMAT, "version": MODEL_VERSION,
                "grid": {"rows": g.rows, "cols": g.cols, "width": g.width, "height": g.height},
                "topology": asdict(net.flags), "n_springs": net.n_springs,
                "springs": {"a": _b64(net.a, "<i8"), "b": _b64(net.b, "<i8"),
                            "class": _b64(net.spring_class, "<i1"),
                            "rest_length": _b64(net.rest_length, "<f8")},
                "k": _b64(self.params.k, "<f8"), "b": _b64(self.params.b, "<f8"),
                "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelFile":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise FormatError("not a model file of a supported version")
        grid = GridSpec(**d["grid"])
        flags = TopologyFlags(**d["topology"])
        s = d["springs"]
        a, b = _unb64(s["a"], "<i8"), _unb64(s["b"], "<i8")
        net = from_springs(grid, flags, np.stack([a, b], axis=1), _unb64(s["class"], "<i1"))
        l0 = _unb64(s["rest_length"], "<f8")
        if not np.array_equal(l0, net.rest_length):
            raise FormatError("stored rest lengths disagree with the grid geometry")
        k, bb = _unb64(d["k"], "<f8"), _unb64(d["b"], "<f8")
        S = int(d["n_springs"])
        if not (len(a) == len(k) == len(bb) == S):
            raise FormatError("parameter arrays do not match the spring count")
        return cls(net, MaterialParams(k.astype(float), bb.astype(float)), d.get("provenance", {}))


def encode_model(model: ModelFile) -> bytes:
    return canonical_json(model.to_dict(), indent=1).encode("utf-8")


def write_model_file(path, model: ModelFile):
    atomic_write(path, encode_model(model))


def read_model_file(path) -> ModelFile:
    try:
        d = json.loads(Path(path).read_text("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"model file is not valid JSON: {e}") from None
    return ModelFile.from_dict(d)


# --------------------------------------------------------- clips, manifests

def write_clipset_file(path, clipset: ClipSet, extra: dict | None = None):
    d = dict(clipset.to_dict(), **(extra or {}))
    atomic_write(path, canonical_json(d, indent=1).encode("utf-8"))


def read_clipset_file(path) -> tuple[ClipSet, dict]:
    d = json.loads(Path(path).read_text("utf-8"))
    return ClipSet.from_dict(d), d


def write_manifest(path, entries: list[dict], extra: dict | None = None):
    """``entries`` are dicts with at least ``file`` (relative to the manifest)."""
    base = Path(path).parent
    files = []
    for e in entries:
        files.append(dict(e, sha256=sha256_file(base / e["file"])))
    atomic_write(path, canonical_json(dict(extra or {}, files=files), indent=1).encode("utf-8"))


def read_manifest(path, verify: bool = True) -> dict:
    """Load a manifest, checking every listed file's SHA-256 unless ``verify`` is off."""
    path = Path(path)
    man = json.loads(path.read_text("utf-8"))
    if verify:
        for e in man["files"]:
            f = path.parent / e["file"]
            if not f.exists():
                raise FormatError(f"manifest lists missing file {e['file']}")
            if sha256_file(f) != e["sha256"]:
                raise FormatError(f"checksum mismatch for {e['file']}")
    return man
