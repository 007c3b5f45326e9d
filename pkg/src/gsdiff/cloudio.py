"""Cloud container serialization.

Binary layout (little-endian), magic ``GSDF``:

    magic      4 bytes  b"GSDF"
    version    u32      1 = bare cloud, 2 = trained head appended
    count      u64      number of Gaussians N
    records    N x (position f64*3, scale f64*3, rotation f64*4,
                    opacity f64, color f64*3, instance_id u32,
                    encoding f64*16)
    deltas     2 tables (before, after), each N x (d_position f64*3,
                    d_rotation f64*4, d_scale f64*3)
    partition  N x u8
    head       version >= 2 only: weights f64*32 row-major (2x16), bias f64*2

A JSON variant with identical field names is accepted for hand-authored
fixtures. Round-trips are bit-exact for every field; writes go through a
temp file + rename so interrupted runs never leave partial containers.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .scene import ENCODING_DIM, DeltaTable, GaussianCloud, TimeStamp

MAGIC = b"GSDF"
VERSION_BARE = 1
VERSION_WITH_HEAD = 2

_RECORD_DTYPE = np.dtype(
    [
        ("position", "<f8", (3,)),
        ("scale", "<f8", (3,)),
        ("rotation", "<f8", (4,)),
        ("opacity", "<f8"),
        ("color", "<f8", (3,)),
        ("instance_id", "<u4"),
        ("encoding", "<f8", (ENCODING_DIM,)),
    ]
)
_DELTA_DTYPE = np.dtype(
    [("d_position", "<f8", (3,)), ("d_rotation", "<f8", (4,)), ("d_scale", "<f8", (3,))]
)


class CloudParseError(ValueError):
    """Malformed container; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CloudVersionError(ValueError):
    pass


@dataclass
class HeadData:
    """Raw trained-head parameters as stored in a version-2 container."""

    weights: np.ndarray  # (2, 16)
    bias: np.ndarray  # (2,)


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via temp file + rename in the destination directory."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_cloud(cloud: GaussianCloud, path: str, head: HeadData | None = None) -> None:
    """Serialize to the binary container; version 2 when a head is present."""
    n = len(cloud)
    records = np.zeros(n, dtype=_RECORD_DTYPE)
    records["position"] = cloud.positions
    records["scale"] = cloud.scales
    records["rotation"] = cloud.rotations
    records["opacity"] = cloud.opacities
    records["color"] = cloud.colors
    records["instance_id"] = cloud.instance_ids
    records["encoding"] = cloud.encodings

    parts = [MAGIC]
    version = VERSION_WITH_HEAD if head is not None else VERSION_BARE
    parts.append(np.array([version], dtype="<u4").tobytes())
    parts.append(np.array([n], dtype="<u8").tobytes())
    parts.append(records.tobytes())
    for t in (TimeStamp.BEFORE, TimeStamp.AFTER):
        tab = cloud.deltas[t]
        drec = np.zeros(n, dtype=_DELTA_DTYPE)
        drec["d_position"] = tab.d_position
        drec["d_rotation"] = tab.d_rotation
        drec["d_scale"] = tab.d_scale
        parts.append(drec.tobytes())
    parts.append(cloud.partition.astype(np.uint8).tobytes())
    if head is not None:
        parts.append(np.ascontiguousarray(head.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(head.bias, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def _take(buf: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(buf):
        raise CloudParseError(f"truncated container while reading {what}", offset)
    return buf[offset : offset + size], offset + size


def load_container(path: str) -> tuple[GaussianCloud, HeadData | None]:
    """Load either the binary or the JSON container, returning (cloud, head)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] == MAGIC:
        return _parse_binary(buf)
    return _parse_json(buf)


def load_cloud(path: str) -> GaussianCloud:
    cloud, _ = load_container(path)
    return cloud


def _parse_binary(buf: bytes) -> tuple[GaussianCloud, HeadData | None]:
    offset = 4
    raw, offset = _take(buf, offset, 4, "version")
    version = int(np.frombuffer(raw, dtype="<u4")[0])
    if version not in (VERSION_BARE, VERSION_WITH_HEAD):
        raise CloudVersionError(f"unsupported container version {version}")
    raw, offset = _take(buf, offset, 8, "gaussian count")
    n = int(np.frombuffer(raw, dtype="<u8")[0])

    raw, offset = _take(buf, offset, n * _RECORD_DTYPE.itemsize, "gaussian records")
    records = np.frombuffer(raw, dtype=_RECORD_DTYPE)
    deltas: dict[TimeStamp, DeltaTable] = {}
    for t in (TimeStamp.BEFORE, TimeStamp.AFTER):
        raw, offset = _take(buf, offset, n * _DELTA_DTYPE.itemsize, f"{t.value} delta table")
        drec = np.frombuffer(raw, dtype=_DELTA_DTYPE)
        deltas[t] = DeltaTable(
            d_position=drec["d_position"].reshape(n, 3).copy(),
            d_rotation=drec["d_rotation"].reshape(n, 4).copy(),
            d_scale=drec["d_scale"].reshape(n, 3).copy(),
        )
    raw, offset = _take(buf, offset, n, "partition labels")
    partition = np.frombuffer(raw, dtype=np.uint8).copy()

    head = None
    if version >= VERSION_WITH_HEAD:
        raw, offset = _take(buf, offset, 32 * 8, "head weights")
        weights = np.frombuffer(raw, dtype="<f8").reshape(2, ENCODING_DIM).copy()
        raw, offset = _take(buf, offset, 2 * 8, "head bias")
        bias = np.frombuffer(raw, dtype="<f8").copy()
        head = HeadData(weights=weights, bias=bias)
    if offset != len(buf):
        raise CloudParseError("trailing bytes after container payload", offset)

    cloud = GaussianCloud(
        positions=records["position"].reshape(n, 3).copy(),
        scales=records["scale"].reshape(n, 3).copy(),
        rotations=records["rotation"].reshape(n, 4).copy(),
        opacities=records["opacity"].reshape(n).copy(),
        colors=records["color"].reshape(n, 3).copy(),
        instance_ids=records["instance_id"].reshape(n).copy(),
        encodings=records["encoding"].reshape(n, ENCODING_DIM).copy(),
        deltas=deltas,
        partition=partition,
    )
    return cloud, head


def save_cloud_json(cloud: GaussianCloud, path: str, head: HeadData | None = None) -> None:
    doc = {
        "version": VERSION_WITH_HEAD if head is not None else VERSION_BARE,
        "gaussians": [
            {
                "position": cloud.positions[i].tolist(),
                "scale": cloud.scales[i].tolist(),
                "rotation": cloud.rotations[i].tolist(),
                "opacity": float(cloud.opacities[i]),
                "color": cloud.colors[i].tolist(),
                "instance_id": int(cloud.instance_ids[i]),
                "encoding": cloud.encodings[i].tolist(),
            }
            for i in range(len(cloud))
        ],
        "deltas": {
            t.value: [
                {
                    "d_position": tab.d_position[i].tolist(),
                    "d_rotation": tab.d_rotation[i].tolist(),
                    "d_scale": tab.d_scale[i].tolist(),
                }
                for i in range(len(cloud))
            ]
            for t, tab in cloud.deltas.items()
        },
        "partition": cloud.partition.tolist(),
    }
    if head is not None:
        doc["head"] = {"weights": head.weights.tolist(), "bias": head.bias.tolist()}
    atomic_write_text(path, json.dumps(doc))


def _parse_json(buf: bytes) -> tuple[GaussianCloud, HeadData | None]:
    try:
        doc = json.loads(buf.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = getattr(exc, "pos", 0) if isinstance(exc, json.JSONDecodeError) else 0
        raise CloudParseError(f"neither GSDF binary nor valid JSON: {exc}", offset) from exc
    version = doc.get("version", VERSION_BARE)
    if version not in (VERSION_BARE, VERSION_WITH_HEAD):
        raise CloudVersionError(f"unsupported container version {version}")
    gs = doc["gaussians"]
    n = len(gs)
    deltas = {}
    for t in (TimeStamp.BEFORE, TimeStamp.AFTER):
        rows = doc["deltas"][t.value]
        deltas[t] = DeltaTable(
            d_position=np.array([r["d_position"] for r in rows], dtype=np.float64).reshape(n, 3),
            d_rotation=np.array([r["d_rotation"] for r in rows], dtype=np.float64).reshape(n, 4),
            d_scale=np.array([r["d_scale"] for r in rows], dtype=np.float64).reshape(n, 3),
        )
    cloud = GaussianCloud(
        positions=np.array([g["position"] for g in gs], dtype=np.float64).reshape(n, 3),
        scales=np.array([g["scale"] for g in gs], dtype=np.float64).reshape(n, 3),
        rotations=np.array([g["rotation"] for g in gs], dtype=np.float64).reshape(n, 4),
        opacities=np.array([g["opacity"] for g in gs], dtype=np.float64).reshape(n),
        colors=np.array([g["color"] for g in gs], dtype=np.float64).reshape(n, 3),
        instance_ids=np.array([g["instance_id"] for g in gs], dtype=np.uint32).reshape(n),
        encodings=np.array([g["encoding"] for g in gs], dtype=np.float64).reshape(n, ENCODING_DIM),
        deltas=deltas,
        partition=np.array(doc["partition"], dtype=np.uint8).reshape(n),
    )
    head = None
    if "head" in doc:
        head = HeadData(
            weights=np.array(doc["head"]["weights"], dtype=np.float64).reshape(2, ENCODING_DIM),
            bias=np.array(doc["head"]["bias"], dtype=np.float64).reshape(2),
        )
    return cloud, head
