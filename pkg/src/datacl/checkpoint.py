"""Checkpoint container.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then every array as little-endian float64 in manifest order.
The manifest holds version, config hash, task index, step and the
(name, shape) of each array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapter import DecomposedAdapterLayer
from .config import RunConfig
from .metrics import AccuracyMatrix
from .model import Backbone, ModelState
from .trainer import SequenceResult, StepLog
from .weighting import ComponentBank

MAGIC = b"DATACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    task_index: int
    step: int
    arrays: dict[str, np.ndarray]
    version: int = VERSION


def to_bytes(ck: Checkpoint) -> bytes:
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in ck.arrays.items()]
    manifest = {"version": ck.version, "config_hash": ck.config_hash, "task_index": ck.task_index,
                "step": ck.step, "arrays": entries}
    head = json.dumps(manifest, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in ck.arrays.values())
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + n].decode())
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    offset = 16 + n
    arrays = {}
    for e in manifest["arrays"]:
        shape = tuple(e["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + size > len(blob):
            raise CheckpointError(f"truncated payload at array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=offset).reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes")
    return Checkpoint(manifest["config_hash"], manifest["task_index"], manifest["step"], arrays,
                      manifest["version"])


def save(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ck))
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())


# -- run state <-> named arrays --------------------------------------------

_LOG_COLS = 5


def pack_result(result: SequenceResult, config_hash: str, task_index: int) -> Checkpoint:
    state = result.state
    arrays: dict[str, np.ndarray] = {}
    for i, (W, b) in enumerate(zip(state.backbone.weights, state.backbone.biases)):
        arrays[f"backbone.W{i}"] = W
        arrays[f"backbone.b{i}"] = b
    arrays.update(state.named_arrays())
    for i, banks in enumerate(state.banks):
        for bk in banks:
            arrays[f"l{i}.{bk}.frozen"] = banks[bk].frozen.astype(np.float64)
    for tid in sorted(state.task_queries):
        for i, q in enumerate(state.task_queries[tid]):
            arrays[f"query.{tid}.{i}"] = q
    arrays["n_classes"] = np.array(float(state.n_classes))
    arrays["matrix"] = result.matrix.a
    if result.static_matrix is not None:
        arrays["static_matrix"] = result.static_matrix.a
    rows = [(r.step, r.task, r.loss, r.ortho, r.restored) for r in result.log]
    arrays["log"] = np.array(rows, dtype=np.float64).reshape(len(rows), _LOG_COLS)
    return Checkpoint(config_hash, task_index, result.step, arrays)


def unpack_result(ck: Checkpoint, cfg: RunConfig) -> SequenceResult:
    a = ck.arrays
    backbone = Backbone([a[f"backbone.W{i}"] for i in range(3)], [a[f"backbone.b{i}"] for i in range(3)])
    for arr in backbone.weights + backbone.biases:
        arr.setflags(write=False)
    layers = []
    banks = []
    for i in range(2):
        layers.append(DecomposedAdapterLayer(backbone.weights[i], backbone.biases[i], a[f"l{i}.B1"],
                                             a[f"l{i}.A1"], a[f"l{i}.B2"], a[f"l{i}.A2"]))
        keys = sorted({k.split(".")[1] for k in a if k.startswith(f"l{i}.") and k.endswith(".frozen")})
        banks.append({bk: ComponentBank(a[f"l{i}.{bk}.W"], a[f"l{i}.{bk}.K"], a[f"l{i}.{bk}.att"],
                                        a[f"l{i}.{bk}.frozen"].astype(bool)) for bk in keys})
    queries: dict[int, list[np.ndarray]] = {}
    for k in a:
        if k.startswith("query."):
            _, tid, i = k.split(".")
            queries.setdefault(int(tid), []).append((int(i), a[k]))
    task_queries = {t: [q for _, q in sorted(v, key=lambda p: p[0])] for t, v in sorted(queries.items())}
    state = ModelState(backbone, layers, banks, int(a["n_classes"]), task_queries)
    log = [StepLog(int(r[0]), int(r[1]), float(r[2]), float(r[3]), int(r[4])) for r in a["log"]]
    static = AccuracyMatrix(a["static_matrix"]) if "static_matrix" in a else None
    return SequenceResult(AccuracyMatrix(a["matrix"]), static, log, state, ck.step)
