"""
Checkpoint files.

Layout (little-endian):

    b"MDRT"                 magic
    uint32                  format version
    uint32, bytes           length-prefixed JSON metadata
    uint32                  number of tensor records
    per record:
        uint32, bytes       length-prefixed utf-8 name
        uint32              ndim
        uint64 * ndim       dimensions
        float64 * prod      row-major values

Optimizer moments are stored as tensor records named ``optim.m/<param>`` and
``optim.v/<param>``; everything else (schedule, hyperparameters, config, RNG
state) lives in the metadata.
"""

import fcntl
import json
import logging
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional

import numpy as np

from .exceptions import CheckpointError
from .optim import OptimizerState

logger = logging.getLogger(__name__)

MAGIC = b"MDRT"
FORMAT_VERSION = 1
_M_PREFIX = "optim.m/"
_V_PREFIX = "optim.v/"


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    optimizer: OptimizerState
    schedule: Dict[str, Any]
    corpus_hash: str
    strategy: str
    config: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    rng_state: Optional[Dict[str, Any]] = None
    version: int = FORMAT_VERSION

    @property
    def phase(self) -> int:
        return int(self.schedule.get("phase", 0))

    @property
    def num_modalities(self) -> int:
        return int(self.config.get("corpus", {}).get("num_modalities", 0))


@contextmanager
def _locked(path: Path):
    lock_path = path.with_name(path.name + ".lock")
    with open(lock_path, "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)


def _write_bytes(f: BinaryIO, payload: bytes):
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _write_record(f: BinaryIO, name: str, values: np.ndarray):
    arr = np.ascontiguousarray(values, dtype="<f8")
    _write_bytes(f, name.encode("utf-8"))
    f.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes(order="C"))


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opt = checkpoint.optimizer
    meta = {
        "schedule": checkpoint.schedule,
        "corpus_hash": checkpoint.corpus_hash,
        "strategy": checkpoint.strategy,
        "config": checkpoint.config,
        "rng_state": checkpoint.rng_state,
        "optimizer": {**opt.hyperparameters(), "step": opt.step, "steps": opt.steps},
    }
    records = dict(checkpoint.tensors)
    for name in opt.exp_avg:
        records[_M_PREFIX + name] = opt.exp_avg[name]
        records[_V_PREFIX + name] = opt.exp_avg_sq[name]

    with _locked(path):
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(MAGIC)
                f.write(struct.pack("<I", checkpoint.version))
                _write_bytes(f, json.dumps(meta, sort_keys=True).encode("utf-8"))
                f.write(struct.pack("<I", len(records)))
                for name in sorted(records):
                    _write_record(f, name, records[name])
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    logger.info("wrote checkpoint %s (%d tensors)", path, len(records))
    return path


def _read_exact(f: BinaryIO, n: int, path: Path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return data


def _read_uint(f: BinaryIO, path: Path) -> int:
    return struct.unpack("<I", _read_exact(f, 4, path))[0]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    with open(path, "rb") as f:
        if _read_exact(f, 4, path) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        version = _read_uint(f, path)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            meta = json.loads(_read_exact(f, _read_uint(f, path), path).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt metadata ({e})") from e

        records = {}
        for _ in range(_read_uint(f, path)):
            name = _read_exact(f, _read_uint(f, path), path).decode("utf-8")
            ndim = _read_uint(f, path)
            shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, path)) if ndim else ()
            count = int(np.prod(shape)) if ndim else 1
            values = np.frombuffer(_read_exact(f, 8 * count, path), dtype="<f8")
            records[name] = values.astype(np.float64).reshape(shape)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after the last record")

    opt_meta = meta["optimizer"]
    optimizer = OptimizerState(
        lr=opt_meta["lr"],
        beta1=opt_meta["beta1"],
        beta2=opt_meta["beta2"],
        eps=opt_meta["eps"],
        weight_decay=opt_meta["weight_decay"],
        step=int(opt_meta["step"]),
        steps={k: int(v) for k, v in opt_meta["steps"].items()},
        group_lrs={k: float(v) for k, v in opt_meta.get("group_lrs", {}).items()},
    )
    tensors = {}
    for name, values in records.items():
        if name.startswith(_M_PREFIX):
            optimizer.exp_avg[name[len(_M_PREFIX):]] = values
        elif name.startswith(_V_PREFIX):
            optimizer.exp_avg_sq[name[len(_V_PREFIX):]] = values
        else:
            tensors[name] = values
    if set(optimizer.exp_avg) != set(optimizer.exp_avg_sq):
        raise CheckpointError(f"{path}: optimizer moments are incomplete")

    return Checkpoint(
        tensors=tensors,
        optimizer=optimizer,
        schedule=meta["schedule"],
        corpus_hash=meta["corpus_hash"],
        strategy=meta["strategy"],
        config=meta["config"],
        rng_state=meta.get("rng_state"),
        version=version,
    )
