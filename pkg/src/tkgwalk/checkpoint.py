"""Binary checkpoints of the full training state.

Layout, all little-endian::

    b"TKGW"                      magic
    u32 version                  currently 1
    u32 x 6 dims                 dim, hidden, entity_count, relation_count,
                                 base_relation_count, tensor_count
    per tensor (PARAM_NAMES order)
        u32 ndim, u32 x ndim shape, float32 data (C order)
    u64 adam step, f64 beta1, f64 beta2, f64 eps
    u8  moments flag             1 if first/second moments follow
        m tensors then v tensors, same order and encoding as above
    u32 length, utf-8 JSON       rng state, baseline, epoch, early-stop
                                 bookkeeping, run metadata, config hash

Parameters are trained in float32, so the tensor payload is an exact copy.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .diffnet import AdamState
from .errors import CheckpointError
from .policy import PARAM_NAMES, PolicyParams

MAGIC = b"TKGW"
VERSION = 1
_F32 = np.dtype("<f4")


def config_hash(dim: int, hidden: int, entity_count: int, relation_count: int, variant: str) -> str:
    """Fingerprint of everything that fixes tensor shapes and meaning."""
    key = json.dumps({"dim": dim, "hidden": hidden, "entity_count": entity_count,
                      "relation_count": relation_count, "variant": str(variant)}, sort_keys=True)
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def params_hash(params: PolicyParams, variant: str) -> str:
    return config_hash(params.dim, params.hidden, params.entity_count, params.relation_count, variant)


@dataclass
class Checkpoint:
    params: PolicyParams
    adam: AdamState
    base_relation_count: int
    rng_state: dict | None = None
    baseline: float = 0.0
    epoch: int = 0
    best_metric: float = float("-inf")
    bad_epochs: int = 0
    meta: dict[str, Any] = field(default_factory=dict)
    config_hash: str = ""

    def check_compatible(self, expected_hash: str):
        if self.config_hash != expected_hash:
            raise CheckpointError(
                f"checkpoint config hash {self.config_hash} does not match {expected_hash}; "
                "dimensions, vocabulary or variant differ")


def _write_tensor(out: io.BytesIO, a: np.ndarray):
    if a.dtype != np.float32:
        raise CheckpointError(f"checkpoints store float32 tensors, got {a.dtype}")
    out.write(struct.pack("<I", a.ndim))
    out.write(struct.pack(f"<{a.ndim}I", *a.shape))
    out.write(np.ascontiguousarray(a, dtype=_F32).tobytes())


def _read_tensor(buf: memoryview, pos: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    n = int(np.prod(shape, dtype=np.int64))
    a = np.frombuffer(buf, dtype=_F32, count=n, offset=pos).reshape(shape).astype(np.float32)
    return a, pos + 4 * n


def to_bytes(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<6I", p.dim, p.hidden, p.entity_count, p.relation_count,
                          ckpt.base_relation_count, len(PARAM_NAMES)))
    for name in PARAM_NAMES:
        _write_tensor(out, p[name])
    a = ckpt.adam
    out.write(struct.pack("<Qddd", a.step, a.beta1, a.beta2, a.eps))
    has_moments = all(k in a.m and k in a.v for k in PARAM_NAMES)
    if a.m and not has_moments:
        raise CheckpointError("optimizer moments cover only some tensors")
    out.write(struct.pack("<B", int(has_moments)))
    if has_moments:
        for name in PARAM_NAMES:
            _write_tensor(out, a.m[name])
        for name in PARAM_NAMES:
            _write_tensor(out, a.v[name])
    tail = {
        "rng_state": ckpt.rng_state,
        "baseline": ckpt.baseline,
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "bad_epochs": ckpt.bad_epochs,
        "meta": ckpt.meta,
        "config_hash": ckpt.config_hash,
    }
    blob = json.dumps(tail, sort_keys=True).encode()
    out.write(struct.pack("<I", len(blob)))
    out.write(blob)
    return out.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    buf = memoryview(data)
    try:
        if bytes(buf[:4]) != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        dim, hidden, n_ent, n_rel, base, count = struct.unpack_from("<6I", buf, 8)
        if count != len(PARAM_NAMES):
            raise CheckpointError(f"expected {len(PARAM_NAMES)} tensors, found {count}")
        pos = 32
        arrays = {}
        for name in PARAM_NAMES:
            arrays[name], pos = _read_tensor(buf, pos)
        step, b1, b2, eps = struct.unpack_from("<Qddd", buf, pos)
        pos += 32
        (flag,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        m, v = {}, {}
        if flag:
            for name in PARAM_NAMES:
                m[name], pos = _read_tensor(buf, pos)
            for name in PARAM_NAMES:
                v[name], pos = _read_tensor(buf, pos)
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + n != len(buf):
            raise CheckpointError("checkpoint length does not match its contents")
        tail = json.loads(bytes(buf[pos:pos + n]).decode())
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    params = PolicyParams(arrays, n_ent, n_rel)
    if (params.dim, params.hidden) != (dim, hidden):
        raise CheckpointError("tensor shapes disagree with the dimension block")
    adam = AdamState(b1, b2, eps, step, m, v)
    return Checkpoint(params, adam, base, tail["rng_state"], tail["baseline"], tail["epoch"],
                      tail["best_metric"], tail["bad_epochs"], tail["meta"], tail["config_hash"])


def save(path, ckpt: Checkpoint):
    """Write atomically: a crash never leaves a half-written file at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return from_bytes(path.read_bytes())


def capture(trainer, meta: dict | None = None) -> Checkpoint:
    """Snapshot a :class:`~tkgwalk.trainer.Trainer`."""
    variant = trainer.policy.config.variant.value
    return Checkpoint(
        trainer.policy.params.copy(),
        AdamState(trainer.adam.beta1, trainer.adam.beta2, trainer.adam.eps, trainer.adam.step,
                  {k: v.copy() for k, v in trainer.adam.m.items()},
                  {k: v.copy() for k, v in trainer.adam.v.items()}),
        trainer.store.base_relation_count,
        trainer.rng.bit_generator.state,
        float(trainer.baseline),
        int(trainer.epoch),
        float(trainer.best_metric),
        int(trainer.bad_epochs),
        dict(meta or {}),
        params_hash(trainer.policy.params, variant),
    )


def restore(trainer, ckpt: Checkpoint):
    """Load ``ckpt`` into ``trainer`` in place, refusing incompatible state."""
    ckpt.check_compatible(params_hash(trainer.policy.params, trainer.policy.config.variant.value))
    if ckpt.base_relation_count != trainer.store.base_relation_count:
        raise CheckpointError("checkpoint was trained on a different relation vocabulary")
    for name in PARAM_NAMES:
        trainer.policy.params.arrays[name][...] = ckpt.params[name]
    trainer.adam = AdamState(ckpt.adam.beta1, ckpt.adam.beta2, ckpt.adam.eps, ckpt.adam.step,
                             {k: v.copy() for k, v in ckpt.adam.m.items()},
                             {k: v.copy() for k, v in ckpt.adam.v.items()})
    if ckpt.rng_state is not None:
        trainer.rng.bit_generator.state = ckpt.rng_state
    trainer.baseline = ckpt.baseline
    trainer.epoch = ckpt.epoch
    trainer.best_metric = ckpt.best_metric
    trainer.bad_epochs = ckpt.bad_epochs
