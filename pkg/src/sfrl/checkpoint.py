"""Binary checkpoint container.

Layout (all integers u32 little-endian, floats IEEE-754 f32 little-endian)::

    b"SFRL" version
    phi_dim history rays n_actions n_tasks current_task
    n_records
    n_records x (name_len name_utf8 rank dims... data...)
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SFRL"
VERSION = 1
_META = ("phi_dim", "history", "rays", "n_actions", "n_tasks", "current_task")


class CheckpointError(ValueError):
    pass


def write_record(fh, name: str, array: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_record(fh) -> tuple[str, np.ndarray]:
    (n,) = _unpack(fh, "<I")
    name = fh.read(n).decode("utf-8")
    (rank,) = _unpack(fh, "<I")
    dims = _unpack(fh, f"<{rank}I") if rank else ()
    count = int(np.prod(dims)) if dims else 1
    buf = fh.read(4 * count)
    if len(buf) != 4 * count:
        raise CheckpointError(f"truncated data for record {name!r}")
    return name, np.frombuffer(buf, dtype="<f4").reshape(dims).astype(np.float32)


def _unpack(fh, fmt: str):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise CheckpointError("unexpected end of checkpoint")
    return struct.unpack(fmt, buf)


@dataclass
class Checkpoint:
    meta: dict[str, int]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path) -> None:
        """Write atomically: a crash mid-write leaves the previous file intact."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<6I", *(int(self.meta[k]) for k in _META)))
            fh.write(struct.pack("<I", len(self.params)))
            for name, arr in self.params.items():
                write_record(fh, name, arr)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise CheckpointError(f"{path}: not an SFRL checkpoint")
            (version,) = _unpack(fh, "<I")
            if version != VERSION:
                raise CheckpointError(f"{path}: unsupported format version {version}")
            meta = dict(zip(_META, _unpack(fh, "<6I")))
            (n,) = _unpack(fh, "<I")
            params = dict(read_record(fh) for _ in range(n))
        return cls(meta, params)


# --------------------------------------------------------------------------- models

def _layer_sizes(params: dict[str, np.ndarray], prefix: str) -> list[int]:
    sizes = []
    i = 0
    while f"{prefix}.L{i}.W" in params:
        w = params[f"{prefix}.L{i}.W"]
        if not sizes:
            sizes.append(w.shape[1])
        sizes.append(w.shape[0])
        i += 1
    if not sizes:
        raise CheckpointError(f"no layers under {prefix!r}")
    return sizes


def model_to_checkpoint(model, history: int, rays: int) -> Checkpoint:
    from .baselines import DQNModel, ImitationModel

    prefix = {DQNModel: "dqn.", ImitationModel: "imit."}.get(type(model), "")
    params = {prefix + k: v for k, v in model.parameters().items()}
    n_tasks = len(getattr(model, "tasks", [None]))
    if model.kind == "sf":
        params["sf.multitask"] = np.array(float(model.multitask_sf))
        phi_dim = model.phi_dim
    else:
        phi_dim = model.encoder.n_out
    meta = dict(phi_dim=phi_dim, history=history, rays=rays, n_actions=model.n_actions,
                n_tasks=n_tasks, current_task=getattr(model, "current_task", 0))
    return Checkpoint(meta, params)


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild an SF, DQN or imitation model from a checkpoint (float32)."""
    from .baselines import DQNModel, ImitationModel
    from .sf_agent import SFModel

    p = ckpt.params
    meta = ckpt.meta
    if "dqn.encoder.L0.W" in p:
        sub = {k[4:]: v for k, v in p.items() if k.startswith("dqn.")}
        enc = _layer_sizes(sub, "encoder")
        head = _layer_sizes(sub, "q_head")
        model = DQNModel(enc[0], meta["n_actions"], enc[-1], tuple(enc[1:-1]), head[1])
    elif "imit.encoder.L0.W" in p:
        sub = {k[5:]: v for k, v in p.items() if k.startswith("imit.")}
        enc = _layer_sizes(sub, "encoder")
        model = ImitationModel(enc[0], meta["n_actions"], enc[-1], tuple(enc[1:-1]))
    elif "encoder.L0.W" in p:
        sub = dict(p)
        enc = _layer_sizes(sub, "encoder")
        dec = _layer_sizes(sub, "decoder")
        psi = _layer_sizes(sub, "task0.psi")
        model = SFModel(enc[0], meta["n_actions"], enc[-1], tuple(enc[1:-1]), tuple(dec[1:-1]),
                        psi[1], multitask_sf=bool(sub.pop("sf.multitask", 0.0)))
        for i in range(1, meta["n_tasks"]):
            head = model._new_head()
            model.tasks.append(head)
            model.target_heads.append(head.psi.copy())
        for i, t in enumerate(model.tasks):
            if f"task{i}.frozen_encoder.L0.W" in sub:
                t.frozen_encoder = model.encoder.copy()
        model.current_task = meta["current_task"]
        model._build_optimizer()
    else:
        raise CheckpointError("checkpoint holds no recognised model")
    target = model.parameters()
    missing = set(target) - set(sub)
    extra = set(sub) - set(target)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for k, arr in target.items():
        if arr.shape != sub[k].shape:
            raise CheckpointError(f"{k}: shape {sub[k].shape} != {arr.shape}")
        arr[...] = sub[k]
    return model
