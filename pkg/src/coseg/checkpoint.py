"""Self-describing checkpoint container.

Layout (all headers are ASCII lines)::

    COSEG-CHECKPOINT <version>
    config <nbytes>          followed by the model config as key = value text
    adam <nbytes>            optional; Adam hyperparameters as key = value text
    tensors <count>
    <name> <ndim> <d0> ...   followed by prod(d) little-endian float32 values
    ...
    end

Tensor names are ``param/<p>``, ``bn/<layer>/mean``, ``bn/<layer>/var`` and,
when optimizer state is stored, ``adam_m/<p>`` and ``adam_v/<p>``.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .network import CosegModel
from .optim import Adam, AdamState

MAGIC = "COSEG-CHECKPOINT"
VERSION = 1
_LE32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _kv(d: dict) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in d.items())


def save_checkpoint(path: str | Path, model: CosegModel, optimizer: Adam | None = None) -> None:
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{k}", p.data) for k, p in model.params.items()]
    for name, st in model.bn.items():
        tensors.append((f"bn/{name}/mean", st.mean))
        tensors.append((f"bn/{name}/var", st.var))
    if optimizer is not None:
        st = optimizer.state
        for k in model.params:
            if k in st.m:
                tensors.append((f"adam_m/{k}", st.m[k]))
                tensors.append((f"adam_v/{k}", st.v[k]))
    buf = io.BytesIO()
    buf.write(f"{MAGIC} {VERSION}\n".encode())
    cfg = model.config.to_text().encode()
    buf.write(f"config {len(cfg)}\n".encode() + cfg)
    if optimizer is not None:
        hp = _kv(optimizer.state.hyperparameters()).encode()
        buf.write(f"adam {len(hp)}\n".encode() + hp)
    buf.write(f"tensors {len(tensors)}\n".encode())
    for name, arr in tensors:
        dims = " ".join(str(d) for d in arr.shape)
        buf.write(f"{name} {arr.ndim} {dims}".rstrip().encode() + b"\n")
        buf.write(np.ascontiguousarray(arr, dtype=_LE32).tobytes())
    buf.write(b"end\n")
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def line(self) -> str:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise CheckpointError(f"unterminated header at byte {self.pos}")
        text = self.data[self.pos : end].decode("ascii", errors="replace")
        self.pos = end + 1
        return text

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated payload: need {n} bytes at byte {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, str] | None, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    head = r.line().split()
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if int(head[1]) != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {head[1]}")
    config, adam = None, None
    tensors: dict[str, np.ndarray] = {}
    while True:
        fields = r.line().split()
        if not fields:
            raise CheckpointError(f"{path}: empty section header at byte {r.pos}")
        kind = fields[0]
        if kind == "config":
            config = ModelConfig.from_text(r.take(int(fields[1])).decode())
        elif kind == "adam":
            adam = {}
            for ln in r.take(int(fields[1])).decode().splitlines():
                k, _, v = ln.partition("=")
                adam[k.strip()] = v.strip()
        elif kind == "tensors":
            for _ in range(int(fields[1])):
                parts = r.line().split()
                name, ndim = parts[0], int(parts[1])
                shape = tuple(int(d) for d in parts[2 : 2 + ndim])
                count = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(r.take(count * 4), dtype=_LE32).reshape(shape)
                tensors[name] = arr
        elif kind == "end":
            break
        else:
            raise CheckpointError(f"{path}: unknown section {kind!r}")
    if config is None:
        raise CheckpointError(f"{path}: missing config section")
    return config, adam, tensors


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[CosegModel, Adam | None]:
    """Rebuild the model (and optimizer, if its state was saved) from ``path``."""
    config, adam, tensors = read_checkpoint(path)
    model = CosegModel(config, dtype=dtype)
    for k, p in model.params.items():
        arr = tensors.get(f"param/{k}")
        if arr is None or arr.shape != p.shape:
            raise CheckpointError(f"{path}: parameter {k!r} missing or mis-shaped")
        p.data = arr.astype(model.dtype)
    for name, st in model.bn.items():
        st.mean = tensors[f"bn/{name}/mean"].astype(model.dtype)
        st.var = tensors[f"bn/{name}/var"].astype(model.dtype)
    optimizer = None
    if adam is not None:
        optimizer = Adam(model.params, lr=float(adam["lr"]), beta1=float(adam["beta1"]),
                         beta2=float(adam["beta2"]), eps=float(adam["eps"]))
        state: AdamState = optimizer.state
        state.t = int(adam["t"])
        for k in model.params:
            if f"adam_m/{k}" in tensors:
                state.m[k] = tensors[f"adam_m/{k}"].astype(model.dtype)
                state.v[k] = tensors[f"adam_v/{k}"].astype(model.dtype)
    return model, optimizer
