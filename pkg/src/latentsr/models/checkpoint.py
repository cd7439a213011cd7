"""Single-file binary checkpoints.

Layout: magic ``LSRC``, version u32, meta-JSON (u64 length + UTF-8 bytes,
containing the serialized ModelConfig plus free-form metadata), tensor
count u32, then per tensor: name (u16 + UTF-8), dtype string (u8 +
ASCII, numpy convention e.g. ``<f4``), ndim u8, dims u32 each, raw
little-endian data. Loading validates tensor shapes against the config
via strict state-dict matching.
"""

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import InvalidArgument, MissingPrerequisite
from .config import ModelConfig

MAGIC = b"LSRC"
VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<i4"}


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    meta: dict


def save_checkpoint(path, config: ModelConfig, tensors: dict, meta: dict | None = None):
    meta = dict(meta or {})
    meta["model_config"] = config.to_dict()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<")
        dtype_str = dtype.str
        if dtype_str not in _ALLOWED_DTYPES:
            raise InvalidArgument(f"unsupported tensor dtype {dtype_str} for {name!r}")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", len(dtype_str)))
        buf.write(dtype_str.encode("ascii"))
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.astype(dtype).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(f"checkpoint not found: {path}")
    data = path.read_bytes()
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise InvalidArgument(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<Q", buf.read(8))
    meta = json.loads(buf.read(meta_len).decode("utf-8"))
    config = ModelConfig.from_dict(meta.pop("model_config"))
    (count,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode("utf-8")
        (dt_len,) = struct.unpack("<B", buf.read(1))
        dtype_str = buf.read(dt_len).decode("ascii")
        if dtype_str not in _ALLOWED_DTYPES:
            raise InvalidArgument(f"unsupported tensor dtype {dtype_str} in {path}")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        dtype = np.dtype(dtype_str)
        raw = buf.read(n * dtype.itemsize)
        if len(raw) != n * dtype.itemsize:
            raise InvalidArgument(f"truncated tensor data for {name!r} in {path}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return Checkpoint(config=config, tensors=tensors, meta=meta)


# ---------------------------------------------------------------------------
# torch module <-> tensor-record helpers


def module_tensors(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}.{k}": v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict, prefix: str,
                dtype: torch.dtype | None = None):
    """Load ``prefix.*`` records into a module, validating names and shapes."""
    want = module.state_dict()
    state = {}
    for key, ref in want.items():
        rec = f"{prefix}.{key}"
        if rec not in tensors:
            raise InvalidArgument(f"checkpoint missing tensor {rec!r}")
        arr = torch.from_numpy(tensors[rec])
        if tuple(arr.shape) != tuple(ref.shape):
            raise InvalidArgument(
                f"shape mismatch for {rec!r}: checkpoint {tuple(arr.shape)} "
                f"vs config-built {tuple(ref.shape)}")
        state[key] = arr.to(dtype) if dtype is not None else arr.to(ref.dtype)
    module.load_state_dict(state, strict=True)
    return module


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict:
    out = {}
    state = opt.state_dict()["state"]
    for idx, entry in state.items():
        for key, val in entry.items():
            if isinstance(val, torch.Tensor):
                out[f"{prefix}.{idx}.{key}"] = val.detach().cpu().numpy()
            else:
                out[f"{prefix}.{idx}.{key}"] = np.asarray(val, dtype=np.float64)
    return out


def load_optimizer(opt: torch.optim.Optimizer, tensors: dict, prefix: str):
    """Restore Adam moments saved by optimizer_tensors.

    The optimizer must have been constructed over the same parameters in
    the same order.
    """
    groups = opt.state_dict()["param_groups"]
    state = {}
    pat = prefix + "."
    for name, arr in tensors.items():
        if not name.startswith(pat):
            continue
        idx_str, key = name[len(pat):].split(".", 1)
        entry = state.setdefault(int(idx_str), {})
        t = torch.from_numpy(arr.copy())
        entry[key] = t if key != "step" else t.to(torch.float32).reshape(())
    opt.load_state_dict({"state": state, "param_groups": groups})
    return opt
