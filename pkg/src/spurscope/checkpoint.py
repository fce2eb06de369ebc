"""Binary checkpoints: model spec, optimizer state and parameters.

Layout (little-endian): ``b"DSCK"``, u32 format version, u32 header length,
UTF-8 JSON header, then one DSTF tensor per parameter in header order,
followed by the Adam first and second moments for the names listed under
``"moments"``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

from .autodiff import Tensor
from .models import ModelSpec, TrainedModel
from .optim import OptimizerState
from .tensorio import FormatError, TruncatedError, WrongMagicError, decode_tensor, encode_tensor

CKPT_MAGIC = b"DSCK"
CKPT_VERSION = 1


class VersionError(FormatError):
    pass


def encode_checkpoint(model: TrainedModel, state: OptimizerState, epoch: int = 0) -> bytes:
    names = sorted(model.params)
    moments = sorted(state.m)
    header = {"model_spec": model.spec.to_json(), "optimizer": state.scalars(),
              "step": state.step, "epoch": epoch, "params": names, "moments": moments,
              "meta": {k: v for k, v in model.meta.items() if isinstance(v, (int, float, str, bool))}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(raw)), raw]
    parts += [encode_tensor(model.params[n].data) for n in names]
    parts += [encode_tensor(state.m[n]) for n in moments]
    parts += [encode_tensor(state.v[n]) for n in moments]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple:
    """Return ``(model, optimizer state, epoch)``; nothing is built on error."""
    if len(buf) < 12:
        raise TruncatedError("checkpoint header truncated")
    if buf[:4] != CKPT_MAGIC:
        raise WrongMagicError(f"bad checkpoint magic {buf[:4]!r}")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {CKPT_VERSION}")
    if len(buf) < 12 + hlen:
        raise TruncatedError("checkpoint JSON header truncated")
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    arrays = []
    for _ in range(len(header["params"]) + 2 * len(header["moments"])):
        arr, used = decode_tensor(buf[off:])
        arrays.append(arr)
        off += used
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after checkpoint tensors")
    names, moments = header["params"], header["moments"]
    params = {n: Tensor(a, requires_grad=True, name=n) for n, a in zip(names, arrays)}
    k = len(names)
    opt = dict(header["optimizer"])
    state = OptimizerState(**opt)
    state.m = dict(zip(moments, arrays[k:k + len(moments)]))
    state.v = dict(zip(moments, arrays[k + len(moments):]))
    model = TrainedModel(ModelSpec.from_json(header["model_spec"]), params, dict(header.get("meta", {})))
    return model, state, int(header["epoch"])


def save_checkpoint(path, model: TrainedModel, state: OptimizerState, epoch: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, state, epoch))
    return path


def load_checkpoint(path) -> tuple:
    return decode_checkpoint(Path(path).read_bytes())
