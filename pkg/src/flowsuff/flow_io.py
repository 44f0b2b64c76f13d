"""FLSF checkpoint container for flow models.

Layout (version 1): magic ``FLSF``, u16 format version, u32 header length,
UTF-8 JSON header (architecture, seed, standardizer stats, ActNorm init
flags, conditioner shape), then length-prefixed tensor records: u32 name
length, UTF-8 name, u32 ndim, u64 dims, little-endian 32-bit floats.
Permutations are stored as float32 records (exact for any practical d).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError
from .flow import ActNorm, Coupling, FlowConfig, FlowModel, LowRankConditioner, Permutation, build_flow
from .numcore import RngStream

_MAGIC = b"FLSF"
_VERSION = 1


def _write_record(f, name: str, arr: np.ndarray) -> None:
    nbytes = name.encode("utf-8")
    f.write(struct.pack("<I", len(nbytes)))
    f.write(nbytes)
    f.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<Q", dim))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_records(buf: bytes, offset: int) -> dict[str, np.ndarray]:
    out = {}
    end = len(buf)
    while offset < end:
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset : offset + nlen].decode("utf-8")
        offset += nlen
        (ndim,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<Q", buf, offset)
            offset += 8
            shape.append(dim)
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > end:
            raise DataError(f"checkpoint truncated inside tensor {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += nbytes
    return out


def save_flow(model: FlowModel, path) -> None:
    cfg = model.config
    header = {
        "d": model.d,
        "seed": model.seed,
        "n_blocks": cfg.n_blocks,
        "n_bins": cfg.n_bins,
        "tail_bound": cfg.tail_bound,
        "hidden_width": cfg.hidden_width,
        "n_hidden": cfg.n_hidden,
        "min_bin_frac": cfg.min_bin_frac,
        "min_derivative": cfg.min_derivative,
        "cond_rank": cfg.cond_rank,
        "standardizer": {
            "mean": model.standardizer.mean.astype(float).tolist(),
            "std": model.standardizer.std.astype(float).tolist(),
            "fitted": model.standardizer.fitted,
        },
        "actnorm_initialized": [
            l.initialized for l in model.layers if isinstance(l, ActNorm)
        ],
        "conditional": model.is_conditional,
        "d_u": model.conditioner.d_u if model.is_conditional else None,
        "rank": model.conditioner.rank if model.is_conditional else None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for p in model.params():
            _write_record(f, p.name, p.values)
        for layer in model.layers:
            if isinstance(layer, Permutation):
                _write_record(f, layer.name, layer.perm.astype(np.float32))


def load_flow(path) -> FlowModel:
    from pathlib import Path

    buf = Path(path).read_bytes()
    if len(buf) < 10 or buf[:4] != _MAGIC:
        raise DataError(f"{path}: not a flow checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 6)
    header = json.loads(buf[10 : 10 + hlen].decode("utf-8"))
    tensors = _read_records(buf, 10 + hlen)

    cfg = FlowConfig(
        n_blocks=header["n_blocks"],
        n_bins=header["n_bins"],
        tail_bound=header["tail_bound"],
        hidden_width=header["hidden_width"],
        n_hidden=header["n_hidden"],
        min_bin_frac=header["min_bin_frac"],
        min_derivative=header["min_derivative"],
        cond_rank=header["cond_rank"],
    )
    model = build_flow(header["d"], cfg, rng=RngStream(header["seed"], ("build",)),
                       dtype=np.float32)
    std = header["standardizer"]
    model.standardizer.mean = np.asarray(std["mean"], dtype=np.float32)
    model.standardizer.std = np.asarray(std["std"], dtype=np.float32)
    model.standardizer.fitted = std["fitted"]
    if header["conditional"]:
        model.conditioner = LowRankConditioner(
            header["d_u"], header["rank"], RngStream(header["seed"], ("clone", "a_proj"))
        )
        for coupling in model.couplings:
            if coupling.net is not None:
                from .numcore import ParamTensor

                coupling.cond_proj = ParamTensor(
                    f"{coupling.name}.cond_proj",
                    np.zeros((coupling.hidden_width, header["rank"]), dtype=np.float32),
                )
    init_flags = iter(header["actnorm_initialized"])
    for layer in model.layers:
        if isinstance(layer, ActNorm):
            layer.initialized = next(init_flags)
        if isinstance(layer, Permutation):
            if layer.name not in tensors:
                raise DataError(f"{path}: missing permutation record {layer.name!r}")
            layer.perm = np.rint(tensors[layer.name]).astype(np.int64)
            layer.inv = np.argsort(layer.perm)
    for p in model.params():
        if p.name not in tensors:
            raise DataError(f"{path}: missing tensor record {p.name!r}")
        if tuple(tensors[p.name].shape) != p.values.shape:
            raise DataError(
                f"{path}: tensor {p.name!r} has shape {tensors[p.name].shape}, "
                f"expected {p.values.shape}"
            )
        p.values = tensors[p.name].astype(np.float32).copy()
        p.grad = np.zeros_like(p.values)
    return model
