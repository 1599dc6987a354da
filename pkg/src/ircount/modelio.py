"""Single-file model container for float and integer models.

Layout: magic ``IRCM``, a version number, a JSON header (architecture,
seed, quantization parameters, user metadata, tensor manifest) and the
raw little-endian tensor bytes in manifest order. Integer models round-
trip bit exactly; float models byte exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .models import Model, build_model, parse_arch
from .quant import QuantModel, QuantOp, QuantParams, prepare_qat

MAGIC = b"IRCM"
VERSION = 1

_HEAD_FMT = "<HI"  # version, header byte length


class ModelFileError(ValueError):
    pass


def _pack_tensors(named):
    manifest, blobs = [], []
    for name, arr in named:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape)})
        blobs.append(le.tobytes())
    return manifest, blobs


def _write(path, header: dict, named_tensors) -> None:
    manifest, blobs = _pack_tensors(named_tensors)
    header = dict(header, tensors=manifest)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(_HEAD_FMT, VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def _read(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ModelFileError(f"{path}: not a model file (bad magic)")
        version, hlen = struct.unpack(_HEAD_FMT, fh.read(struct.calcsize(_HEAD_FMT)))
        if version != VERSION:
            raise ModelFileError(f"{path}: unsupported container version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            dt = np.dtype(entry["dtype"])
            n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
            buf = fh.read(n)
            if len(buf) != n:
                raise ModelFileError(f"{path}: truncated tensor {entry['name']}")
            arr = np.frombuffer(buf, dtype=dt).reshape(entry["shape"])
            tensors[entry["name"]] = arr.astype(dt.newbyteorder("="))
    return header, tensors


def save_model(path, model, metadata: dict | None = None) -> None:
    """Serialize a float/QAT ``Model`` or an int8 ``QuantModel``."""
    if isinstance(model, QuantModel):
        _write_quant(path, model, metadata)
        return
    header = {
        "kind": "float",
        "arch": str(model.spec),
        "seed": model.seed,
        "qat": model.input_fq is not None,
        "meta": metadata or {},
    }
    _write(path, header, sorted(model.state_dict().items()))


def _qp_json(qp: QuantParams):
    return {"scale": qp.scale, "zero_point": qp.zero_point}


def _write_quant(path, qmodel: QuantModel, metadata) -> None:
    groups, tensors = {}, []
    for gname in ("extractor", "temporal", "head"):
        ops = []
        for i, op in enumerate(getattr(qmodel, gname)):
            meta = {
                "kind": op.kind,
                "mult": op.mult,
                "rshift": op.rshift,
                "in_zp": op.in_zp,
                "out_qmin": op.out_qmin,
                "out_qp": _qp_json(op.out_qp) if op.out_qp else None,
                "weight_qp": _qp_json(op.weight_qp) if op.weight_qp else None,
            }
            if op.weight is not None:
                tensors.append((f"{gname}.{i}.weight", op.weight))
                tensors.append((f"{gname}.{i}.bias", op.bias))
            ops.append(meta)
        groups[gname] = ops
    header = {
        "kind": "int8",
        "arch": str(qmodel.spec),
        "seed": qmodel.seed,
        "input_qp": _qp_json(qmodel.input_qp),
        "groups": groups,
        "meta": metadata or {},
    }
    _write(path, header, tensors)


def _qp_from_json(d):
    return QuantParams(scale=d["scale"], zero_point=d["zero_point"]) if d else None


def load_model(path):
    """Load a container; returns (model, metadata dict).

    ``model`` is a ``Model`` for float/QAT files and a ``QuantModel``
    for int8 files.
    """
    header, tensors = _read(path)
    spec = parse_arch(header["arch"])
    if header["kind"] == "float":
        model = build_model(spec, seed=header["seed"])
        if header["qat"]:
            model = prepare_qat(model)
        model.load_state_dict({k: np.array(v) for k, v in tensors.items()})
        return model, header["meta"]
    if header["kind"] != "int8":
        raise ModelFileError(f"{path}: unknown model kind {header['kind']!r}")
    groups = {}
    for gname, ops_meta in header["groups"].items():
        ops = []
        for i, meta in enumerate(ops_meta):
            ops.append(
                QuantOp(
                    kind=meta["kind"],
                    weight=tensors.get(f"{gname}.{i}.weight"),
                    bias=tensors.get(f"{gname}.{i}.bias"),
                    mult=meta["mult"],
                    rshift=meta["rshift"],
                    in_zp=meta["in_zp"],
                    out_qp=_qp_from_json(meta["out_qp"]),
                    out_qmin=meta["out_qmin"],
                    weight_qp=_qp_from_json(meta["weight_qp"]),
                )
            )
        groups[gname] = ops
    qmodel = QuantModel(
        spec=spec,
        input_qp=_qp_from_json(header["input_qp"]),
        extractor=groups.get("extractor", []),
        temporal=groups.get("temporal", []),
        head=groups.get("head", []),
        seed=header["seed"],
    )
    return qmodel, header["meta"]
