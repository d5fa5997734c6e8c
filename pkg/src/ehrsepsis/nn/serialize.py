"""Versioned binary model files: magic, JSON header, raw little-endian float64 arrays."""
from __future__ import annotations

import json
import struct

import numpy as np

from .models import CnnLstm, CnnLstmSpec, Mlp, MlpSpec

NN_SCHEMA_VERSION = 1
_MAGIC = b"EHRNN01\n"


class ModelFormatError(ValueError):
    pass


def _spec_from_json(kind: str, doc: dict):
    if kind == "mlp":
        return MlpSpec(doc["n_in"], tuple(doc["hidden"]), doc["dropout"])
    if kind == "cnnlstm":
        return CnnLstmSpec(doc["n_in"], doc["embed_dim"], tuple(tuple(d) for d in doc["conv_depths"]),
                           doc["kernel"], doc["lstm_units"], doc["init_state_std"], doc["step_loss"])
    raise ModelFormatError(f"unknown network kind {kind!r}")


def dumps_model(model, meta: dict | None = None) -> bytes:
    names = sorted(model.params)
    header = {"schema_version": NN_SCHEMA_VERSION, "kind": model.kind, "spec": model.spec.to_json(),
              "meta": meta or {},
              "arrays": [{"name": k, "shape": list(model.params[k].shape)} for k in names]}
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [_MAGIC, struct.pack("<I", len(hb)), hb]
    parts += [np.ascontiguousarray(model.params[k], dtype="<f8").tobytes() for k in names]
    return b"".join(parts)


def loads_model(data: bytes):
    """Returns ``(model, header)``."""
    if not data.startswith(_MAGIC):
        raise ModelFormatError("not a network model file")
    off = len(_MAGIC)
    (hl,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hl])
    off += hl
    if header.get("schema_version") != NN_SCHEMA_VERSION:
        raise ModelFormatError(f"model schema_version {header.get('schema_version')!r} != {NN_SCHEMA_VERSION}")
    params = {}
    for a in header["arrays"]:
        n = int(np.prod(a["shape"], dtype=np.int64))
        params[a["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(a["shape"]).copy()
        off += 8 * n
    if off != len(data):
        raise ModelFormatError("trailing bytes in model file")
    spec = _spec_from_json(header["kind"], header["spec"])
    cls = Mlp if header["kind"] == "mlp" else CnnLstm
    return cls(spec, params=params), header


def save_model(path, model, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model, meta))


def load_model(path):
    with open(path, "rb") as fh:
        return loads_model(fh.read())
