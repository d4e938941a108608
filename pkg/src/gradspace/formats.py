"""Binary containers.

``GRDN`` (checkpoints)::

    b"GRDN" | version u32 LE | header_len u32 LE | JSON header | n float64 LE

``GRDF`` (gradient features)::

    b"GRDF" | version u32 LE | header_len u32 LE | JSON header |
    records: sample_id u32, hyp_label u16, nnz u32, indices u32[nnz], values f64[nnz]

JSON headers are written canonically (sorted keys, compact separators) so a
decode/encode cycle reproduces the input bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .errors import ParseError, ProvenanceError
from .grad_features import FeaturePipeline, GradFeature
from .gradnet import GradNetModel, GradNetSpec
from .nn_core import NetworkSpec, ParamLayout
from .rbm import RbmModel

CHECKPOINT_MAGIC = b"GRDN"
FEATURES_MAGIC = b"GRDF"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_RECORD = struct.Struct("<IHI")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write(path, data: bytes) -> str:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return sha256_bytes(data)


def _read_prefix(buf: bytes, magic: bytes) -> tuple[dict, int]:
    if len(buf) < _PREFIX.size:
        raise ParseError(f"truncated {magic.decode()} prefix", offset=len(buf) if buf else 0)
    got, version, hlen = _PREFIX.unpack_from(buf, 0)
    if got != magic:
        raise ParseError(f"bad magic {got!r}, expected {magic!r}", offset=0)
    if version != VERSION:
        raise ParseError(f"unsupported format version {version}", offset=4)
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise ParseError("truncated JSON header", offset=len(buf))
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed JSON header: {exc}", offset=start) from exc
    return header, start + hlen


# ---------------------------------------------------------------- GRDN

def encode_checkpoint(header: dict, payload: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(payload, dtype="<f8")
    header = dict(header, n=int(payload.shape[0]))
    hb = canonical_json(header)
    return _PREFIX.pack(CHECKPOINT_MAGIC, VERSION, len(hb)) + hb + payload.tobytes()


def decode_checkpoint(buf: bytes) -> tuple[dict, np.ndarray]:
    header, off = _read_prefix(buf, CHECKPOINT_MAGIC)
    n = header.get("n")
    if not isinstance(n, int) or n < 0:
        raise ParseError("header lacks a valid payload length 'n'", offset=_PREFIX.size)
    if len(buf) - off != 8 * n:
        raise ParseError(f"payload has {len(buf) - off} bytes, header promises {8 * n}", offset=off)
    return header, np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)


def read_checkpoint(path) -> tuple[dict, np.ndarray, str]:
    with open(path, "rb") as f:
        buf = f.read()
    header, payload = decode_checkpoint(buf)
    return header, payload, sha256_bytes(buf)


def save_network(path, spec: NetworkSpec, params: np.ndarray, **extra) -> str:
    header = {"kind": "network", "spec": spec.to_dict(), "layout": spec.layout().to_dict(), **extra}
    return _write(path, encode_checkpoint(header, params))


def load_network(path) -> tuple[NetworkSpec, np.ndarray, dict, str]:
    header, payload, digest = read_checkpoint(path)
    if header.get("kind") != "network":
        raise ParseError(f"{path} holds a {header.get('kind')!r} checkpoint, not a network", offset=_PREFIX.size)
    spec = NetworkSpec.from_dict(header["spec"])
    if ParamLayout.from_dict(header["layout"]) != spec.layout():
        raise ParseError("stored layout disagrees with the stored network spec", offset=_PREFIX.size)
    return spec, payload, header, digest


def save_rbm(path, model: RbmModel, **extra) -> str:
    header = {"kind": "rbm", "num_visible": model.num_visible, "num_hidden": model.num_hidden,
              "layout": ["visible_bias", "hidden_bias", "coupling(row-major)"], **extra}
    return _write(path, encode_checkpoint(header, model.flat()))


def load_rbm(path) -> tuple[RbmModel, dict, str]:
    header, payload, digest = read_checkpoint(path)
    if header.get("kind") != "rbm":
        raise ParseError(f"{path} is not an RBM checkpoint", offset=_PREFIX.size)
    return RbmModel.from_flat(payload, header["num_visible"], header["num_hidden"]), header, digest


def save_gradnet(path, model: GradNetModel, pipeline: FeaturePipeline, base_hash: str, **extra) -> str:
    segments = [("params", model.params)]
    if model.running_mean is not None:
        segments += [("running_mean", model.running_mean), ("running_var", model.running_var)]
    segments += sorted(pipeline.arrays().items())
    header = {
        "kind": "gradnet",
        "spec": model.spec.to_dict(),
        "partition": [list(p) for p in model.partition],
        "dense_len": model.dense_len,
        "pipeline": pipeline.describe(),
        "base_checkpoint_hash": base_hash,
        "segments": [[name, int(arr.shape[0])] for name, arr in segments],
        **extra,
    }
    payload = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for _, a in segments])
    return _write(path, encode_checkpoint(header, payload))


def load_gradnet(path) -> tuple[GradNetModel, FeaturePipeline, dict, str]:
    header, payload, digest = read_checkpoint(path)
    if header.get("kind") != "gradnet":
        raise ParseError(f"{path} is not a GradNet checkpoint", offset=_PREFIX.size)
    arrays, off = {}, 0
    for name, length in header["segments"]:
        arrays[name] = payload[off:off + length]
        off += length
    model = GradNetModel(GradNetSpec.from_dict(header["spec"]), [tuple(p) for p in header["partition"]],
                         header["dense_len"], arrays.pop("params").copy(),
                         arrays.pop("running_mean", None), arrays.pop("running_var", None))
    pipeline = FeaturePipeline.restore(header["pipeline"], arrays, header["dense_len"])
    return model, pipeline, header, digest


def require_base(header: dict, base_hash: str, what: str = "artifact") -> None:
    want = header.get("base_checkpoint_hash")
    if want != base_hash:
        raise ProvenanceError(f"{what} was built from base checkpoint {want}, not {base_hash}; refusing to run")


# ---------------------------------------------------------------- GRDF

def encode_features(header: dict, features: list[GradFeature]) -> bytes:
    header = dict(header, count=len(features))
    if features:
        header.setdefault("dense_len", features[0].dense_len)
    hb = canonical_json(header)
    parts = [_PREFIX.pack(FEATURES_MAGIC, VERSION, len(hb)), hb]
    for f in features:
        if f.dense_len != header["dense_len"]:
            raise ValueError("all features must share dense_len")
        parts.append(_RECORD.pack(f.sample_id, f.hyp_label, f.nnz))
        parts.append(np.ascontiguousarray(f.indices, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(f.values, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_features(buf: bytes) -> tuple[dict, list[GradFeature]]:
    header, off = _read_prefix(buf, FEATURES_MAGIC)
    dense_len = header.get("dense_len")
    tag = header.get("norm_pipeline") or []
    out = []
    while off < len(buf):
        if len(buf) - off < _RECORD.size:
            raise ParseError("truncated record header", offset=off)
        sid, label, nnz = _RECORD.unpack_from(buf, off)
        body = off + _RECORD.size
        end = body + 12 * nnz
        if end > len(buf):
            raise ParseError(f"record for sample {sid} is truncated", offset=off)
        idx = np.frombuffer(buf, dtype="<u4", count=nnz, offset=body).astype(np.int64)
        val = np.frombuffer(buf, dtype="<f8", count=nnz, offset=body + 4 * nnz).astype(np.float64)
        try:
            out.append(GradFeature(sid, label, idx, val, dense_len, list(tag)))
        except ValueError as exc:
            raise ParseError(f"invalid record: {exc}", offset=off) from exc
        off = end
    if "count" in header and header["count"] != len(out):
        raise ParseError(f"header promises {header['count']} records, found {len(out)}", offset=len(buf))
    return header, out


def write_features(path, header: dict, features: list[GradFeature]) -> str:
    return _write(path, encode_features(header, features))


def read_features(path) -> tuple[dict, list[GradFeature]]:
    with open(path, "rb") as f:
        return decode_features(f.read())
