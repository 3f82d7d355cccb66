"""Binary model files: networks, training checkpoints, and folded exports.

Layout::

    b"CEIL"                 4-byte magic
    version                 uint32, little-endian
    header_len              uint64, little-endian
    header                  UTF-8 JSON, header_len bytes
    payload                 float32 little-endian tensors, back to back

The header carries the architecture text, a manifest of every tensor
(name, shape, byte offset into the payload, byte size, trainable flag), the
optional ceiling plan, free-form metadata, and a SHA-256 of the payload.
"""
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .arch import format_arch, layer_param_shapes, parse_arch
from .errors import CorruptionError, FormatError
from .network import NetworkGraph, ParamEntry
from .projection import fold_network

MAGIC = b"CEIL"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_LE_F32 = np.dtype("<f4")


def _tensor_section(items, payload, offset):
    manifest = []
    for name, arr, extra in items:
        data = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data), **extra})
        payload.append(data)
        offset += len(data)
    return manifest, offset


def _encode(net, plan=None, metadata=None, optimizer=None, checkpoint=None):
    items = []
    for lname in sorted(net.params):
        entry = net.params[lname]
        for tname in sorted(entry.tensors):
            items.append((f"{lname}.{tname}", entry.tensors[tname], {"trainable": bool(entry.trainable)}))
    payload = []
    manifest, offset = _tensor_section(items, payload, 0)
    header = {
        "format": "ceilcomp-model",
        "byte_order": "little",
        "dtype": "float32",
        "arch": format_arch(net),
        "tensors": manifest,
        "plan": plan,
        "metadata": metadata or {},
    }
    if optimizer is not None:
        opt_items = [(k, optimizer[k], {}) for k in sorted(optimizer)]
        header["optimizer"], offset = _tensor_section(opt_items, payload, offset)
    if checkpoint is not None:
        header["checkpoint"] = checkpoint
    body = b"".join(payload)
    header["payload_sha256"] = hashlib.sha256(body).hexdigest()
    hbytes = json.dumps(header, sort_keys=True, allow_nan=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + body


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _decode(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: too short to be a model file")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}, this build reads {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CorruptionError(f"{path}: header truncated")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header ({exc})") from None
    body = raw[start:]
    if hashlib.sha256(body).hexdigest() != header.get("payload_sha256"):
        raise CorruptionError(f"{path}: payload checksum mismatch (file truncated or modified)")
    return header, body


def _read_tensors(manifest, body, path):
    out = {}
    for t in manifest:
        end = t["offset"] + t["nbytes"]
        count = int(np.prod(t["shape"], dtype=np.int64))
        if end > len(body) or t["nbytes"] != 4 * count:
            raise CorruptionError(f"{path}: tensor {t['name']} lies outside the payload")
        arr = np.frombuffer(body, dtype=_LE_F32, count=count, offset=t["offset"])
        out[t["name"]] = (arr.astype(np.float32).reshape(t["shape"]), t.get("trainable", True))
    return out


def _build_net(header, body, path):
    arch = parse_arch(header["arch"])
    net = NetworkGraph(arch.name, arch.input_shape, arch.layers, arch.edges, arch.declared_params)
    shapes = net.shapes()
    expected = {}
    for layer in net.layers:
        for tname, shp in layer_param_shapes(layer, shapes[net.edges[layer.name][0]]).items():
            expected[f"{layer.name}.{tname}"] = tuple(shp)
    tensors = _read_tensors(header["tensors"], body, path)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise FormatError(f"{path}: tensor manifest does not match the architecture (missing {missing}, extra {extra})")
    for name, (arr, trainable) in tensors.items():
        if arr.shape != expected[name]:
            raise FormatError(f"{path}: tensor {name} has shape {arr.shape}, architecture expects {expected[name]}")
        lname, tname = name.rsplit(".", 1)
        entry = net.params.setdefault(lname, ParamEntry({}, trainable))
        entry.tensors[tname] = arr
        entry.trainable = trainable
    net.touch()
    return net


# ---------------------------------------------------------------- public API


def save_model(net, path, plan=None, metadata=None):
    _atomic_write(path, _encode(net, plan=_plan_dict(plan), metadata=metadata))


def load_model(path):
    """Return ``(net, plan_dict_or_None, metadata)``."""
    header, body = _decode(path)
    return _build_net(header, body, path), header.get("plan"), header.get("metadata", {})


def save_checkpoint(ckpt, path, plan=None, metadata=None):
    info = {"epoch": ckpt.epoch, "val_acc": ckpt.val_acc, "stage": ckpt.stage, "lr": ckpt.lr, "meta": ckpt.meta}
    data = _encode(ckpt.net, plan=_plan_dict(plan), metadata=metadata, optimizer=ckpt.optimizer, checkpoint=info)
    _atomic_write(path, data)


def load_checkpoint(path):
    from .trainer import Checkpoint

    header, body = _decode(path)
    net = _build_net(header, body, path)
    info = header.get("checkpoint") or {}
    opt = {k: v for k, (v, _) in _read_tensors(header.get("optimizer", []), body, path).items()}
    return Checkpoint(net, opt, info.get("epoch", 0), info.get("val_acc", 0.0), info.get("stage", 0),
                      info.get("lr", 0.0), info.get("meta", {}))


def read_header(path):
    return _decode(path)[0]


def export_folded(net, path, explicit_lift=False, plan=None, metadata=None):
    """Fold every projection, then save; returns the folded network."""
    folded = fold_network(net, explicit_lift=explicit_lift)
    meta = dict(metadata or {})
    meta["folded"] = True
    save_model(folded, path, plan=plan, metadata=meta)
    return folded


def _plan_dict(plan):
    if plan is None or isinstance(plan, dict):
        return plan
    return plan.to_dict()


__all__ = ["MAGIC", "VERSION", "export_folded", "load_checkpoint", "load_model",
           "read_header", "save_checkpoint", "save_model"]
