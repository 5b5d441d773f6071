"""DSCK checkpoint files.

Layout (little-endian): ``b"DSCK"``, u32 version, u32 blob length, UTF-8
config blob (``key = value`` text with sections), u32 record count, then per
record a u32 name length, the UTF-8 name and one DSTN tensor record.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ..tensor import decode_tensor, encode_tensor
from .config import RunConfig, parse_config, serialize

VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    epoch: int
    step: int
    tensors: "OrderedDict[str, np.ndarray]"
    audit: dict

    def params(self, prefix: str = "model.") -> dict:
        return OrderedDict((k[len(prefix):], v) for k, v in self.tensors.items() if k.startswith(prefix))


def schedule_audit(model) -> dict:
    """Shortcut factors actually used by each stack of ``model``, keyed by stack name."""
    from ..blocks import DecayedStack
    out = {}

    def visit(mod, prefix):
        for name, child in mod._children.items():
            path = prefix + name
            if isinstance(child, DecayedStack):
                out[path] = [s for s, _ in child.shortcut_coefficients()]
            visit(child, path + ".")
    visit(model, "")
    return out


def _audit_text(audit: dict) -> str:
    lines = ["[audit]"]
    for k, vals in audit.items():
        lines.append(f"{k} = " + ",".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def _parse_audit(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = [float(x) for x in v.split(",")] if v else []
    return out


def save_checkpoint(path, cfg: RunConfig, epoch: int, step: int, tensors: dict, audit: dict) -> None:
    blob = (serialize(cfg) + f"[state]\nepoch = {epoch}\nstep = {step}\n\n" + _audit_text(audit)).encode("utf-8")
    parts = [b"DSCK", struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(encode_tensor(np.asarray(arr)))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != b"DSCK":
        raise ValueError(f"{path}: not a DSCK checkpoint")
    version, blen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    text = buf[off:off + blen].decode("utf-8")
    off += blen
    cfg_text, _, rest = text.partition("[state]")
    state_text, _, audit_text = rest.partition("[audit]")
    state = {}
    for line in state_text.splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            state[k] = int(v)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        tensors[name], off = decode_tensor(buf, off)
    return Checkpoint(parse_config(cfg_text, str(path)), state.get("epoch", 0), state.get("step", 0),
                      tensors, _parse_audit(audit_text))
