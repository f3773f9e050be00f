"""Binary checkpoint container.

Layout (little-endian): ``b"DERC"``, version u32, section count u32, then
per section: name length u32, UTF-8 name, payload length u64, payload.
The ``meta`` section is canonical JSON; every other section is one array
stored as a JSON header line (dtype, shape) followed by its raw bytes.
Identical state always produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dermodel import DERModel
from .diffcore import BNStats, ParamStore
from .errors import FormatError
from .extractor import BlockSpec, MaskedExtractor, PrunedExtractor, build_layers
from .memory import ExemplarMemory

MAGIC = b"DERC"
VERSION = 1


def _encode_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a)
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    a = a.astype(dt, copy=False)
    head = json.dumps({"dtype": a.dtype.str, "shape": list(a.shape)}, sort_keys=True).encode()
    return head + b"\n" + a.tobytes()


def _decode_array(buf: bytes) -> np.ndarray:
    nl = buf.index(b"\n")
    head = json.loads(buf[:nl])
    return np.frombuffer(buf[nl + 1:], dtype=np.dtype(head["dtype"])).reshape(head["shape"]).copy()


def _spec_dict(s: BlockSpec) -> dict:
    return {"kind": s.kind, "out_channels": s.out_channels, "kernel_size": s.kernel_size,
            "has_bn": s.has_bn, "has_relu": s.has_relu, "masked": s.masked, "stride": s.stride}


def _store_sections(prefix: str, store: ParamStore, out: dict) -> dict:
    names = sorted(store.params)
    for n in names:
        out[f"{prefix}/param/{n}"] = store[n].data
    for n in sorted(store.bn_stats):
        out[f"{prefix}/bn_mean/{n}"] = store.bn_stats[n].mean
        out[f"{prefix}/bn_var/{n}"] = store.bn_stats[n].var
    return {"params": names, "plain": sorted(store.plain), "frozen": sorted(store.frozen),
            "bn": {n: store.bn_stats[n].momentum for n in sorted(store.bn_stats)}}


def _restore_store(prefix: str, info: dict, arrays: dict) -> ParamStore:
    st = ParamStore()
    for n in info["params"]:
        st.add(n, arrays[f"{prefix}/param/{n}"], plain=n in info["plain"])
    for n, mom in info["bn"].items():
        st.bn_stats[n] = BNStats(arrays[f"{prefix}/bn_mean/{n}"], arrays[f"{prefix}/bn_var/{n}"], mom)
    frozen = [n for n in info["frozen"] if n in st.params]
    st.freeze(frozen)
    st.frozen.update(info["frozen"])
    return st


def _extractor_meta(prefix, ext: MaskedExtractor, arrays):
    return {"specs": [_spec_dict(s) for s in ext.specs], "input_shape": list(ext.input_shape),
            "s_max": ext.s_max, "store": _store_sections(prefix, ext.store, arrays)}


def _restore_extractor(prefix, info, arrays) -> MaskedExtractor:
    ext = MaskedExtractor.__new__(MaskedExtractor)
    ext.specs = tuple(BlockSpec(**s) for s in info["specs"])
    ext.input_shape = tuple(info["input_shape"])
    ext.s_max = info["s_max"]
    ext.layers = build_layers(ext.specs, ext.input_shape)
    ext.store = _restore_store(prefix, info["store"], arrays)
    return ext


def save_checkpoint(path, model: DERModel, memory: ExemplarMemory | None = None,
                    records: dict | None = None, config_hash: str = "") -> None:
    arrays: dict[str, np.ndarray] = {}
    meta = {
        "step": model.step,
        "input_shape": list(model.input_shape),
        "s_max": model.s_max,
        "expandable": model.expandable,
        "classes": model.classes,
        "new_classes": model.new_classes,
        "config_hash": config_hash,
        "records": records or {},
        "frozen": [],
    }
    for i, f in enumerate(model.frozen):
        for k, kept in enumerate(f.kept):
            arrays[f"frozen{i}/kept/{k}"] = kept
        meta["frozen"].append({
            "specs": [_spec_dict(s) for s in f.specs],
            "input_shape": list(f.input_shape),
            "n_blocks": len(f.kept),
            "store": _store_sections(f"frozen{i}", f.store, arrays),
        })
    meta["current"] = _extractor_meta("current", model.current, arrays) if model.current else None
    meta["warm_source"] = (_extractor_meta("warm", model.warm_source, arrays)
                           if model.warm_source else None)
    meta["classifier"] = (_store_sections("classifier", model.classifier, arrays)
                          if model.classifier else None)
    meta["aux"] = _store_sections("aux", model.aux, arrays) if model.aux else None
    if memory is not None:
        meta["memory"] = {"mode": memory.mode, "size": memory.size,
                          "exemplars": [[c, list(map(int, v))] for c, v in sorted(memory.exemplars.items())]}
    else:
        meta["memory"] = None

    sections = [("meta", json.dumps(meta, sort_keys=True).encode())]
    sections += [(k, _encode_array(arrays[k])) for k in sorted(arrays)]
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(sections))
    for name, payload in sections:
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<Q", len(payload)) + payload
    Path(path).write_bytes(bytes(out))


def _read_sections(buf: bytes) -> dict[str, bytes]:
    if buf[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    if len(buf) < 12:
        raise FormatError("truncated header", len(buf))
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    off = 12
    out = {}
    for _ in range(count):
        if off + 4 > len(buf):
            raise FormatError("truncated section name", off)
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode()
        off += nlen
        if off + 8 > len(buf):
            raise FormatError("truncated section length", off)
        (plen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if off + plen > len(buf):
            raise FormatError(f"truncated section '{name}'", off)
        out[name] = buf[off:off + plen]
        off += plen
    return out


def load_checkpoint(path):
    """Returns ``(model, memory, meta)``."""
    sec = _read_sections(Path(path).read_bytes())
    meta = json.loads(sec.pop("meta"))
    arrays = {k: _decode_array(v) for k, v in sec.items()}

    model = DERModel(tuple(meta["input_shape"]), meta["s_max"], meta["expandable"])
    model.step = meta["step"]
    model.classes = list(meta["classes"])
    model.new_classes = list(meta["new_classes"])
    for i, info in enumerate(meta["frozen"]):
        store = _restore_store(f"frozen{i}", info["store"], arrays)
        kept = [arrays[f"frozen{i}/kept/{k}"] for k in range(info["n_blocks"])]
        f = PrunedExtractor.__new__(PrunedExtractor)
        f.kept = kept
        f.specs = tuple(BlockSpec(**s) for s in info["specs"])
        f.input_shape = tuple(info["input_shape"])
        f.layers = build_layers(f.specs, f.input_shape, masked=False)
        f.store = store
        model.frozen.append(f)
    if meta["current"]:
        model.current = _restore_extractor("current", meta["current"], arrays)
    if meta["warm_source"]:
        model.warm_source = _restore_extractor("warm", meta["warm_source"], arrays)
    if meta["classifier"]:
        model.classifier = _restore_store("classifier", meta["classifier"], arrays)
    if meta["aux"]:
        model.aux = _restore_store("aux", meta["aux"], arrays)
    memory = None
    if meta["memory"]:
        m = meta["memory"]
        memory = ExemplarMemory(m["mode"], m["size"], {int(c): list(v) for c, v in m["exemplars"]})
    return model, memory, meta
