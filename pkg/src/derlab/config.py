"""Experiment configuration: TOML (or JSON) documents with the sections
``dataset``, ``protocol``, ``architecture``, ``train``, ``memory``,
``eval`` and ``output``. Unknown keys are rejected."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .diffcore import SgdConfig
from .errors import ConfigError, DerlabError
from .extractor import BlockSpec
from .trainer import TrainConfig


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    classes: int = 10
    per_class_train: int = 100
    per_class_test: int = 50
    dim: int = 16
    spread: float = 0.35
    seed: int = 0
    shape: list | None = None
    train_path: str | None = None
    test_path: str | None = None


@dataclass
class ProtocolConfig:
    base: int = 0
    steps: int = 5
    order_seed: int = 0


@dataclass
class MemoryConfig:
    mode: str = "fixed_total"
    size: int = 20


@dataclass
class EvalConfig:
    probe: bool = True
    fwt: bool = True


@dataclass
class OutputConfig:
    dir: str | None = None
    checkpoints: bool = True


def default_blocks() -> list[BlockSpec]:
    return [BlockSpec("affine", 32), BlockSpec("affine", 32), BlockSpec("affine", 16)]


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    blocks: list = field(default_factory=default_blocks)
    train: TrainConfig = field(default_factory=TrainConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        d = {
            "dataset": _drop_none(asdict(self.dataset)),
            "protocol": asdict(self.protocol),
            "architecture": {"blocks": [_block_to_dict(b) for b in self.blocks]},
            "train": _train_to_dict(self.train),
            "memory": asdict(self.memory),
            "eval": asdict(self.eval),
            "output": _drop_none(asdict(self.output)),
        }
        return d

    def hash(self) -> str:
        """Digest of everything except seeds and output location, so runs
        that differ only by seed share a hash."""
        d = self.to_dict()
        d["dataset"].pop("seed", None)
        d["protocol"].pop("order_seed", None)
        d["train"].pop("seed", None)
        d.pop("output", None)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


REQUIRED_SECTIONS = ("dataset", "protocol", "architecture", "train", "memory")
_BLOCK_KEYS = {"kind", "channels", "kernel", "bn", "relu", "masked", "stride"}
_SGD_KEYS = {f.name for f in fields(SgdConfig)}


def _drop_none(d):
    return {k: v for k, v in d.items() if v is not None}


def _block_to_dict(b: BlockSpec) -> dict:
    return {"kind": b.kind, "channels": b.out_channels, "kernel": b.kernel_size,
            "bn": b.has_bn, "relu": b.has_relu, "masked": b.masked, "stride": b.stride}


def _sgd_to_dict(s: SgdConfig) -> dict:
    d = asdict(s)
    d["decay_epochs"] = list(s.decay_epochs)
    return d


def _train_to_dict(t: TrainConfig) -> dict:
    d = asdict(t)
    d["stage1"] = _sgd_to_dict(t.stage1)
    d["stage2"] = _sgd_to_dict(t.stage2)
    return d


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    leaf = key.split(".")[-1].split("[")[0]
    for n, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*\"?{re.escape(leaf)}\"?\s*[=:]", line):
            return n
    return None


def _check_keys(section: dict, allowed, prefix: str, text):
    for k in section:
        if k not in allowed:
            key = f"{prefix}.{k}"
            raise ConfigError("unknown key", key=key, line=_line_of(text, key))


def _build(cls, section: dict, prefix: str, text, exclude=()):
    allowed = {f.name for f in fields(cls)} - set(exclude)
    _check_keys(section, allowed, prefix, text)
    try:
        return cls(**section)
    except (TypeError, DerlabError) as exc:
        raise ConfigError(str(exc), key=prefix) from None


def _typed(value, kind, key, text):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key=key, line=_line_of(text, key))
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=key, line=_line_of(text, key))
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key=key, line=_line_of(text, key))
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key=key, line=_line_of(text, key))
        return value
    return value


_TYPES = {
    "dataset": {"kind": str, "classes": int, "per_class_train": int, "per_class_test": int,
                "dim": int, "spread": float, "seed": int, "train_path": str, "test_path": str},
    "protocol": {"base": int, "steps": int, "order_seed": int},
    "memory": {"mode": str, "size": int},
    "eval": {"probe": bool, "fwt": bool},
    "output": {"dir": str, "checkpoints": bool},
    "train": {"lambda_a": float, "lambda_s": float, "delta": float, "stage1_epochs": int,
              "stage2_epochs": int, "batch_size": int, "s_max": float, "seed": int,
              "prune": bool, "method": str},
    "sgd": {"base_lr": float, "momentum": float, "weight_decay": float, "warmup_epochs": int,
            "warmup_end_lr": float, "decay_factor": float},
}


def _coerce(section: dict, name: str, prefix: str, text) -> dict:
    types = _TYPES[name]
    return {k: _typed(v, types.get(k), f"{prefix}.{k}", text) for k, v in section.items()}


def _section(doc, name, text, required=True):
    if name not in doc:
        if required:
            raise ConfigError("missing required section", key=name)
        return {}
    sec = doc[name]
    if not isinstance(sec, dict):
        raise ConfigError("expected a table", key=name, line=_line_of(text, name))
    return dict(sec)


def _parse_sgd(sec, prefix, text) -> SgdConfig:
    _check_keys(sec, _SGD_KEYS, prefix, text)
    sec = _coerce(sec, "sgd", prefix, text)
    if "decay_epochs" in sec:
        sec["decay_epochs"] = tuple(_typed(e, int, f"{prefix}.decay_epochs", text)
                                    for e in sec["decay_epochs"])
    try:
        return SgdConfig(**sec)
    except DerlabError as exc:
        raise ConfigError(str(exc), key=prefix) from None


def _parse_block(b, i, text) -> BlockSpec:
    prefix = f"architecture.blocks[{i}]"
    if not isinstance(b, dict):
        raise ConfigError("each block must be a table", key=prefix)
    _check_keys(b, _BLOCK_KEYS, prefix, text)
    for req in ("kind", "channels"):
        if req not in b:
            raise ConfigError("missing required key", key=f"{prefix}.{req}")
    try:
        return BlockSpec(
            kind=_typed(b["kind"], str, f"{prefix}.kind", text),
            out_channels=_typed(b["channels"], int, f"{prefix}.channels", text),
            kernel_size=_typed(b.get("kernel", 1), int, f"{prefix}.kernel", text),
            has_bn=_typed(b.get("bn", True), bool, f"{prefix}.bn", text),
            has_relu=_typed(b.get("relu", True), bool, f"{prefix}.relu", text),
            masked=_typed(b.get("masked", True), bool, f"{prefix}.masked", text),
            stride=_typed(b.get("stride", 1), int, f"{prefix}.stride", text),
        )
    except DerlabError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), key=prefix) from None


def from_dict(doc: dict, text: str | None = None) -> ExperimentConfig:
    """Validate a parsed document. Raises ``ConfigError`` naming the key."""
    allowed = set(REQUIRED_SECTIONS) | {"eval", "output"}
    for k in doc:
        if k not in allowed:
            raise ConfigError("unknown section", key=k, line=_line_of(text, k))

    ds = _section(doc, "dataset", text)
    if "shape" in ds:
        shape = ds.pop("shape")
        if not isinstance(shape, list) or not all(isinstance(v, int) for v in shape):
            raise ConfigError("expected a list of integers", key="dataset.shape")
    else:
        shape = None
    _check_keys(ds, set(_TYPES["dataset"]), "dataset", text)
    dataset = _build(DatasetConfig, _coerce(ds, "dataset", "dataset", text), "dataset", text)
    dataset.shape = shape
    if dataset.kind not in ("synthetic", "file"):
        raise ConfigError("must be 'synthetic' or 'file'", key="dataset.kind",
                          line=_line_of(text, "dataset.kind"))
    if dataset.kind == "file" and not dataset.train_path:
        raise ConfigError("missing required key", key="dataset.train_path")

    proto = _section(doc, "protocol", text)
    _check_keys(proto, set(_TYPES["protocol"]), "protocol", text)
    for req in ("steps",):
        if req not in proto:
            raise ConfigError("missing required key", key=f"protocol.{req}")
    protocol = _build(ProtocolConfig, _coerce(proto, "protocol", "protocol", text), "protocol", text)

    arch = _section(doc, "architecture", text)
    _check_keys(arch, {"blocks"}, "architecture", text)
    if "blocks" not in arch:
        raise ConfigError("missing required key", key="architecture.blocks")
    if not isinstance(arch["blocks"], list) or not arch["blocks"]:
        raise ConfigError("expected a non-empty list of blocks", key="architecture.blocks")
    blocks = [_parse_block(b, i, text) for i, b in enumerate(arch["blocks"])]

    tr = _section(doc, "train", text)
    _check_keys(tr, {f.name for f in fields(TrainConfig)}, "train", text)
    stage1 = _parse_sgd(dict(tr.pop("stage1")), "train.stage1", text) if "stage1" in tr else None
    stage2 = _parse_sgd(dict(tr.pop("stage2")), "train.stage2", text) if "stage2" in tr else None
    tr = _coerce(tr, "train", "train", text)
    if stage1 is not None:
        tr["stage1"] = stage1
    if stage2 is not None:
        tr["stage2"] = stage2
    train = _build(TrainConfig, tr, "train", text)

    mem = _section(doc, "memory", text)
    _check_keys(mem, set(_TYPES["memory"]), "memory", text)
    if "size" not in mem:
        raise ConfigError("missing required key", key="memory.size")
    from .memory import ExemplarMemory
    memory = _build(MemoryConfig, _coerce(mem, "memory", "memory", text), "memory", text)
    try:
        ExemplarMemory(memory.mode, memory.size)
    except DerlabError as exc:
        raise ConfigError(str(exc), key="memory") from None

    ev = _section(doc, "eval", text, required=False)
    _check_keys(ev, set(_TYPES["eval"]), "eval", text)
    evalc = _build(EvalConfig, _coerce(ev, "eval", "eval", text), "eval", text)

    out = _section(doc, "output", text, required=False)
    _check_keys(out, set(_TYPES["output"]), "output", text)
    output = _build(OutputConfig, _coerce(out, "output", "output", text), "output", text)

    return ExperimentConfig(dataset, protocol, blocks, train, memory, evalc, output)


def parse_value(raw: str):
    """Interpret an override value the way TOML would."""
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_override(doc: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    key, raw = assignment.split("=", 1)
    key = key.strip()
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError("cannot override inside a non-table value", key=key)
        node = nxt
    node[parts[-1]] = parse_value(raw.strip())
    return doc


def read_document(path) -> tuple[dict, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    if path.suffix == ".json":
        try:
            return json.loads(text), text
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    try:
        return tomllib.loads(text), text
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config syntax: {exc}") from None


def load_config(path, overrides=()) -> ExperimentConfig:
    doc, text = read_document(path)
    doc = copy.deepcopy(doc)
    for o in overrides:
        apply_override(doc, o)
    return from_dict(doc, text)


def dump_toml(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Copy of ``cfg`` with every seed (data, class order, training) set to ``seed``."""
    new = copy.deepcopy(cfg)
    new.dataset = replace(new.dataset, seed=seed)
    new.protocol = replace(new.protocol, order_seed=seed)
    new.train = replace(new.train, seed=seed)
    return new
