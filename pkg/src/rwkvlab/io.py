"""File formats and configuration: checkpoints, corpora, configs, manifests,
metrics. All binary layouts are little-endian and fully specified here.

Checkpoint layout (magic "ARWK"):
    magic[4] | version u32 | config_len u32 | config JSON (canonical UTF-8)
    | param_count u64
    | per param: name_len u32 | name UTF-8 | ndim u32 | dims u64[ndim]
    | payload: f32[] per param, name-table order
    | checksum u64 (blake2b-8 of payload)

Corpus layout (magic "ARWC"):
    magic[4] | version u32 | vocab_size u32 | count u64 | token ids u32[]

Checkpoints always store f32 payloads; in the f64 verification run mode a
save quantizes (round-trips are byte-stable, bit-exact in the default mode).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import __version__
from .model import DecoderModel, ModelConfig, build_model
from .tasks import TaskSpec
from .tensor import Tensor
from .training import TrainConfig, TrainRun

CKPT_MAGIC = b"ARWK"
CORPUS_MAGIC = b"ARWC"
CKPT_VERSION = 1
CORPUS_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


def _payload_checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _config_json(cfg: ModelConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True, separators=(",", ":"))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.path}: truncated (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _write_blob(path: Union[str, Path], config_obj: dict,
                arrays: dict[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    cfg_bytes = json.dumps(config_obj, sort_keys=True,
                           separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(cfg_bytes)))
    parts.append(cfg_bytes)
    parts.append(struct.pack("<Q", len(arrays)))
    payload = bytearray()
    for name, arr in arrays.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            parts.append(struct.pack("<Q", dim))
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    parts.append(bytes(payload))
    parts.append(struct.pack("<Q", _payload_checksum(bytes(payload))))
    Path(path).write_bytes(b"".join(parts))


def _read_blob(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    r = _Reader(raw, str(path))
    if r.take(4) != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    config_obj = json.loads(r.take(r.u32()).decode())
    count = r.u64()
    names: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        names.append((name, shape))
    payload_len = sum(int(np.prod(s)) * 4 for _, s in names)
    payload = r.take(payload_len)
    checksum = r.u64()
    if r.pos != len(raw):
        raise TruncatedFileError(f"{path}: {len(raw) - r.pos} trailing bytes")
    if checksum != _payload_checksum(payload):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in names:
        n = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(payload[offset:offset + n],
                                     dtype="<f4").reshape(shape).copy()
        offset += n
    return config_obj, arrays


def save_checkpoint(model: DecoderModel, path: Union[str, Path]) -> None:
    params = model.named_parameters()
    cfg = {"kind": "model", "model": dataclasses.asdict(model.config)}
    _write_blob(path, cfg, {n: t.data for n, t in params.items()})


def _fill_params(model: DecoderModel, arrays: dict[str, np.ndarray],
                 path) -> DecoderModel:
    params = model.named_parameters()
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise ShapeError(f"{path}: parameter set mismatch: "
                         f"missing={missing[:4]} extra={extra[:4]}")
    for name, t in params.items():
        arr = arrays[name]
        if arr.shape != t.shape:
            raise ShapeError(
                f"{path}: shape of {name!r} is {arr.shape}, expected {t.shape}")
        t.data = arr.astype(t.data.dtype)
    return model


def load_checkpoint(path: Union[str, Path]) -> DecoderModel:
    config_obj, arrays = _read_blob(path)
    if config_obj.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    cfg = ModelConfig(**config_obj["model"])
    return _fill_params(build_model(cfg), arrays, path)


def save_train_state(model: DecoderModel, run: TrainRun,
                     path: Union[str, Path]) -> None:
    """Model parameters plus optimizer moments and the run record: enough to
    resume bit-exactly (batches are derived from (seed, step))."""
    arrays = {n: t.data for n, t in model.named_parameters().items()}
    for name, m in run.m.items():
        arrays[f"opt.m.{name}"] = m
    for name, v in run.v.items():
        arrays[f"opt.v.{name}"] = v
    cfg = {
        "kind": "train_state",
        "model": dataclasses.asdict(model.config),
        "run": {
            "stage": run.stage,
            "variant": run.variant,
            "seed": run.seed,
            "step": run.step,
            "tokens_seen": run.tokens_seen,
            "loss_curve": [[s, l] for s, l in run.loss_curve],
            "wall_ms_total": run.wall_ms_total,
        },
    }
    _write_blob(path, cfg, arrays)


def load_train_state(path: Union[str, Path]) -> tuple[DecoderModel, TrainRun]:
    config_obj, arrays = _read_blob(path)
    if config_obj.get("kind") != "train_state":
        raise CheckpointError(f"{path}: not a train-state checkpoint")
    cfg = ModelConfig(**config_obj["model"])
    params = {n: a for n, a in arrays.items() if not n.startswith("opt.")}
    model = _fill_params(build_model(cfg), params, path)
    rr = config_obj["run"]
    run = TrainRun(stage=rr["stage"], variant=rr["variant"], seed=rr["seed"],
                   step=rr["step"], tokens_seen=rr["tokens_seen"],
                   loss_curve=[(int(s), float(l)) for s, l in rr["loss_curve"]],
                   wall_ms_total=rr["wall_ms_total"])
    dtype = model.embed.data.dtype
    for name, arr in arrays.items():
        if name.startswith("opt.m."):
            run.m[name[len("opt.m."):]] = arr.astype(dtype)
        elif name.startswith("opt.v."):
            run.v[name[len("opt.v."):]] = arr.astype(dtype)
    return model, run


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def write_corpus(path: Union[str, Path], ids: np.ndarray, vocab_size: int) -> None:
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ValueError(f"corpus must be a flat id stream, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"token ids outside [0, {vocab_size})")
    header = CORPUS_MAGIC + struct.pack("<IIQ", CORPUS_VERSION, vocab_size, ids.size)
    Path(path).write_bytes(header + np.ascontiguousarray(ids, dtype="<u4").tobytes())


def read_corpus(path: Union[str, Path]) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    r = _Reader(raw, str(path))
    if r.take(4) != CORPUS_MAGIC:
        raise BadMagicError(f"{path}: not a corpus file (bad magic)")
    version, vocab_size = struct.unpack("<II", r.take(8))
    if version != CORPUS_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported corpus version {version}")
    count = r.u64()
    ids = np.frombuffer(r.take(count * 4), dtype="<u4").astype(np.int64)
    if r.pos != len(raw):
        raise TruncatedFileError(f"{path}: {len(raw) - r.pos} trailing bytes")
    if ids.size and ids.max() >= vocab_size:
        raise ValueError(f"{path}: token id {ids.max()} >= vocab {vocab_size}")
    return ids, vocab_size


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig, "task": TaskSpec}


@dataclass
class LoadedConfig:
    model: Optional[ModelConfig] = None
    train: Optional[TrainConfig] = None
    task: Optional[TaskSpec] = None
    effective: dict = field(default_factory=dict)


def _build_section(name: str, cls, payload: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - set(fields))
    if unknown:
        raise ValueError(f"config section {name!r}: unknown key {unknown[0]!r}")
    kwargs = dict(payload)
    if cls is TaskSpec and "seq_len_eval" in kwargs:
        kwargs["seq_len_eval"] = tuple(kwargs["seq_len_eval"])
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ValueError(f"config section {name!r}: {e}") from None
    except ValueError as e:
        raise ValueError(f"config section {name!r}: {e}") from None


def load_config(path: Union[str, Path]) -> LoadedConfig:
    """Strict JSON config: unknown keys are rejected by name, defaults are
    applied and echoed into `effective` for the run manifest."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: config root must be an object")
    unknown = sorted(set(payload) - set(_SECTION_TYPES))
    if unknown:
        raise ValueError(f"{path}: unknown section {unknown[0]!r}")
    out = LoadedConfig()
    for name, cls in _SECTION_TYPES.items():
        if name not in payload:
            continue
        section = payload[name]
        if not isinstance(section, dict):
            raise ValueError(f"{path}: section {name!r} must be an object")
        obj = _build_section(name, cls, section)
        setattr(out, name, obj)
        eff = dataclasses.asdict(obj)
        if isinstance(eff.get("seq_len_eval"), tuple):
            eff["seq_len_eval"] = list(eff["seq_len_eval"])
        out.effective[name] = eff
    return out


# ---------------------------------------------------------------------------
# manifests and metrics
# ---------------------------------------------------------------------------

def sha256_file(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    stage: str
    seed: int
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)    # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)   # path -> sha256
    metrics_path: Optional[str] = None
    package_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"


def write_manifest(manifest: RunManifest, path: Union[str, Path]) -> None:
    Path(path).write_text(manifest.to_json())


class MetricsWriter:
    """Append-only JSONL metrics stream, flushed per record."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc):
        self.close()
        return False
