"""On-disk formats: a binary named-tensor container, checkpoints, text
sidecar files, and the INI experiment config.

The tensor container is deliberately simple and language-neutral: a magic
string, a format version, then little-endian records of (name, dtype code,
shape, payload).  Feature and embedding payloads are 32-bit floats;
checkpoints keep 64-bit payloads so a reloaded model reproduces forward
passes bit-for-bit.  Records are written in sorted name order so a
write -> read -> write cycle is byte-identical.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import struct
from dataclasses import dataclass, asdict, fields

import numpy as np

MAGIC = b"SPKVTAR\x00"
FORMAT_VERSION = 1

_DTYPE_F32 = 0
_DTYPE_F64 = 1
_DTYPE_JSON = 2

META_KEY = "__meta__"


def write_archive(path, arrays: dict[str, np.ndarray], meta: dict | None = None,
                  dtype: str = "f4"):
    """Write named arrays plus an optional JSON metadata record."""
    records: dict[str, tuple[int, bytes, tuple[int, ...]]] = {}
    np_dtype = np.dtype("<" + dtype)
    code = _DTYPE_F32 if dtype == "f4" else _DTYPE_F64
    for name, arr in arrays.items():
        if name == META_KEY:
            raise ValueError(f"array name {META_KEY!r} is reserved")
        a = np.ascontiguousarray(np.asarray(arr), dtype=np_dtype)
        records[name] = (code, a.tobytes(), a.shape)
    if meta is not None:
        payload = json.dumps(meta, sort_keys=True).encode("utf-8")
        records[META_KEY] = (_DTYPE_JSON, payload, (len(payload),))

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(records)))
    for name in sorted(records):
        code, payload, shape = records[name]
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BI", code, len(shape)))
        for dim in shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_archive(path):
    """Read a container; returns (arrays, meta-or-None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    offset = len(MAGIC)

    def unpack(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    (version,) = unpack("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    (count,) = unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    meta = None
    for _ in range(count):
        (name_len,) = unpack("<I")
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = unpack("<BI")
        shape = tuple(unpack("<" + "Q" * ndim)) if ndim else ()
        if code == _DTYPE_JSON:
            payload = data[offset : offset + shape[0]]
            offset += shape[0]
            meta = json.loads(payload.decode("utf-8"))
        else:
            np_dtype = np.dtype("<f4") if code == _DTYPE_F32 else np.dtype("<f8")
            n_items = int(np.prod(shape)) if shape else 1
            nbytes = n_items * np_dtype.itemsize
            arr = np.frombuffer(data[offset : offset + nbytes], dtype=np_dtype)
            offset += nbytes
            arrays[name] = arr.reshape(shape).astype(np.float64)
    return arrays, meta


def write_features(path, features: dict[str, np.ndarray], frame_shift_ms: float):
    dims = {f.shape[1] for f in features.values()}
    if len(dims) > 1:
        raise ValueError("all feature matrices must share one dimension")
    meta = {"kind": "features", "frame_shift_ms": frame_shift_ms,
            "dim": dims.pop() if dims else 0}
    write_archive(path, features, meta, dtype="f4")


def read_features(path):
    arrays, meta = read_archive(path)
    if meta is None or meta.get("kind") != "features":
        raise ValueError(f"{path}: not a feature archive")
    return arrays, meta


def write_embeddings(path, embeddings: dict[str, np.ndarray]):
    dims = {e.shape[0] for e in embeddings.values()}
    if len(dims) > 1:
        raise ValueError("all embeddings must share one dimension")
    meta = {"kind": "embeddings", "dim": dims.pop() if dims else 0}
    write_archive(path, embeddings, meta, dtype="f4")


def read_embeddings(path):
    arrays, meta = read_archive(path)
    if meta is None or meta.get("kind") != "embeddings":
        raise ValueError(f"{path}: not an embedding archive")
    return arrays


def write_utt2spk(path, utt2spk: dict[str, str]):
    with open(path, "w", encoding="utf-8") as fh:
        for utt in sorted(utt2spk):
            fh.write(f"{utt} {utt2spk[utt]}\n")


def read_utt2spk(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}: line {lineno}: expected 'utt spk'")
            out[parts[0]] = parts[1]
    if not out:
        raise ValueError(f"{path}: empty utt2spk")
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, *, step: int, epoch: int, config_hash: str,
                    rng_state: dict | None = None, extra: dict | None = None):
    """Persist parameters, momentum buffers and bookkeeping (64-bit)."""
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model.params.items():
        arrays[f"param.{name}"] = tensor.data
    for name, vel in model.params.velocity.items():
        arrays[f"momentum.{name}"] = vel
    meta = {
        "kind": "checkpoint",
        "format_version": FORMAT_VERSION,
        "arch": model.arch_dict(),
        "step": step,
        "epoch": epoch,
        "config_hash": config_hash,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    write_archive(path, arrays, meta, dtype="f8")


def load_checkpoint(path):
    """Rebuild the model and return (model, meta)."""
    from .models import model_from_arch_dict

    arrays, meta = read_archive(path)
    if meta is None or meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a checkpoint")
    model = model_from_arch_dict(meta["arch"])
    params = {name[len("param."):]: arr for name, arr in arrays.items()
              if name.startswith("param.")}
    model.params.load_state(params)
    for name, arr in arrays.items():
        if name.startswith("momentum."):
            model.params.velocity[name[len("momentum."):]] = arr.copy()
    return model, meta


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class ExperimentConfig:
    """Flat key = value settings grouped into sections."""

    # [model]
    arch: str = "maxpool"
    resnet_blocks: int = 3
    width_scale: float = 1.0
    in_dim: int = 23
    # [loss]
    loss: str = "asoftmax"
    margin: int = 2
    lambda_start: float = 1000.0
    lambda_decay: float = 0.99
    lambda_floor: float = 5.0
    # [optimizer]
    learning_rate: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 0.9
    grad_clip: float = 5.0
    batch_size: int = 16
    epochs: int = 3
    steps_per_epoch: int = 50
    seed: int = 0
    # [data]
    segment_min_s: float = 3.0
    segment_max_s: float = 10.0
    val_fraction: float = 0.1

    _SECTIONS = {
        "model": ("arch", "resnet_blocks", "width_scale", "in_dim"),
        "loss": ("loss", "margin", "lambda_start", "lambda_decay", "lambda_floor"),
        "optimizer": ("learning_rate", "momentum", "lr_decay", "grad_clip",
                      "batch_size", "epochs", "steps_per_epoch", "seed"),
        "data": ("segment_min_s", "segment_max_s", "val_fraction"),
    }

    def __post_init__(self):
        if self.arch not in ("maxpool", "resnet"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.loss not in ("softmax", "asoftmax"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0 < self.segment_min_s <= self.segment_max_s:
            raise ValueError("segment range must satisfy 0 < min <= max")

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    kwargs = {}
    for section, keys in ExperimentConfig._SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key in parser[section]:
            if key not in keys:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            raw = parser[section][key]
            kind = types[key]
            if kind == "int":
                kwargs[key] = int(raw)
            elif kind == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
    return ExperimentConfig(**kwargs)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in ExperimentConfig._SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {getattr(cfg, key)}")
        lines.append("")
    return "\n".join(lines)
