"""Binary tensor container for checkpoints and toy datasets.

Layout (little-endian)::

    b"VTTT" | u32 version | u32 manifest_bytes | manifest | payload

The manifest is UTF-8 text with one line per tensor, ``name dtype shape``,
where ``shape`` is comma-separated (empty for scalars). The payload holds the
raw arrays back to back in manifest order. A model checkpoint also stores its
configuration as JSON in a ``uint8`` tensor named ``__config__``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from vittt.backbone import ModelConfig, ModelParams, init_params
from vittt.block import BlockConfig
from vittt.tree import iter_tensors, tree_map
from vittt.ttt import TTTConfig

MAGIC = b"VTTT"
VERSION = 1
CONFIG_KEY = "__config__"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1"), "u32": np.dtype("<u4"),
           "i64": np.dtype("<i8")}


class FormatError(ValueError):
    pass


def _code(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    for code, ref in _DTYPES.items():
        if ref == dt:
            return code
    raise FormatError(f"unsupported dtype {arr.dtype}")


def write_container(path: str | Path, tensors: list[tuple[str, np.ndarray]]) -> None:
    lines, blobs = [], []
    for name, arr in tensors:
        if not name or any(c.isspace() for c in name):
            raise FormatError(f"tensor name {name!r} must be non-empty without whitespace")
        arr = np.asarray(arr)
        code = _code(arr)
        lines.append(f"{name} {code} {','.join(str(n) for n in arr.shape)}")
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    manifest = ("\n".join(lines)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 12 + mlen
    manifest = data[12:offset].decode("utf-8")
    out: dict[str, np.ndarray] = {}
    for line in filter(None, manifest.split("\n")):
        parts = line.split(" ")
        if len(parts) != 3 or parts[1] not in _DTYPES:
            raise FormatError(f"{path}: malformed manifest line {line!r}")
        name, code, shape_txt = parts
        shape = tuple(int(n) for n in shape_txt.split(",")) if shape_txt else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: payload too short for {name}")
        out[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return out


# -- model configs -----------------------------------------------------------


def config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    block = dict(d.pop("block"))
    ttt = TTTConfig(**block.pop("ttt"))
    d["image_size"] = tuple(d["image_size"])
    return ModelConfig(block=BlockConfig(ttt=ttt, **block), **d)


def save_model(path: str | Path, params: ModelParams, cfg: ModelConfig, dtype: str | None = None) -> None:
    """Write ``params`` and ``cfg``; ``dtype="f32"`` downcasts float tensors (lossy for double runs)."""
    if dtype not in (None, "f32", "f64"):
        raise ValueError("dtype must be None, 'f32' or 'f64'")
    cfg_bytes = json.dumps(config_to_dict(cfg), sort_keys=True).encode("utf-8")
    tensors = [(CONFIG_KEY, np.frombuffer(cfg_bytes, dtype=np.uint8))]
    for name, arr in iter_tensors(params):
        tensors.append((name, arr if dtype is None else arr.astype(_DTYPES[dtype])))
    write_container(path, tensors)


def load_model(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    tensors = read_container(path)
    if CONFIG_KEY not in tensors:
        raise FormatError(f"{path}: no {CONFIG_KEY} entry")
    cfg = config_from_dict(json.loads(tensors.pop(CONFIG_KEY).tobytes().decode("utf-8")))
    template = init_params(cfg, seed=0)
    expected = {name: arr.shape for name, arr in iter_tensors(template)}
    if set(expected) != set(tensors):
        missing, extra = set(expected) - set(tensors), set(tensors) - set(expected)
        raise FormatError(f"{path}: tensor set mismatch (missing {sorted(missing)}, extra {sorted(extra)})")

    def fill(name, arr):
        stored = tensors[name]
        if stored.shape != expected[name]:
            raise FormatError(f"{path}: {name} has shape {stored.shape}, expected {expected[name]}")
        return stored

    return tree_map(fill, template), cfg


# -- datasets ----------------------------------------------------------------


def save_dataset(directory: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    """One container per sample (``sample_NNNNN.vttt``) plus ``labels.u32``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        write_container(directory / f"sample_{i:05d}.vttt", [("image", np.asarray(img))])
    np.asarray(labels, dtype="<u4").tofile(directory / "labels.u32")


def load_dataset(directory: str | Path) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    label_file = directory / "labels.u32"
    if not label_file.exists():
        raise FileNotFoundError(f"{label_file} not found")
    labels = np.fromfile(label_file, dtype="<u4").astype(np.int64)
    files = sorted(directory.glob("sample_*.vttt"))
    if len(files) != len(labels):
        raise FormatError(f"{directory}: {len(files)} samples but {len(labels)} labels")
    images = np.stack([read_container(f)["image"] for f in files]) if files else np.empty((0,))
    return images, labels
