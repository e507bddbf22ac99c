"""Self-describing dataset and checkpoint directories.

A dataset is a directory with a ``manifest.json`` (format id
``smsrecon-ds-v1``) cataloging raw little-endian binary arrays: each entry
records name, dtype code, shape and relative file path, so any language can
read the files back bit-exactly. Supported dtype codes: ``c64`` (interleaved
float32 real/imag pairs), ``f32``, ``f64``, ``u8``.

Checkpoints use the same catalog machinery under format id
``smsrecon-ckpt-v1``; the manifest carries the architecture spec, the
penalty mu, the training config and seeds, and each parameter tensor is one
raw array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

DATASET_FORMAT = "smsrecon-ds-v1"
CHECKPOINT_FORMAT = "smsrecon-ckpt-v1"

DTYPE_CODES = {
    "c64": np.dtype("<c8"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
}


class ManifestError(ValueError):
    pass


def dtype_code_for(array: np.ndarray) -> str:
    if np.iscomplexobj(array):
        return "c64"
    if array.dtype == np.float32:
        return "f32"
    if array.dtype in (np.float64,):
        return "f64"
    if array.dtype in (np.uint8, np.bool_):
        return "u8"
    raise ManifestError(f"no dtype code for {array.dtype}")


@dataclass(frozen=True)
class ArrayEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    path: str

    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * DTYPE_CODES[self.dtype].itemsize


@dataclass
class Manifest:
    format_id: str
    arrays: list[ArrayEntry] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def entry(self, name: str) -> ArrayEntry:
        for e in self.arrays:
            if e.name == name:
                return e
        raise KeyError(f"array {name!r} not in manifest")

    def names(self) -> list[str]:
        return [e.name for e in self.arrays]

    def to_dict(self) -> dict:
        return {
            "format": self.format_id,
            "arrays": [
                {"name": e.name, "dtype": e.dtype, "shape": list(e.shape),
                 "byte_order": "little", "path": e.path}
                for e in self.arrays
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        arrays = [
            ArrayEntry(name=a["name"], dtype=a["dtype"], shape=tuple(a["shape"]),
                       path=a["path"])
            for a in d["arrays"]
        ]
        for a in arrays:
            if a.dtype not in DTYPE_CODES:
                raise ManifestError(f"unknown dtype code {a.dtype!r}")
        return cls(format_id=d["format"], arrays=arrays, meta=d.get("meta", {}))


def save_manifest(root: Path, manifest: Manifest) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "manifest.json").open("w") as f:
        json.dump(manifest.to_dict(), f, indent=1, sort_keys=True)


def load_manifest(root: Path, expected_format: str | None = None) -> Manifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise ManifestError(f"no manifest.json in {root}")
    manifest = Manifest.from_dict(json.loads(path.read_text()))
    if expected_format and manifest.format_id != expected_format:
        raise ManifestError(
            f"{root}: format {manifest.format_id!r}, expected {expected_format!r}"
        )
    validate_manifest(root, manifest)
    return manifest


def validate_manifest(root: Path, manifest: Manifest) -> None:
    """Every cataloged file must exist with exactly the declared byte size."""
    root = Path(root)
    for entry in manifest.arrays:
        file = root / entry.path
        if not file.exists():
            raise ManifestError(f"missing array file {entry.path} for {entry.name!r}")
        actual = file.stat().st_size
        if actual != entry.nbytes():
            raise ManifestError(
                f"{entry.name!r}: file {entry.path} has {actual} bytes, "
                f"manifest says {entry.nbytes()}"
            )


class DatasetWriter:
    """Accumulates arrays into ``root/arrays/NNNN.bin`` plus one manifest."""

    def __init__(self, root: Path, format_id: str = DATASET_FORMAT, meta: dict | None = None):
        self.root = Path(root)
        self.manifest = Manifest(format_id=format_id, meta=meta or {})
        (self.root / "arrays").mkdir(parents=True, exist_ok=True)

    def add(self, name: str, array: np.ndarray, dtype: str | None = None) -> None:
        if any(e.name == name for e in self.manifest.arrays):
            raise ManifestError(f"duplicate array name {name!r}")
        dtype = dtype or dtype_code_for(np.asarray(array))
        data = np.ascontiguousarray(array, dtype=DTYPE_CODES[dtype])
        rel = f"arrays/{len(self.manifest.arrays):04d}.bin"
        (self.root / rel).write_bytes(data.tobytes())
        self.manifest.arrays.append(
            ArrayEntry(name=name, dtype=dtype, shape=tuple(data.shape), path=rel)
        )

    def finish(self) -> Manifest:
        save_manifest(self.root, self.manifest)
        return self.manifest


class DatasetReader:
    def __init__(self, root: Path, expected_format: str = DATASET_FORMAT):
        self.root = Path(root)
        self.manifest = load_manifest(self.root, expected_format)

    @property
    def meta(self) -> dict:
        return self.manifest.meta

    def names(self) -> list[str]:
        return self.manifest.names()

    def load(self, name: str) -> np.ndarray:
        entry = self.manifest.entry(name)
        raw = (self.root / entry.path).read_bytes()
        return np.frombuffer(raw, dtype=DTYPE_CODES[entry.dtype]).reshape(entry.shape).copy()


# ---------------------------------------------------------------------------
# model checkpoints


def save_checkpoint(
    root: Path,
    model,
    training_config: dict | None = None,
    seed: int | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Write an unrolled-model checkpoint directory.

    The manifest meta holds the architecture spec, mu, the training config
    and seed; each named parameter becomes one raw array (f32 or f64).
    """
    meta = {
        "architecture": model.config.to_dict(),
        "mu": float(model.mu.detach()),
        "training_config": training_config or {},
        "seed": seed,
    }
    if extra_meta:
        meta.update(extra_meta)
    writer = DatasetWriter(root, format_id=CHECKPOINT_FORMAT, meta=meta)
    for name, param in model.named_parameters():
        arr = param.detach().numpy()
        writer.add(name, arr, dtype="f64" if arr.dtype == np.float64 else "f32")
    writer.finish()
    if training_config:
        write_key_value_config(Path(root) / "training_config.txt", training_config)


def load_checkpoint(root: Path):
    """Rebuild the model from a checkpoint directory; returns (model, meta)."""
    from .unrolled import UnrolledConfig, UnrolledNet

    reader = DatasetReader(root, expected_format=CHECKPOINT_FORMAT)
    config = UnrolledConfig.from_dict(reader.meta["architecture"])
    model = UnrolledNet(config)
    state = {}
    for name in reader.names():
        state[name] = torch.from_numpy(reader.load(name))
    dtype = next(iter(state.values())).dtype
    model = model.to(dtype)
    model.load_state_dict(state)
    return model, reader.meta


def write_key_value_config(path: Path, config: dict, prefix: str = "") -> None:
    """Flatten a nested config into ``key = value`` lines (plain text)."""
    lines = _flatten_kv(config, prefix)
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in lines))


def _flatten_kv(d: dict, prefix: str):
    out = []
    for k, v in sorted(d.items()):
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.extend(_flatten_kv(v, f"{key}."))
        else:
            out.append((key, json.dumps(v)))
    return out
