"""Tensor files: a JSON manifest next to a packed float32 blob.

Manifest (UTF-8, JSON):
    {
      "format": "excel-tensors-v1",
      "blob": "<filename relative to the manifest>",
      "checksum_fnv1a64": "0x%016x over the entire blob file",
      "tensors": [{"name": str, "shape": [int, ...], "offset": int}, ...],
      "meta": {...},          # free-form, format-specific
      "provenance": {...}     # optional: stage, seed, config hash
    }

Blob: little-endian IEEE-754 binary32 values, row-major, packed back to
back at the declared byte offsets with no gaps. Loading verifies the
checksum first, then that the declared tensors tile the blob exactly.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, DataError, MissingTensorError, ShapeError
from .hashing import fnv1a64

FORMAT_TAG = "excel-tensors-v1"


@dataclass
class TensorFile:
    path: Path
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def require(self, name: str, shape: tuple | None = None) -> np.ndarray:
        if name not in self.tensors:
            raise MissingTensorError(f"missing tensor '{name}' in {self.path}")
        arr = self.tensors[name]
        if shape is not None and tuple(arr.shape) != tuple(shape):
            raise ShapeError(
                f"tensor '{name}' in {self.path} has shape {tuple(arr.shape)}, "
                f"expected {tuple(shape)}"
            )
        return arr

    def names(self) -> list[str]:
        return list(self.tensors)


def save_tensors(path, tensors, meta=None, provenance=None) -> Path:
    """Write manifest + blob. `tensors` is an ordered name -> array mapping."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT_TAG,
        "blob": blob_path.name,
        "checksum_fnv1a64": f"0x{fnv1a64(blob):016x}",
        "tensors": entries,
        "meta": meta or {},
        "provenance": provenance or {},
    }
    blob_path.write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_tensors(path) -> TensorFile:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_TAG:
        raise DataError(f"manifest {path} has unknown format tag {manifest.get('format')!r}")
    blob_path = path.parent / manifest["blob"]
    if not blob_path.exists():
        raise DataError(f"blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    declared = manifest.get("checksum_fnv1a64", "")
    actual = f"0x{fnv1a64(blob):016x}"
    if declared != actual:
        raise ChecksumError(
            f"blob {blob_path} checksum {actual} does not match manifest {declared}"
        )
    tensors: dict[str, np.ndarray] = {}
    covered = 0
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if offset < 0 or offset + nbytes > len(blob):
            raise ShapeError(
                f"tensor '{name}' ({shape} at offset {offset}) extends past "
                f"blob end ({len(blob)} bytes)"
            )
        flat = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = np.ascontiguousarray(flat.reshape(shape).astype(np.float32))
        covered += nbytes
    if covered != len(blob):
        raise ShapeError(
            f"manifest {path} declares {covered} bytes of tensors but blob "
            f"holds {len(blob)}"
        )
    return TensorFile(
        path=path,
        tensors=tensors,
        meta=manifest.get("meta", {}),
        provenance=manifest.get("provenance", {}),
    )
