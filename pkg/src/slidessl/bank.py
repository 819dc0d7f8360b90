"""Frozen tile-embedding banks: K augmentation slices of n tiles each.

A bank stores, per augmentation slice k and tile t, the tile's pixel
coordinates and its embedding vector. Slice 0 holds the identity
(non-augmented) tile set and is reserved for inference; slices 1..K-1 feed
training views. Coordinates are stored per slice because each slice
subsamples its own tile set.

On disk a bank is a ".gsb" file: magic "GSLB", u32 version=1, u32 n_augs,
u32 n_tiles, u32 feat_dim, then for each slice (outer) and tile (inner)
i32 x, i32 y, feat_dim x f32, all little-endian. A JSON sidecar named
"<slide_id>.json" carries the slide id and generator provenance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptBank, DimensionMismatch, EmptyBag, FormatError

BANK_MAGIC = b"GSLB"
BANK_VERSION = 1
BANK_SUFFIX = ".gsb"


@dataclass
class EmbeddingBank:
    """In-memory bank: coords (K, n, 2) int32 and features (K, n, F) float32."""

    slide_id: str
    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int32)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.coords.ndim != 3 or self.coords.shape[2] != 2:
            raise DimensionMismatch(
                f"coords must be (K, n, 2), got {self.coords.shape}")
        if self.features.ndim != 3:
            raise DimensionMismatch(
                f"features must be (K, n, F), got {self.features.shape}")
        if self.coords.shape[:2] != self.features.shape[:2]:
            raise DimensionMismatch(
                f"coords {self.coords.shape} vs features {self.features.shape}")
        if self.n_augs < 1 or self.n_tiles < 1:
            raise EmptyBag(f"bank '{self.slide_id}' has no tiles")
        if np.any(self.coords < 0):
            raise CorruptBank(f"bank '{self.slide_id}' has negative coordinates")
        if not np.isfinite(self.features).all():
            raise CorruptBank(f"bank '{self.slide_id}' has non-finite features")

    @property
    def n_augs(self) -> int:
        return self.coords.shape[0]

    @property
    def n_tiles(self) -> int:
        return self.coords.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.features.shape[2]

    def slice(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(coords, features) of augmentation slice k."""
        return self.coords[k], self.features[k]


def _record_dtype(feat_dim: int) -> np.dtype:
    return np.dtype([("x", "<i4"), ("y", "<i4"), ("f", "<f4", (feat_dim,))])


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_bank(bank: EmbeddingBank, path, provenance: dict | None = None):
    """Write the binary bank plus its JSON sidecar (sorted keys, no clocks)."""
    path = Path(path)
    header = BANK_MAGIC + struct.pack(
        "<IIII", BANK_VERSION, bank.n_augs, bank.n_tiles, bank.feat_dim)
    rec = np.zeros((bank.n_augs, bank.n_tiles), dtype=_record_dtype(bank.feat_dim))
    rec["x"] = bank.coords[:, :, 0]
    rec["y"] = bank.coords[:, :, 1]
    rec["f"] = bank.features
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())
    sidecar = {"slide_id": bank.slide_id, "provenance": provenance or {}}
    with open(_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_bank(path) -> EmbeddingBank:
    """Read a .gsb file; slide id comes from the sidecar, else the stem."""
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != BANK_MAGIC:
        raise FormatError(f"{path.name}: not a bank file (bad magic)")
    if len(blob) < 20:
        raise CorruptBank(f"{path.name}: truncated header")
    version, n_augs, n_tiles, feat_dim = struct.unpack("<IIII", blob[4:20])
    if version != BANK_VERSION:
        raise FormatError(f"{path.name}: unsupported bank version {version}")
    if n_augs < 1 or n_tiles < 1 or feat_dim < 1:
        raise CorruptBank(f"{path.name}: degenerate header "
                          f"({n_augs} slices, {n_tiles} tiles, {feat_dim} dims)")
    rec_dtype = _record_dtype(feat_dim)
    expected = 20 + n_augs * n_tiles * rec_dtype.itemsize
    if len(blob) != expected:
        raise CorruptBank(
            f"{path.name}: {len(blob)} bytes on disk, expected {expected}")
    rec = np.frombuffer(blob, dtype=rec_dtype, offset=20).reshape(n_augs, n_tiles)

    slide_id = path.stem
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text())
        except json.JSONDecodeError as exc:
            raise CorruptBank(f"{sidecar.name}: invalid sidecar JSON") from exc
        slide_id = meta.get("slide_id", slide_id)

    coords = np.stack([rec["x"], rec["y"]], axis=2)
    try:
        return EmbeddingBank(slide_id, coords, rec["f"].copy())
    except CorruptBank as exc:
        raise CorruptBank(f"{path.name}: {exc}") from None


def list_banks(bank_dir) -> list[Path]:
    """All bank files under a directory, sorted by name for determinism."""
    return sorted(Path(bank_dir).glob(f"*{BANK_SUFFIX}"))
