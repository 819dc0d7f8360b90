"""Slide embedding by view ensembling, plus on-disk embedding matrices.

A trained pooling network maps one sampled view (a handful of tiles) to a
vector. Single views are noisy, so a slide is embedded by averaging the
network output over ``r_views`` independently sampled views and normalizing
the mean to unit length. Views are drawn from augmentation slice 0 only
(the untouched tile embeddings) and no slide-level transform is applied:
test-time geometry should be the recorded geometry.

The module also provides the mean-tile baseline and a small binary format
for embedding matrices (magic ``GSLE``) with a CSV export.
"""

from __future__ import annotations

import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import EmbeddingBank, list_banks, load_bank
from .errors import (
    DegenerateEmbedding,
    DimensionMismatch,
    EmptyBag,
    FormatError,
    InsufficientTiles,
)
from .sparsemap import build_sparse_map
from .training import SlideModel

EMBED_MAGIC = b"GSLE"
EMBED_VERSION = 1
DEFAULT_R_VIEWS = 50


@dataclass(frozen=True)
class SlideEmbedding:
    """Unit-norm slide vector plus the sampling budget that produced it."""

    slide_id: str
    vector: np.ndarray
    r_views: int
    tiles: int


def _resolve_tiles(model: SlideModel, tiles: int | None) -> int:
    """Default to the tile count the checkpoint was trained with."""
    if tiles is None:
        if model.train_tiles is None:
            raise InsufficientTiles(
                "no tile count given and the model does not record one")
        return model.train_tiles
    if model.train_tiles is not None and tiles != model.train_tiles:
        warnings.warn(
            f"embedding with {tiles} tiles per view, but the checkpoint was "
            f"trained with {model.train_tiles}; expect degraded embeddings",
            stacklevel=3)
    return tiles


def embed_slide(bank: EmbeddingBank, model: SlideModel, tiles: int | None = None,
                r_views: int = DEFAULT_R_VIEWS,
                rng: np.random.Generator | None = None) -> SlideEmbedding:
    """Ensemble ``r_views`` sampled views into one unit-norm slide vector.

    Each view draws ``tiles`` tile indices without replacement from
    augmentation slice 0, runs the pooling network in eval mode, and the
    view outputs are averaged then L2-normalized.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    tiles = _resolve_tiles(model, tiles)
    if r_views < 1:
        raise InsufficientTiles(f"need at least 1 view, got {r_views}")
    if tiles > bank.n_tiles:
        raise InsufficientTiles(
            f"{bank.slide_id}: {tiles} tiles per view requested, "
            f"bank has {bank.n_tiles}")
    if bank.feat_dim != model.feat_dim:
        raise DimensionMismatch(
            f"{bank.slide_id}: bank features have {bank.feat_dim} dims, "
            f"model expects {model.feat_dim}")

    coords = bank.coords[0].astype(np.int64)
    feats = bank.features[0].astype(model.dtype)
    maps = []
    for _ in range(r_views):
        idx = np.sort(rng.choice(bank.n_tiles, size=tiles, replace=False))
        maps.append(build_sparse_map((coords[idx], feats[idx])))
    pooled, _ = model.net.forward(maps, training=False)
    mean = pooled.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise DegenerateEmbedding(
            f"{bank.slide_id}: view-averaged vector is exactly zero")
    vec = (mean / norm).astype(np.float32)
    return SlideEmbedding(bank.slide_id, vec, r_views, tiles)


def average_mil_embed(bank: EmbeddingBank) -> np.ndarray:
    """Mean of the untouched tile embeddings: the no-learning baseline."""
    if bank.n_tiles == 0:
        raise EmptyBag(f"{bank.slide_id}: no tiles to average")
    return bank.features[0].astype(np.float64).mean(axis=0)


def embed_dataset(bank_dir, model: SlideModel, tiles: int | None = None,
                  r_views: int = DEFAULT_R_VIEWS, seed: int = 0,
                  threads: int = 1):
    """Embed every bank in a directory.

    Returns ``(ids, matrix, failures)`` where rows of ``matrix`` follow the
    lexicographic order of slide ids and ``failures`` is a list of
    ``(slide_id, message)`` for banks that could not be embedded. Each
    slide's random stream depends only on the seed and its position in the
    sorted listing, so thread count and failures elsewhere never change a
    slide's embedding.
    """
    paths = list_banks(bank_dir)
    tiles = _resolve_tiles(model, tiles)

    def one(item):
        slide_idx, path = item
        rng = np.random.default_rng([seed, 2, slide_idx])
        bank = load_bank(path)
        emb = embed_slide(bank, model, tiles=tiles, r_views=r_views, rng=rng)
        return emb

    results: list[SlideEmbedding] = []
    failures: list[tuple[str, str]] = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(one, item) for item in enumerate(paths)]
            outcomes = [(p, f) for p, f in zip(paths, futures)]
        for path, fut in outcomes:
            try:
                results.append(fut.result())
            except Exception as exc:  # noqa: BLE001  (per-slide isolation)
                failures.append((Path(path).stem, str(exc)))
    else:
        for item in enumerate(paths):
            try:
                results.append(one(item))
            except Exception as exc:  # noqa: BLE001
                failures.append((Path(item[1]).stem, str(exc)))

    results.sort(key=lambda e: e.slide_id)
    ids = [e.slide_id for e in results]
    if results:
        matrix = np.stack([e.vector for e in results]).astype(np.float32)
    else:
        matrix = np.zeros((0, model.net_config.out_dim), dtype=np.float32)
    return ids, matrix, failures


# ---------------------------------------------------------------------------
# Embedding matrix I/O

def save_embeddings(path, ids: list[str], matrix: np.ndarray) -> None:
    """Write an embedding matrix: GSLE magic, version, counts, then rows.

    Each row is a u32 id length, the UTF-8 id, and dim little-endian f32.
    """
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DimensionMismatch(
            f"matrix shape {matrix.shape} does not match {len(ids)} ids")
    parts = [EMBED_MAGIC,
             struct.pack("<III", EMBED_VERSION, len(ids), matrix.shape[1])]
    for sid, row in zip(ids, matrix):
        raw = sid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(row.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_embeddings(path):
    """Read a GSLE file back into ``(ids, matrix)``. Strict about layout."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != EMBED_MAGIC:
        raise FormatError(f"{path.name}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise FormatError(f"{path.name}: truncated header")
    version, n_slides, dim = struct.unpack_from("<III", blob, 4)
    if version != EMBED_VERSION:
        raise FormatError(f"{path.name}: unsupported version {version}")
    off = 16
    ids: list[str] = []
    rows = []
    for _ in range(n_slides):
        if off + 4 > len(blob):
            raise FormatError(f"{path.name}: truncated slide record")
        (id_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        end = off + id_len + 4 * dim
        if end > len(blob):
            raise FormatError(f"{path.name}: truncated slide record")
        ids.append(blob[off:off + id_len].decode("utf-8"))
        off += id_len
        rows.append(np.frombuffer(blob, dtype="<f4", count=dim, offset=off))
        off += 4 * dim
    if off != len(blob):
        raise FormatError(f"{path.name}: {len(blob) - off} trailing bytes")
    matrix = np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return ids, matrix


def export_embeddings_csv(path, ids: list[str], matrix: np.ndarray) -> None:
    """Write the same matrix as CSV with header id,v0,...  One row per slide."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DimensionMismatch(
            f"matrix shape {matrix.shape} does not match {len(ids)} ids")
    dim = matrix.shape[1]
    lines = ["id," + ",".join(f"v{j}" for j in range(dim))]
    for sid, row in zip(ids, matrix):
        lines.append(sid + "," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
