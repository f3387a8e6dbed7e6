"""Patch tables to spatial graphs: grid indexing, k-NN edges, positional codes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError

FEATURE_DIM = 1024


@dataclass
class PatchRecord:
    patch_id: str
    col: int
    row: int
    embedding: np.ndarray
    tissue_probs: tuple[float, float, float]  # epithelium, lymphocyte, debris

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatchRecord):
            return NotImplemented
        return (
            self.patch_id == other.patch_id
            and self.col == other.col
            and self.row == other.row
            and tuple(self.tissue_probs) == tuple(other.tissue_probs)
            and np.array_equal(self.embedding, other.embedding)
        )


@dataclass
class WsiGraph:
    """One slide as a graph.

    ``edges[e] = (i, j)`` means j is one of i's nearest neighbours, so node
    i aggregates over ``{j : (i, j) in edges}``. Edges are sorted by source
    and, within a source, by neighbour rank.
    """

    wsi_id: str
    coords: np.ndarray  # (N, 2) int64, columns (col, row)
    node_features: np.ndarray  # (N, feature_dim)
    positional: np.ndarray  # (N, pe_dim)
    edges: np.ndarray  # (E, 2) int64
    node_weights: np.ndarray  # (N,) int64
    label: int
    patch_ids: list[str] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, WsiGraph):
            return NotImplemented
        return (
            self.wsi_id == other.wsi_id
            and self.label == other.label
            and list(self.patch_ids) == list(other.patch_ids)
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in (
                    (self.coords, other.coords),
                    (self.node_features, other.node_features),
                    (self.positional, other.positional),
                    (self.edges, other.edges),
                    (self.node_weights, other.node_weights),
                )
            )
        )

    def with_weights(self, weights) -> "WsiGraph":
        w = np.asarray(weights, dtype=np.int64).reshape(-1)
        if w.shape[0] != self.n_nodes:
            raise ContractError(f"{w.shape[0]} weights for {self.n_nodes} nodes")
        return WsiGraph(
            self.wsi_id, self.coords, self.node_features, self.positional,
            self.edges, w, self.label, list(self.patch_ids),
        )


def patch_grid_from_coords(
    pixel_origins: Sequence[tuple[int, int]],
    patch_size_px: int,
    patch_ids: Sequence[str] | None = None,
) -> list[tuple[int, int]]:
    """Convert pixel origins of non-overlapping patches to (col, row) indices."""
    if patch_size_px <= 0:
        raise ConfigError(f"patch size must be positive, got {patch_size_px}")
    out = []
    for i, (x, y) in enumerate(pixel_origins):
        if x < 0 or y < 0 or x % patch_size_px or y % patch_size_px:
            name = patch_ids[i] if patch_ids is not None else f"#{i}"
            raise FormatError(
                f"patch {name} origin ({x}, {y}) is not a nonnegative multiple of {patch_size_px}"
            )
        out.append((int(x) // patch_size_px, int(y) // patch_size_px))
    return out


def _check_unique(coords: np.ndarray) -> None:
    uniq, inverse, counts = np.unique(coords, axis=0, return_inverse=True, return_counts=True)
    if (counts > 1).any():
        dups = [tuple(int(v) for v in uniq[i]) for i in np.flatnonzero(counts > 1)]
        raise DataError(f"duplicate patch coordinates (col, row): {dups}")


def knn_edges(coords, k: int, chunk: int = 1024) -> np.ndarray:
    """Directed k-NN edges under squared Euclidean grid distance.

    Candidates are ranked by (distance, row, col, input position); each node
    gets ``min(k, N - 1)`` outgoing edges and never itself.
    """
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    n = c.shape[0]
    if n < 1:
        raise ContractError("knn_edges needs at least one node")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    _check_unique(c)
    kk = min(k, n - 1)
    if kk == 0:
        return np.zeros((0, 2), dtype=np.int64)

    c = c - c.min(axis=0)
    col, row = c[:, 0], c[:, 1]
    # rank key packs (d2, row, col); coordinates are unique so input
    # position never decides, but a stable sort keeps it as the final key.
    n_col = int(col.max()) + 1
    n_row = int(row.max()) + 1
    tail = row * n_col + col
    span = n_row * n_col
    max_d2 = int((col.max() ** 2 + row.max() ** 2))
    if (max_d2 + 2) * span >= np.iinfo(np.int64).max:
        raise DataError("grid too large for exact neighbour ranking")

    out = np.empty((n, kk), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        d2 = (col[lo:hi, None] - col[None, :]) ** 2 + (row[lo:hi, None] - row[None, :]) ** 2
        key = d2 * span + tail[None, :]
        key[np.arange(hi - lo), np.arange(lo, hi)] = np.iinfo(np.int64).max
        part = np.argpartition(key, kk - 1, axis=1)[:, :kk] if kk < n - 1 else np.argsort(key, axis=1)[:, :kk]
        pk = np.take_along_axis(key, part, axis=1)
        order = np.argsort(pk, axis=1, kind="stable")
        out[lo:hi] = np.take_along_axis(part, order, axis=1)
    src = np.repeat(np.arange(n, dtype=np.int64), kk)
    return np.stack([src, out.reshape(-1)], axis=1)


def symmetrize(edges: np.ndarray, n: int) -> np.ndarray:
    """Union of the edge set with its reverse, sorted by (source, target)."""
    if edges.shape[0] == 0:
        return edges.reshape(0, 2).astype(np.int64)
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    keys = np.unique(both[:, 0] * n + both[:, 1])
    return np.stack([keys // n, keys % n], axis=1).astype(np.int64)


def positional_encoding(coords, dim: int = 32, normalized: bool = False) -> np.ndarray:
    """Fixed sinusoidal codes; first half encodes col, second half row.

    For axis value p and pair index t the channels are
    ``sin(p / 10000**(4t/dim))`` and ``cos(...)``, interleaved.
    """
    if dim % 4:
        raise ConfigError(f"positional encoding dim must be divisible by 4, got {dim}")
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if normalized and c.shape[0]:
        lo = c.min(axis=0)
        span = np.maximum(c.max(axis=0) - lo, 1.0)
        c = (c - lo) / span
    quarter = dim // 4
    freqs = 1.0 / 10000.0 ** (4.0 * np.arange(quarter) / dim)
    out = np.empty((c.shape[0], dim))
    for axis in range(2):
        ang = c[:, axis : axis + 1] * freqs[None, :]
        base = axis * (dim // 2)
        out[:, base : base + dim // 2 : 2] = np.sin(ang)
        out[:, base + 1 : base + dim // 2 : 2] = np.cos(ang)
    return out


def assemble_graph(
    records: Sequence[PatchRecord],
    label: int,
    weights,
    *,
    wsi_id: str = "",
    k: int = 8,
    pe_dim: int = 32,
    symmetrize_edges: bool = False,
    pe_normalized: bool = False,
) -> WsiGraph:
    if not records:
        raise ContractError("cannot build a graph from zero patches")
    w = np.asarray(weights, dtype=np.int64).reshape(-1)
    if w.shape[0] != len(records):
        raise ContractError(f"{w.shape[0]} weights for {len(records)} patches")
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label!r}")
    coords = np.array([(r.col, r.row) for r in records], dtype=np.int64)
    feats = np.stack([np.asarray(r.embedding, dtype=np.float64) for r in records])
    edges = knn_edges(coords, k)
    if symmetrize_edges:
        edges = symmetrize(edges, len(records))
    return WsiGraph(
        wsi_id=wsi_id,
        coords=coords,
        node_features=feats,
        positional=positional_encoding(coords, pe_dim, pe_normalized),
        edges=edges,
        node_weights=w,
        label=int(label),
        patch_ids=[r.patch_id for r in records],
    )
