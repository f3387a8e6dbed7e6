"""Synthetic slide cohorts with a planted, spatially contiguous class signal.

Each slide is a 4-connected blob of tissue patches on a grid. Patch
features are Gaussian on a fixed random ``latent_rank``-dimensional
subspace plus isotropic noise of size ``noise_sd``, a stand-in for the low
effective rank of real foundation-model embeddings. Label-1
slides contain one 4-connected planted region whose features are shifted
by ``delta`` along a fixed unit direction and whose tissue probabilities
come from the ulcer profile. Everything else draws from the background
profile. Tissue probabilities are the first three components of a
four-way Dirichlet draw (epithelium, lymphocyte, debris, other), so each
one is Beta distributed and the three never sum past 1.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError
from .graph import PatchRecord

# Dirichlet concentrations for (epithelium, lymphocyte, debris, other)
BACKGROUND_PROFILE = (6.0, 2.0, 1.0, 3.0)
ULCER_PROFILE = (0.5, 4.0, 4.0, 1.5)

DECIMALS = 4


@dataclass(frozen=True)
class SyntheticSpec:
    n_wsis: int = 200
    grid_min: int = 24
    grid_max: int = 48
    nodes_min: int = 150
    nodes_max: int = 400
    planted_min: float = 0.10
    planted_max: float = 0.25
    feature_dim: int = 1024
    delta: float = 1.0
    latent_rank: int = 32
    noise_sd: float = 0.25
    tissue_signal: bool = True
    background_profile: tuple = BACKGROUND_PROFILE
    ulcer_profile: tuple = ULCER_PROFILE
    label_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_wsis < 1:
            raise ConfigError(f"n_wsis must be >= 1, got {self.n_wsis}")
        if not 1 <= self.nodes_min <= self.nodes_max:
            raise ConfigError(f"need 1 <= nodes_min <= nodes_max, got {self.nodes_min}, {self.nodes_max}")
        if not 1 <= self.grid_min <= self.grid_max:
            raise ConfigError(f"need 1 <= grid_min <= grid_max, got {self.grid_min}, {self.grid_max}")
        if self.grid_min * self.grid_min < self.nodes_max:
            raise ConfigError(
                f"a {self.grid_min}x{self.grid_min} grid cannot hold {self.nodes_max} patches"
            )
        if not 0.0 < self.planted_min <= self.planted_max:
            raise ConfigError(f"need 0 < planted_min <= planted_max, got {self.planted_min}, {self.planted_max}")
        if self.planted_max >= 1.0:
            raise ConfigError(f"planted-region fraction must be < 1, got {self.planted_max}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if not 0 <= self.latent_rank <= self.feature_dim:
            raise ConfigError(f"latent_rank must lie in [0, feature_dim], got {self.latent_rank}")
        if self.noise_sd < 0:
            raise ConfigError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ConfigError(f"label_fraction must lie in [0, 1], got {self.label_fraction}")
        for name in ("background_profile", "ulcer_profile"):
            p = getattr(self, name)
            if len(p) != 4 or min(p) <= 0:
                raise ConfigError(f"{name} needs 4 positive Dirichlet concentrations, got {p}")

    @property
    def n_positive(self) -> int:
        return int(round(self.label_fraction * self.n_wsis))


def spec_keys() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(SyntheticSpec)}


def spec_dict(spec: SyntheticSpec) -> dict:
    return dataclasses.asdict(spec)


@dataclass
class SyntheticSlide:
    wsi_id: str
    label: int
    records: list[PatchRecord]
    planted: np.ndarray  # (N,) bool, aligned with records
    extent: tuple[int, int]  # (cols, rows)

    @property
    def planted_ids(self) -> list[str]:
        return [r.patch_id for r, p in zip(self.records, self.planted) if p]


@dataclass
class SyntheticCohort:
    spec: SyntheticSpec
    direction: np.ndarray
    basis: np.ndarray  # (latent_rank, feature_dim), orthonormal rows
    slides: list[SyntheticSlide] = field(default_factory=list)

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.slides]


_STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def grow_region(rng: np.random.Generator, size: int, start: tuple[int, int], allowed) -> list[tuple[int, int]]:
    """Random 4-connected set of ``size`` cells grown from ``start``.

    ``allowed(cell)`` restricts growth. Each step adds a uniformly chosen
    frontier cell, so the result is connected by construction. Stops early
    if the reachable component is smaller than ``size``.
    """
    region = [start]
    taken = {start}
    frontier: list[tuple[int, int]] = []
    queued: set[tuple[int, int]] = set()

    def push_neighbours(cell):
        c, r = cell
        for dc, dr in _STEPS:
            nb = (c + dc, r + dr)
            if nb not in taken and nb not in queued and allowed(nb):
                queued.add(nb)
                frontier.append(nb)

    push_neighbours(start)
    while len(region) < size and frontier:
        i = int(rng.integers(len(frontier)))
        frontier[i], frontier[-1] = frontier[-1], frontier[i]
        cell = frontier.pop()
        queued.discard(cell)
        taken.add(cell)
        region.append(cell)
        push_neighbours(cell)
    return region


def _tissue_probs(rng: np.random.Generator, profile, n: int) -> np.ndarray:
    return np.round(rng.dirichlet(np.asarray(profile, dtype=np.float64), size=n)[:, :3], DECIMALS)


def _make_slide(
    spec: SyntheticSpec, rng: np.random.Generator, wsi_id: str, label: int, u: np.ndarray, basis: np.ndarray
) -> SyntheticSlide:
    n = int(rng.integers(spec.nodes_min, spec.nodes_max + 1))
    cols = int(rng.integers(spec.grid_min, spec.grid_max + 1))
    rows = int(rng.integers(spec.grid_min, spec.grid_max + 1))
    while cols * rows < n:
        cols += 1
    start = (int(rng.integers(cols)), int(rng.integers(rows)))
    cells = grow_region(rng, n, start, lambda c: 0 <= c[0] < cols and 0 <= c[1] < rows)
    # table order: row-major scan of the grid
    cells.sort(key=lambda c: (c[1], c[0]))
    index = {c: i for i, c in enumerate(cells)}

    planted = np.zeros(len(cells), dtype=bool)
    if label == 1:
        frac = rng.uniform(spec.planted_min, spec.planted_max)
        size = max(1, int(round(frac * len(cells))))
        seed_cell = cells[int(rng.integers(len(cells)))]
        region = grow_region(rng, size, seed_cell, lambda c: c in index)
        planted[[index[c] for c in region]] = True

    feats = rng.standard_normal((len(cells), basis.shape[0])) @ basis
    feats += spec.noise_sd * rng.standard_normal((len(cells), spec.feature_dim))
    feats[planted] += spec.delta * u
    feats = np.round(feats, DECIMALS)
    probs = _tissue_probs(rng, spec.background_profile, len(cells))
    if spec.tissue_signal and planted.any():
        probs[planted] = _tissue_probs(rng, spec.ulcer_profile, int(planted.sum()))

    records = [
        PatchRecord(f"p{i:04d}", c, r, feats[i], tuple(float(v) for v in probs[i]))
        for i, (c, r) in enumerate(cells)
    ]
    return SyntheticSlide(wsi_id, label, records, planted, (cols, rows))


def generate_cohort(spec: SyntheticSpec) -> SyntheticCohort:
    """Deterministic in-memory cohort for ``spec``.

    Exactly ``round(label_fraction * n_wsis)`` slides are positive. Slide i
    depends only on (seed, i), its label and the shared direction.
    """
    root = np.random.SeedSequence(spec.seed)
    dir_ss, label_ss, slide_root = root.spawn(3)
    dir_rng = np.random.default_rng(dir_ss)
    u = dir_rng.standard_normal(spec.feature_dim)
    u /= np.linalg.norm(u)
    # orthonormal rows via QR of a Gaussian matrix
    q, _ = np.linalg.qr(dir_rng.standard_normal((spec.feature_dim, spec.latent_rank)))
    basis = q.T.copy()
    labels = np.zeros(spec.n_wsis, dtype=np.int64)
    labels[: spec.n_positive] = 1
    labels = np.random.default_rng(label_ss).permutation(labels)
    cohort = SyntheticCohort(spec, u, basis)
    for i, ss in enumerate(slide_root.spawn(spec.n_wsis)):
        cohort.slides.append(_make_slide(spec, np.random.default_rng(ss), f"wsi{i:04d}", int(labels[i]), u, basis))
    return cohort
