"""From patch records (on disk or generated) to weighted slide graphs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .config import HyperParams, WeightRule
from .fileio import (
    DatasetManifest,
    ManifestEntry,
    load_patch_table,
    write_manifest,
    write_patch_table,
    write_planted,
)
from .graph import PatchRecord, WsiGraph, assemble_graph
from .synthetic import SyntheticCohort, spec_dict
from .weights import ulcer_weights


def build_graph(
    records: Sequence[PatchRecord],
    label: int,
    hyper: HyperParams,
    rule: WeightRule = WeightRule(),
    wsi_id: str = "",
) -> WsiGraph:
    """Ulcer weights from the tissue probabilities, then the k-NN graph."""
    probs = np.array([r.tissue_probs for r in records], dtype=np.float64).reshape(-1, 3)
    return assemble_graph(
        records,
        label,
        ulcer_weights(probs, rule),
        wsi_id=wsi_id,
        k=hyper.k_neighbors,
        pe_dim=hyper.pe_dim,
        symmetrize_edges=hyper.symmetrize_edges,
        pe_normalized=hyper.pe_normalized,
    )


def graphs_from_manifest(
    manifest: DatasetManifest, hyper: HyperParams, rule: WeightRule = WeightRule()
) -> list[WsiGraph]:
    graphs = []
    for e in manifest.entries:
        records = load_patch_table(manifest.resolve(e), hyper.feature_dim)
        graphs.append(build_graph(records, e.label, hyper, rule, e.wsi_id))
    return graphs


def graphs_from_cohort(
    cohort: SyntheticCohort, hyper: HyperParams, rule: WeightRule = WeightRule()
) -> list[WsiGraph]:
    return [build_graph(s.records, s.label, hyper, rule, s.wsi_id) for s in cohort.slides]


def planted_masks(cohort: SyntheticCohort) -> dict[str, np.ndarray]:
    return {s.wsi_id: s.planted.copy() for s in cohort.slides}


def write_cohort(cohort: SyntheticCohort, out_dir: str | Path, compress: bool = False) -> Path:
    """Write ``tables/<wsi_id>.tsv[.gz]``, ``manifest.tsv`` and ``planted.tsv``.

    The manifest's comment block records every generator parameter.
    Returns the manifest path.
    """
    out = Path(out_dir)
    suffix = ".tsv.gz" if compress else ".tsv"
    entries = []
    for s in cohort.slides:
        rel = f"tables/{s.wsi_id}{suffix}"
        write_patch_table(out / rel, s.records)
        entries.append(ManifestEntry(s.wsi_id, s.label, rel))
    provenance = {"generator": "domaingcn.synthetic"}
    for k, v in spec_dict(cohort.spec).items():
        provenance[k] = ",".join(repr(float(x)) for x in v) if isinstance(v, tuple) else repr(v)
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries, provenance)
    write_planted(out / "planted.tsv", {s.wsi_id: s.planted_ids for s in cohort.slides if s.planted.any()})
    return manifest
