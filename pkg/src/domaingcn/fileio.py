"""Readers and writers for patch tables, manifests, graph caches, reports and
attention maps.

Text formats are UTF-8, tab- or comma-separated with a header row. Floats
are written with ``repr`` (shortest round-trip form), so every writer and
reader pair round-trips bit-exactly. Files ending in ``.gz`` are gzipped
with a zeroed timestamp so identical content gives identical bytes.
"""

from __future__ import annotations

import gzip
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, FormatError, IOFailure
from .graph import FEATURE_DIM, PatchRecord, WsiGraph
from .training import FoldReport, FoldResult, Prediction

PATCH_COLUMNS = ("patch_id", "col", "row", "p_epithelium", "p_lymphocyte", "p_debris")
MANIFEST_COLUMNS = ("wsi_id", "label", "path")
GRAPH_FORMAT = "domaingcn-graphs"
REPORT_FORMAT = "domaingcn-report"
FORMAT_VERSION = 1


# --- low-level text helpers -------------------------------------------------


def _read_text(path: str | Path) -> str:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {p}: {exc.strerror or exc}") from exc
    if p.suffix == ".gz":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{p}: not a valid gzip file ({exc})") from exc
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{p}: not UTF-8 text ({exc})") from exc


def _write_bytes(path: str | Path, data: bytes) -> None:
    p = Path(path)
    if p.suffix == ".gz":
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(data)
        data = buf.getvalue()
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
    except OSError as exc:
        raise IOFailure(f"cannot write {p}: {exc.strerror or exc}") from exc


def _write_text(path: str | Path, text: str) -> None:
    _write_bytes(path, text.encode("utf-8"))


def _delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def _fmt(x: float) -> str:
    return repr(float(x))


# --- patch tables -------------------------------------------------------------


def patch_columns(feature_dim: int = FEATURE_DIM) -> list[str]:
    return list(PATCH_COLUMNS) + [f"f{i}" for i in range(feature_dim)]


def write_patch_table(path: str | Path, records: Sequence[PatchRecord], delimiter: str = "\t") -> None:
    """Write records in order; the feature count is taken from the first record."""
    if not records:
        raise DataError(f"{path}: refusing to write an empty patch table")
    dim = len(records[0].embedding)
    lines = [delimiter.join(patch_columns(dim))]
    for r in records:
        if len(r.embedding) != dim:
            raise DataError(f"patch {r.patch_id}: {len(r.embedding)} features, expected {dim}")
        head = [r.patch_id, str(int(r.col)), str(int(r.row))] + [_fmt(p) for p in r.tissue_probs]
        lines.append(delimiter.join(head + [_fmt(v) for v in np.asarray(r.embedding).tolist()]))
    _write_text(path, "\n".join(lines) + "\n")


def _parse_header(path, header: str, feature_dim: int) -> tuple[str, list[int]]:
    delim = _delimiter(header)
    names = [c.strip() for c in header.split(delim)]
    expected = patch_columns(feature_dim)
    missing = [c for c in PATCH_COLUMNS if c not in names]
    if missing:
        raise FormatError(f"{path}:1: missing column(s) {', '.join(missing)}")
    feats = [c for c in names if c.startswith("f") and c[1:].isdigit()]
    if len(feats) != feature_dim:
        raise FormatError(f"{path}:1: found {len(feats)} feature columns, expected {feature_dim} (f0..f{feature_dim - 1})")
    extra = sorted(set(names) - set(expected))
    if extra:
        raise FormatError(f"{path}:1: unexpected column(s) {', '.join(extra[:5])}")
    if len(set(names)) != len(names):
        raise FormatError(f"{path}:1: repeated column names")
    pos = {c: i for i, c in enumerate(names)}
    return delim, [pos[c] for c in expected]


def load_patch_table(path: str | Path, feature_dim: int = FEATURE_DIM) -> list[PatchRecord]:
    """Parse a patch table, validating every row; order is preserved.

    Raises :class:`FormatError` naming the line for a missing column,
    wrong field count, non-numeric cell, probability outside [0, 1],
    non-finite feature, or a repeated patch id or (col, row).
    """
    lines = _read_text(path).split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise FormatError(f"{path}:1: missing header row")
    delim, order = _parse_header(path, lines[0], feature_dim)
    n_cols = len(order)
    records: list[PatchRecord] = []
    seen_cells: dict[tuple[int, int], int] = {}
    seen_ids: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], 2):
        cells = line.rstrip("\r").split(delim)
        if len(cells) != n_cols:
            raise FormatError(f"{path}:{lineno}: expected {n_cols} fields, got {len(cells)}")
        cells = [cells[i] for i in order]
        pid = cells[0].strip()
        if not pid:
            raise FormatError(f"{path}:{lineno}: empty patch_id")
        try:
            col, row = int(cells[1]), int(cells[2])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: col/row must be integers, got {cells[1]!r}, {cells[2]!r}") from None
        if col < 0 or row < 0:
            raise FormatError(f"{path}:{lineno}: negative grid position ({col}, {row})")
        try:
            values = list(map(float, cells[3:]))
        except ValueError:
            bad = next(i for i, c in enumerate(cells[3:]) if not _is_float(c))
            name = PATCH_COLUMNS[3 + bad] if bad < 3 else f"f{bad - 3}"
            raise FormatError(f"{path}:{lineno}: column {name}: non-numeric value {cells[3 + bad]!r}") from None
        probs = values[:3]
        for name, p in zip(PATCH_COLUMNS[3:], probs):
            if not 0.0 <= p <= 1.0:
                raise FormatError(f"{path}:{lineno}: {name} = {p} is outside [0, 1]")
        emb = np.array(values[3:], dtype=np.float64)
        if not np.all(np.isfinite(emb)):
            j = int(np.flatnonzero(~np.isfinite(emb))[0])
            raise FormatError(f"{path}:{lineno}: feature f{j} is not finite")
        if (col, row) in seen_cells:
            raise FormatError(f"{path}:{lineno}: duplicate (col, row) = ({col}, {row}), first on line {seen_cells[(col, row)]}")
        if pid in seen_ids:
            raise FormatError(f"{path}:{lineno}: duplicate patch_id {pid!r}, first on line {seen_ids[pid]}")
        seen_cells[(col, row)] = lineno
        seen_ids[pid] = lineno
        records.append(PatchRecord(pid, col, row, emb, tuple(probs)))
    if not records:
        raise FormatError(f"{path}: no patch rows after the header")
    return records


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


# --- manifests ------------------------------------------------------------------


@dataclass
class ManifestEntry:
    wsi_id: str
    label: int
    path: str  # as written, relative to the manifest's directory


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    provenance: dict[str, str] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def labels(self) -> list[int]:
        return [e.label for e in self.entries]


def write_manifest(path: str | Path, entries: Sequence[ManifestEntry], provenance: dict | None = None) -> None:
    """One ``wsi_id, label, path`` row per slide; provenance as ``# key = value`` lines."""
    lines = [f"# {k} = {v}" for k, v in (provenance or {}).items()]
    lines.append("\t".join(MANIFEST_COLUMNS))
    for e in entries:
        lines.append(f"{e.wsi_id}\t{int(e.label)}\t{e.path}")
    _write_text(path, "\n".join(lines) + "\n")


def load_manifest(path: str | Path, check_paths: bool = True) -> DatasetManifest:
    text = _read_text(path)
    provenance: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    header_seen = False
    delim = "\t"
    seen: dict[str, int] = {}
    base = Path(path).parent
    for lineno, line in enumerate(text.split("\n"), 1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = (s.strip() for s in body.split("=", 1))
                provenance[k] = v
            continue
        if not header_seen:
            delim = _delimiter(line)
            names = [c.strip() for c in line.split(delim)]
            if names != list(MANIFEST_COLUMNS):
                raise FormatError(f"{path}:{lineno}: manifest header must be {', '.join(MANIFEST_COLUMNS)}, got {names}")
            header_seen = True
            continue
        cells = [c.strip() for c in line.split(delim)]
        if len(cells) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(cells)}")
        wsi_id, label, rel = cells
        if label not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        if not wsi_id:
            raise FormatError(f"{path}:{lineno}: empty wsi_id")
        if wsi_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate wsi_id {wsi_id!r}, first on line {seen[wsi_id]}")
        seen[wsi_id] = lineno
        entry = ManifestEntry(wsi_id, int(label), rel)
        entries.append(entry)
        if check_paths:
            target = Path(rel) if Path(rel).is_absolute() else base / rel
            if not target.is_file():
                raise DataError(f"{path}:{lineno}: patch table {target} does not exist")
    if not header_seen:
        raise FormatError(f"{path}: missing header row")
    if not entries:
        raise DataError(f"{path}: manifest lists no slides")
    return DatasetManifest(entries, provenance, base)


# --- graph cache ----------------------------------------------------------------

_GRAPH_ARRAYS = ("coords", "node_features", "positional", "edges", "node_weights")


def save_graphs(path: str | Path, graphs: Sequence[WsiGraph]) -> None:
    """All graphs in one ``.npz`` with a JSON header (ids, labels, patch ids)."""
    header = {
        "format": GRAPH_FORMAT,
        "version": FORMAT_VERSION,
        "graphs": [{"wsi_id": g.wsi_id, "label": int(g.label), "patch_ids": list(g.patch_ids)} for g in graphs],
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for i, g in enumerate(graphs):
        for name in _GRAPH_ARRAYS:
            arrays[f"{i}.{name}"] = getattr(g, name)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _write_bytes(path, buf.getvalue())


def load_graphs(path: str | Path) -> list[WsiGraph]:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["header"]).decode())
            arrays = {k: z[k] for k in z.files}
    except OSError as exc:
        raise IOFailure(f"cannot read graph file {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a graph file ({exc})") from exc
    if header.get("format") != GRAPH_FORMAT or header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported graph file format/version")
    graphs = []
    for i, meta in enumerate(header["graphs"]):
        try:
            parts = {name: arrays[f"{i}.{name}"] for name in _GRAPH_ARRAYS}
        except KeyError as exc:
            raise FormatError(f"{path}: graph {i} is missing array {exc}") from exc
        graphs.append(WsiGraph(meta["wsi_id"], label=int(meta["label"]), patch_ids=list(meta["patch_ids"]), **parts))
    return graphs


# --- reports ----------------------------------------------------------------------


def report_to_dict(report: FoldReport, meta: dict | None = None) -> dict:
    folds = []
    for f in report.folds:
        folds.append({
            "fold": f.fold, "auc": f.auc, "f1_macro": f.f1_macro, "f1_binary": f.f1_binary, "acc": f.acc,
            "best_epoch": f.best_epoch, "epochs_run": f.epochs_run,
            "train_loss": list(f.train_loss), "val_loss": list(f.val_loss),
            "predictions": [[p.wsi_id, p.label, p.prob, p.pred] for p in f.predictions],
        })
    return {
        "format": REPORT_FORMAT, "version": FORMAT_VERSION, "meta": meta or {},
        "folds": folds, "mean": report.mean, "std": report.std,
    }


def report_from_dict(d: dict) -> FoldReport:
    if d.get("format") != REPORT_FORMAT or d.get("version") != FORMAT_VERSION:
        raise FormatError("not a report (format/version mismatch)")
    folds = [
        FoldResult(
            fold=f["fold"], auc=f["auc"], f1_macro=f["f1_macro"], f1_binary=f["f1_binary"], acc=f["acc"],
            best_epoch=f["best_epoch"], epochs_run=f["epochs_run"],
            train_loss=list(f["train_loss"]), val_loss=list(f["val_loss"]),
            predictions=[Prediction(w, int(y), float(p), int(q)) for w, y, p, q in f["predictions"]],
        )
        for f in d["folds"]
    ]
    return FoldReport(folds, dict(d["mean"]), dict(d["std"]))


def report_table(report: FoldReport) -> str:
    """Machine-readable TSV: one row per fold, then ``mean`` and ``sd`` rows."""
    cols = ("fold", "auc", "f1_macro", "f1_binary", "acc", "best_epoch", "epochs_run")
    lines = ["\t".join(cols)]
    for f in report.folds:
        lines.append("\t".join([str(f.fold), _fmt(f.auc), _fmt(f.f1_macro), _fmt(f.f1_binary), _fmt(f.acc),
                                str(f.best_epoch), str(f.epochs_run)]))
    for name, agg in (("mean", report.mean), ("sd", report.std)):
        lines.append("\t".join([name] + [_fmt(agg[m]) for m in cols[1:5]] + ["", ""]))
    return "\n".join(lines) + "\n"


def report_text(report: FoldReport) -> str:
    lines = [f"{'fold':>6} {'AUC':>7} {'F1':>7} {'F1(pos)':>7} {'ACC':>7} {'best':>5} {'epochs':>6}"]
    for f in report.folds:
        lines.append(f"{f.fold:>6} {f.auc:7.4f} {f.f1_macro:7.4f} {f.f1_binary:7.4f} {f.acc:7.4f} "
                     f"{f.best_epoch:>5} {f.epochs_run:>6}")
    m, s = report.mean, report.std
    lines.append(f"{'mean':>6} {m['auc']:7.4f} {m['f1_macro']:7.4f} {m['f1_binary']:7.4f} {m['acc']:7.4f}")
    lines.append(f"{'sd':>6} {s['auc']:7.4f} {s['f1_macro']:7.4f} {s['f1_binary']:7.4f} {s['acc']:7.4f}")
    lines.append("")
    lines.append(f"AUC {m['auc']:.3f} ({s['auc']:.4f})  F1 {m['f1_macro']:.3f} ({s['f1_macro']:.4f})  "
                 f"ACC {m['acc']:.3f} ({s['acc']:.4f})")
    return "\n".join(lines) + "\n"


def write_report(out_dir: str | Path, report: FoldReport, meta: dict | None = None) -> dict[str, Path]:
    """``report.json`` (complete), ``report.tsv`` (metrics table), ``report.txt`` (human summary)."""
    out = Path(out_dir)
    paths = {"json": out / "report.json", "tsv": out / "report.tsv", "txt": out / "report.txt"}
    _write_text(paths["json"], json.dumps(report_to_dict(report, meta), indent=1) + "\n")
    _write_text(paths["tsv"], report_table(report))
    _write_text(paths["txt"], report_text(report))
    return paths


def read_report(path: str | Path) -> FoldReport:
    try:
        d = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return report_from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed report ({exc})") from exc


# --- attention maps -----------------------------------------------------------------


@dataclass
class AttentionMap:
    wsi_id: str
    patch_ids: list[str]
    coords: np.ndarray  # (N, 2) col, row
    scores: np.ndarray  # (N,)
    weights: np.ndarray  # (N,) ulcer weights
    mask: np.ndarray  # (N,) bool, top-quantile patches

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttentionMap):
            return NotImplemented
        return (
            self.wsi_id == other.wsi_id
            and self.patch_ids == other.patch_ids
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.scores, other.scores)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.mask, other.mask)
        )


def mask_size(n: int, q: float = 0.25) -> int:
    return int(math.ceil(q * n - 1e-12))


def top_quantile_mask(scores, coords, q: float = 0.25) -> np.ndarray:
    """The ``ceil(q * N)`` patches ranked first by (-score, row, col)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if s.shape[0] != c.shape[0]:
        raise DataError(f"{s.shape[0]} scores for {c.shape[0]} patches")
    order = np.lexsort((c[:, 0], c[:, 1], -s))
    mask = np.zeros(s.shape[0], dtype=bool)
    mask[order[: mask_size(s.shape[0], q)]] = True
    return mask


def attention_map(graph: WsiGraph, scores, q: float = 0.25) -> AttentionMap:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.shape[0] != graph.n_nodes:
        raise DataError(f"{graph.wsi_id}: {s.shape[0]} attention scores for {graph.n_nodes} patches")
    ids = list(graph.patch_ids) or [str(i) for i in range(graph.n_nodes)]
    return AttentionMap(graph.wsi_id, ids, graph.coords.copy(), s, graph.node_weights.copy(),
                        top_quantile_mask(s, graph.coords, q))


def write_attention_table(path: str | Path, amap: AttentionMap) -> None:
    lines = [f"# wsi_id = {amap.wsi_id}", "patch_id\tcol\trow\tattention\tulcer_weight\ttop_quantile"]
    for pid, (c, r), s, w, m in zip(amap.patch_ids, amap.coords, amap.scores, amap.weights, amap.mask):
        lines.append(f"{pid}\t{int(c)}\t{int(r)}\t{_fmt(s)}\t{int(w)}\t{int(m)}")
    _write_text(path, "\n".join(lines) + "\n")


def read_attention_table(path: str | Path) -> AttentionMap:
    wsi_id = ""
    rows = []
    header = None
    for lineno, line in enumerate(_read_text(path).split("\n"), 1):
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("wsi_id"):
                wsi_id = body.split("=", 1)[1].strip()
            continue
        if header is None:
            header = line.split("\t")
            if header != ["patch_id", "col", "row", "attention", "ulcer_weight", "top_quantile"]:
                raise FormatError(f"{path}:{lineno}: unexpected attention table header")
            continue
        cells = line.split("\t")
        if len(cells) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(cells)}")
        try:
            rows.append((cells[0], int(cells[1]), int(cells[2]), float(cells[3]), int(cells[4]), int(cells[5])))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric value") from None
    if header is None:
        raise FormatError(f"{path}: missing header row")
    return AttentionMap(
        wsi_id,
        [r[0] for r in rows],
        np.array([(r[1], r[2]) for r in rows], dtype=np.int64).reshape(-1, 2),
        np.array([r[3] for r in rows], dtype=np.float64),
        np.array([r[4] for r in rows], dtype=np.int64),
        np.array([bool(r[5]) for r in rows], dtype=bool),
    )


BACKGROUND_RGB = (0, 0, 80)
OUTLINE_RGB = (255, 0, 0)


def attention_raster(amap: AttentionMap) -> np.ndarray:
    """(rows, cols, 3) uint8 image, one pixel per grid cell.

    Tissue pixels are grey with brightness proportional to attention (max
    score = white). Mask pixels on the mask's 4-connected boundary are red.
    Cells without a patch are dark blue.
    """
    c = amap.coords
    w = int(c[:, 0].max()) + 1 if c.size else 1
    h = int(c[:, 1].max()) + 1 if c.size else 1
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    top = amap.scores.max() if amap.scores.size else 1.0
    level = np.round(255.0 * amap.scores / top).astype(np.uint8) if top > 0 else np.zeros(len(amap.scores), np.uint8)
    img[c[:, 1], c[:, 0]] = level[:, None]
    inside = np.zeros((h + 2, w + 2), dtype=bool)
    inside[c[amap.mask, 1] + 1, c[amap.mask, 0] + 1] = True
    core = inside[1:-1, 1:-1]
    edge = core & ~(inside[:-2, 1:-1] & inside[2:, 1:-1] & inside[1:-1, :-2] & inside[1:-1, 2:])
    img[edge] = OUTLINE_RGB
    return img


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary PPM (P6), readable by common image tools."""
    h, w, _ = image.shape
    _write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror or exc}") from exc
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise FormatError(f"{path}: not a binary 8-bit PPM")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise FormatError(f"{path}: truncated PPM")
    return pixels.reshape(h, w, 3)


def export_attention(graph: WsiGraph, scores, out_path: str | Path, q: float = 0.25) -> AttentionMap:
    """Write ``<out>.tsv`` (per-patch table) and ``<out>.ppm`` (grid raster)."""
    amap = attention_map(graph, scores, q)
    base = Path(out_path)
    if base.suffix in (".tsv", ".ppm"):
        base = base.with_suffix("")
    write_attention_table(base.with_suffix(".tsv"), amap)
    write_ppm(base.with_suffix(".ppm"), attention_raster(amap))
    return amap


# --- planted ground truth -----------------------------------------------------------


def write_planted(path: str | Path, planted: dict[str, Sequence[str]]) -> None:
    lines = ["wsi_id\tpatch_id"]
    for wsi_id, ids in planted.items():
        lines.extend(f"{wsi_id}\t{pid}" for pid in ids)
    _write_text(path, "\n".join(lines) + "\n")


def read_planted(path: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    lines = _read_text(path).split("\n")
    if not lines or lines[0] != "wsi_id\tpatch_id":
        raise FormatError(f"{path}:1: expected header wsi_id, patch_id")
    for lineno, line in enumerate(lines[1:], 2):
        if not line:
            continue
        cells = line.split("\t")
        if len(cells) != 2:
            raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(cells)}")
        out.setdefault(cells[0], []).append(cells[1])
    return out
