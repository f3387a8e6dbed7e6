"""Command-line interface: ``domaingcn <subcommand> [options]``.

Every subcommand takes ``--config FILE`` (flat ``key = value``) and one
``--key VALUE`` flag per config field; flags override the file. Exit codes:
0 success, 1 validation or runtime failure (with a categorized message on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .audit import TOLERANCE, audit_setup, gradient_audit
from .config import build_configs, coerce, config_keys, flatten, read_config_file
from .dataset import build_graph, graphs_from_manifest, write_cohort
from .errors import ConfigError, DomainGCNError
from .fileio import (
    attention_map,
    export_attention,
    load_graphs,
    load_manifest,
    load_patch_table,
    read_planted,
    save_graphs,
    write_report,
)
from .metrics import dice
from .model import forward, load_checkpoint, save_checkpoint
from .synthetic import SyntheticSpec, generate_cohort, spec_keys
from .training import run_cv
from .weights import high_weight_fraction

log = logging.getLogger("domaingcn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print and exit; let main decide
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser, keys: dict[str, type]) -> None:
    p.add_argument("--config", type=Path, help="flat 'key = value' config file")
    g = p.add_argument_group("config overrides")
    for key, typ in keys.items():
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar=typ.__name__.upper())


def _config_values(args, keys: dict[str, type]) -> dict:
    values = read_config_file(args.config, keys) if args.config else {}
    for key in keys:
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            values[key] = coerce(key, raw, keys)
    return values


def _load_graphs(args, hyper, rule):
    if args.graphs:
        return load_graphs(args.graphs)
    return graphs_from_manifest(load_manifest(args.manifest), hyper, rule)


def _add_source(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", type=Path, help="dataset manifest (wsi_id, label, path)")
    src.add_argument("--graphs", type=Path, help="graph cache written by build-graphs")


# --- subcommands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    values = _config_values(args, spec_keys())
    try:
        spec = SyntheticSpec(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cohort = generate_cohort(spec)
    manifest = write_cohort(cohort, args.out, compress=args.compress)
    n_pos = sum(cohort.labels)
    print(f"wrote {len(cohort.slides)} slides ({n_pos} ulcer, {len(cohort.slides) - n_pos} non-ulcer) to {manifest}")
    return 0


def cmd_build_graphs(args) -> int:
    hyper, _, rule = build_configs(_config_values(args, config_keys()))
    graphs = graphs_from_manifest(load_manifest(args.manifest), hyper, rule)
    save_graphs(args.out, graphs)
    print(f"wrote {len(graphs)} graphs to {args.out}")
    return 0


def cmd_weights_stats(args) -> int:
    hyper, _, rule = build_configs(_config_values(args, config_keys()))
    stats = high_weight_fraction(_load_graphs(args, hyper, rule), args.threshold)
    if args.out:
        lines = ["wsi_id\tlabel\tfraction"]
        lines += [f"{w}\t{y}\t{f!r}" for w, y, f in zip(stats.wsi_ids, stats.labels, stats.fractions)]
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"fraction of patches with ulcer weight >= {args.threshold}")
    print(f"  ulcer median      {stats.median_ulcer:.4f}  (n={len(stats.group(1))})")
    print(f"  non-ulcer median  {stats.median_non_ulcer:.4f}  (n={len(stats.group(0))})")
    print(f"  Mann-Whitney U {stats.statistic:.1f}, two-sided p = {stats.p_value:.3g}")
    return 0


def cmd_train(args) -> int:
    values = _config_values(args, config_keys())
    hyper, train_cfg, rule = build_configs(values)
    graphs = _load_graphs(args, hyper, rule)
    out = Path(args.out)
    planted = read_planted(args.planted) if args.planted else None
    dice_scores: list[float] = []

    def on_fold(fold, params, val_graphs):
        if args.save_checkpoints:
            save_checkpoint(out / "checkpoints" / f"fold{fold}.npz", params, hyper)
        if not (args.export_attention or planted is not None):
            return
        for g in val_graphs:
            _, scores = forward(g, params, hyper)
            if args.export_attention:
                amap = export_attention(g, scores, out / "attention" / f"fold{fold}" / g.wsi_id)
            else:
                amap = attention_map(g, scores)
            if planted is not None and g.label == 1:
                truth = set(planted.get(g.wsi_id, []))
                dice_scores.append(dice(amap.mask, [pid in truth for pid in g.patch_ids]))

    labels = [g.label for g in graphs]
    log.info("training on %d slides (%d ulcer)", len(graphs), sum(labels))
    report = run_cv(graphs, train_cfg, hyper, on_fold)
    meta = {"config": flatten(hyper, train_cfg, rule), "n_wsis": len(graphs), "n_ulcer": int(sum(labels))}
    if dice_scores:
        meta["mean_dice"] = float(np.mean(dice_scores))
    paths = write_report(out, report, meta)
    print(paths["txt"].read_text(encoding="utf-8"), end="")
    if dice_scores:
        print(f"mean Dice (top-25% attention vs planted region, {len(dice_scores)} slides): {meta['mean_dice']:.4f}")
    print(f"report written to {paths['json']}")
    return 0


def cmd_infer(args) -> int:
    params, hyper = load_checkpoint(args.checkpoint)
    values = _config_values(args, config_keys())
    _, _, rule = build_configs(values)
    records = load_patch_table(args.table, hyper.feature_dim)
    wsi_id = args.wsi_id or Path(args.table).name.split(".")[0]
    graph = build_graph(records, 0, hyper, rule, wsi_id)
    logits, scores = forward(graph, params, hyper)
    z = logits.data[0] - logits.data[0].max()
    probs = np.exp(z) / np.exp(z).sum()
    out = Path(args.out)
    if out.suffix in (".tsv", ".ppm", ".json"):
        out = out.with_suffix("")
    amap = export_attention(graph, scores, out)
    result = {
        "wsi_id": wsi_id,
        "logits": logits.data[0].tolist(),
        "prob_ulcer": float(probs[1]),
        "prediction": int(np.argmax(logits.data[0])),
        "n_patches": graph.n_nodes,
        "top_quantile_patches": [p for p, m in zip(amap.patch_ids, amap.mask) if m],
    }
    out.with_suffix(".json").write_text(json.dumps(result, indent=1) + "\n", encoding="utf-8")
    print(f"{wsi_id}: logits {result['logits']}, P(ulcer) = {result['prob_ulcer']:.4f}, "
          f"prediction {result['prediction']}")
    return 0


def cmd_gradcheck(args) -> int:
    hyper, _, _ = build_configs(_config_values(args, config_keys()))
    graph, params = audit_setup(args.seed, hyper)
    res = gradient_audit(graph, params, hyper, h=args.h, exhaustive=args.exhaustive)
    print(f"graph {graph.wsi_id}: {graph.n_nodes} nodes, {graph.edges.shape[0]} edges; "
          f"h = {args.h}; smallest ReLU input magnitude {res.kink_margin:.2e}")
    for name, err in res.errors.items():
        note = " (sampled rows)" if name in res.sampled else ""
        print(f"  {name:<16} {res.checked[name]:>6} coords  max rel err {err:.3e}{note}")
    print(f"checked {res.n_checked} coordinates ({res.n_refined} re-evaluated in extended precision)")
    print(f"max relative error: {res.max_error:.3e}")
    if res.max_error >= args.tolerance:
        print(f"domaingcn: gradient check failed: {res.max_error:.3e} >= {args.tolerance:g}", file=sys.stderr)
        return 1
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="domaingcn", description="Domain-weighted graph classification of slide patch graphs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for per-epoch losses")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="write a synthetic planted-signal cohort")
    g.add_argument("--out", type=Path, required=True, help="output directory")
    g.add_argument("--compress", action="store_true", help="gzip the patch tables")
    _add_config_flags(g, spec_keys())
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("build-graphs", help="patch tables -> graph cache")
    b.add_argument("--manifest", type=Path, required=True)
    b.add_argument("--out", type=Path, required=True, help="output .npz")
    _add_config_flags(b, config_keys())
    b.set_defaults(func=cmd_build_graphs)

    w = sub.add_parser("weights-stats", help="share of high-weight patches by label, with a rank-sum test")
    _add_source(w)
    w.add_argument("--threshold", type=int, default=3)
    w.add_argument("--out", type=Path, help="optional per-slide TSV")
    _add_config_flags(w, config_keys())
    w.set_defaults(func=cmd_weights_stats)

    t = sub.add_parser("train", help="stratified k-fold cross-validation")
    _add_source(t)
    t.add_argument("--out", type=Path, required=True, help="output directory for reports")
    t.add_argument("--save-checkpoints", action="store_true", help="write each fold's best parameters")
    t.add_argument("--export-attention", action="store_true", help="attention maps for validation slides")
    t.add_argument("--planted", type=Path, help="planted-region file; reports mean Dice of attention masks")
    _add_config_flags(t, config_keys())
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="checkpoint + patch table -> logits and attention map")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--table", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True, help="output prefix (.tsv, .ppm, .json are added)")
    i.add_argument("--wsi-id")
    _add_config_flags(i, config_keys())
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference audit of every parameter gradient")
    c.add_argument("--seed", type=int, default=0, help="audit graph seed")
    c.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    c.add_argument("--tolerance", type=float, default=TOLERANCE)
    c.add_argument("--exhaustive", action="store_true", help="check every row of proj_W")
    keys = {k: v for k, v in config_keys().items() if k != "seed"}
    _add_config_flags(c, keys)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{exc}\n(run with --help for usage)", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except DomainGCNError as exc:
        print(f"domaingcn: {exc.category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
