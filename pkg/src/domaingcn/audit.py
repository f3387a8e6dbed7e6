"""Finite-difference audit of the model's tape gradients.

Every parameter of the model enters the loss through one affine map
``out = inp @ W + b``. Moving ``W[a, c]`` by h therefore moves column c of
``out`` by ``h * inp[:, a]`` (and ``b[c]`` by h), so a perturbed loss can
be evaluated by injecting that change at the map's output and running the
rest of the network. :class:`ReferenceForward` is a separate numpy
transcription of the forward pass that does this for a whole batch of
perturbations at once.

Central differences of an O(1) loss in float64 carry roughly
``ulp(loss) / 2h`` of round-off, about 1e-11 at h = 1e-5; that swamps
gradients below ~1e-7. Coordinates whose float64 check fails are
re-evaluated at the same h in extended precision (``np.longdouble``),
where the round-off floor is about 2000 times lower.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import HyperParams
from .errors import DataError
from .graph import WsiGraph, positional_encoding
from .model import ModelParams, graph_positional, init_params, loss_and_grads

KINK_MARGIN = 1e-3
TOLERANCE = 1e-4


def _site_of(name: str) -> tuple[str, str]:
    """(affine map, 'W' or 'b') that a parameter belongs to."""
    if name.startswith("layer"):
        site, kind = name.rsplit("_", 1)
        return site, kind
    return {
        "proj_W": ("proj", "W"),
        "proj_b": ("proj", "b"),
        "attn_V": ("attn_V", "W"),
        "attn_w": ("attn_w", "W"),
        "head_W": ("head", "W"),
        "head_b": ("head", "b"),
    }[name]


class ReferenceForward:
    """Tape-free loss with perturbations injected at any affine map.

    Neighbour aggregation uses the edge list sorted by source and a
    source-membership matrix, independent of the tape's grouped ops.
    """

    def __init__(self, graph: WsiGraph, params: ModelParams, hyper: HyperParams, dtype=np.float64):
        self.graph = graph
        self.hyper = hyper
        self.layers = params.layers
        self.dtype = dtype
        self.P = {k: t.data.astype(dtype) for k, t in params.items()}
        self.x_uni = graph.node_features.astype(dtype)
        self.pe = graph_positional(graph, hyper).astype(dtype)
        n = graph.n_nodes
        enabled = hyper.domain_weights_enabled
        w = graph.node_weights.astype(dtype)[:, None]
        self.input_scale = w if enabled and hyper.weight_mode == "scale_input" else None
        self.message_scale = w if enabled and hyper.weight_mode == "scale_message" else None
        self.eps = dtype(hyper.epsilon)

        edges = np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)
        order = np.argsort(edges[:, 0], kind="stable")
        self.src = edges[order, 0]
        self.dst = edges[order, 1]
        self.has_edges = self.src.shape[0] > 0
        # first edge of each source that has neighbours
        self.sources, self.starts = np.unique(self.src, return_index=True)
        bounds = np.append(self.starts, self.src.shape[0])
        self.spans = list(zip(bounds[:-1], bounds[1:]))
        self.member = (self.src[None, :] == self.sources[:, None]).astype(dtype)
        self.cache = self._base_pass()

    # -- building blocks -------------------------------------------------

    @staticmethod
    def _mm(x, W):
        if x.ndim == 3:
            return (x.reshape(-1, x.shape[-1]) @ W).reshape(x.shape[:-1] + (W.shape[1],))
        return x @ W

    def _inputs(self, projected):
        pe = np.broadcast_to(self.pe, projected.shape[:-1] + self.pe.shape[-1:])
        x = np.concatenate([projected, pe], axis=-1)
        return x * self.input_scale if self.input_scale is not None else x

    def _aggregate(self, x):
        msg = np.maximum(x, 0) + self.eps
        if self.message_scale is not None:
            msg = msg * self.message_scale
        m = msg[..., self.dst, :]  # (..., E, C)
        shift = np.empty_like(m)
        for lo, hi in self.spans:
            shift[..., lo:hi, :] = m[..., lo:hi, :].max(axis=-2, keepdims=True)
        e = np.exp(m - shift)
        agg = np.zeros(x.shape, dtype=x.dtype)
        agg[..., self.sources, :] = (self.member @ (e * m)) / (self.member @ e)
        return agg

    def _layer_from_mlp1(self, l, x, pre):
        p = f"layer{l}."
        return x + self._mm(np.maximum(pre, 0), self.P[p + "mlp2_W"]) + self.P[p + "mlp2_b"]

    def _layer(self, l, x):
        h = x + self._aggregate(x) if self.has_edges else x
        p = f"layer{l}."
        pre = self._mm(h, self.P[p + "mlp1_W"]) + self.P[p + "mlp1_b"]
        return self._layer_from_mlp1(l, x, pre)

    def _layers(self, x, start):
        for l in range(start, self.layers):
            x = self._layer(l, x)
        return x

    def _pool(self, x, scores):
        s = scores - scores.max(axis=-2, keepdims=True)
        a = np.exp(s)
        a = a / a.sum(axis=-2, keepdims=True)
        return (a * x).sum(axis=-2, keepdims=True)

    def _loss(self, logits):
        logits = logits[..., 0, :]
        z = logits - logits.max(axis=-1, keepdims=True)
        rest = np.exp(z).sum(axis=-1) - 1
        return np.atleast_1d(np.log1p(rest) - z[..., self.graph.label])

    def _head(self, x, scores):
        return self._loss(self._mm(self._pool(x, scores), self.P["head_W"]) + self.P["head_b"])

    def _head_from_x(self, x):
        u = np.tanh(self._mm(x, self.P["attn_V"]))
        return self._head(x, self._mm(u, self.P["attn_w"]))

    def _base_pass(self) -> dict:
        """Input of every affine map at the unperturbed point."""
        P = self.P
        c: dict = {"proj": self.x_uni}
        x = self._inputs(self.x_uni @ P["proj_W"] + P["proj_b"])
        # positional channels entering the first layer are constants
        self.relu_args = [x[:, : self.hyper.hidden]]
        for l in range(self.layers):
            p = f"layer{l}."
            h = x + self._aggregate(x) if self.has_edges else x
            pre = h @ P[p + "mlp1_W"] + P[p + "mlp1_b"]
            c[f"x{l}"] = x
            c[p + "mlp1"] = h
            c[p + "mlp2"] = np.maximum(pre, 0)
            self.relu_args.append(pre)
            x = self._layer_from_mlp1(l, x, pre)
            if l + 1 < self.layers:
                self.relu_args.append(x)
        c["xL"] = c["attn_V"] = x
        c["attn_w"] = np.tanh(x @ P["attn_V"])
        c["scores"] = c["attn_w"] @ P["attn_w"]
        c["head"] = self._pool(x, c["scores"])
        return c

    # -- public ------------------------------------------------------------

    def loss(self) -> float:
        return float(self._head(self.cache["xL"], self.cache["scores"])[0])

    def site_output(self, site: str) -> np.ndarray:
        c, P = self.cache, self.P
        if site == "attn_V":
            return c["xL"] @ P["attn_V"]
        if site == "attn_w":
            return c["scores"]
        if site == "proj":
            return self.x_uni @ P["proj_W"] + P["proj_b"]
        if site == "head":
            return c["head"] @ P["head_W"] + P["head_b"]
        return c[site] @ P[site + "_W"] + P[site + "_b"]

    def continue_from(self, site: str, out: np.ndarray) -> np.ndarray:
        """Losses when the output of ``site`` is replaced by ``out`` (B, rows, cols)."""
        c = self.cache
        if site == "proj":
            return self._head_from_x(self._layers(self._inputs(out), 0))
        if site.startswith("layer"):
            l = int(site[5 : site.index(".")])
            x = c[f"x{l}"]
            x = self._layer_from_mlp1(l, x, out) if site.endswith("mlp1") else x + out
            return self._head_from_x(self._layers(x, l + 1))
        if site == "attn_V":
            return self._head(c["xL"], self._mm(np.tanh(out), self.P["attn_w"]))
        if site == "attn_w":
            return self._head(c["xL"], out)
        return self._loss(out)

    def central_differences(self, name: str, flat_idx: np.ndarray, h: float, budget: int = 1 << 21) -> np.ndarray:
        """(L(p + h e_i) - L(p - h e_i)) / 2h for the listed coordinates of ``name``."""
        site, kind = _site_of(name)
        inp = self.cache[site]
        base_out = self.site_output(site)
        n_out = base_out.shape[-1]
        hh = self.dtype(h)
        out = np.empty(flat_idx.shape[0], dtype=self.dtype)
        step = max(1, budget // base_out.size)
        for lo in range(0, flat_idx.shape[0], step):
            idx = flat_idx[lo : lo + step]
            k = idx.shape[0]
            if kind == "W":
                rows, cols = np.divmod(idx, n_out)
                col_shift = inp[:, rows].T * hh  # (k, rows of out)
            else:
                cols = idx
                col_shift = np.full((k, base_out.shape[0]), hh, dtype=self.dtype)
            delta = np.zeros((k,) + base_out.shape, dtype=self.dtype)
            delta[np.arange(k), :, cols] = col_shift
            plus = self.continue_from(site, base_out + delta)
            minus = self.continue_from(site, base_out - delta)
            out[lo : lo + k] = (plus - minus) / (2 * hh)
        return out


def kink_margin(graph: WsiGraph, params: ModelParams, hyper: HyperParams) -> float:
    """Smallest |value| entering any ReLU that depends on parameters."""
    ref = ReferenceForward(graph, params, hyper)
    return float(min(np.abs(a).min() for a in ref.relu_args))


@dataclass
class GradientAudit:
    errors: dict[str, float]
    checked: dict[str, int]
    refined: dict[str, int]
    kink_margin: float
    h: float
    sampled: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def n_checked(self) -> int:
        return sum(self.checked.values())

    @property
    def n_refined(self) -> int:
        return sum(self.refined.values())


def gradient_audit(
    graph: WsiGraph,
    params: ModelParams,
    hyper: HyperParams,
    h: float = 1e-5,
    exhaustive: bool = False,
    sample_rows: int = 64,
    seed: int = 0,
    names=None,
    refine: bool = True,
) -> GradientAudit:
    """Relative error of tape gradients against central differences.

    Every coordinate of every parameter is checked, except that
    ``proj_W`` is checked on all columns for ``sample_rows`` seeded input
    rows unless ``exhaustive``.
    """
    loss_and_grads(graph, params, hyper)
    ref = ReferenceForward(graph, params, hyper)
    precise = None
    rng = np.random.default_rng(seed)
    errors, checked, refined, sampled = {}, {}, {}, []
    for name in names or list(params):
        t = params[name]
        if name == "proj_W" and not exhaustive and sample_rows < t.shape[0]:
            rows = np.sort(rng.choice(t.shape[0], size=sample_rows, replace=False))
            flat = (rows[:, None] * t.shape[1] + np.arange(t.shape[1])[None, :]).reshape(-1)
            sampled.append(name)
        else:
            flat = np.arange(t.data.size)
        analytic = t.grad.reshape(-1)[flat]
        err = ad.relative_errors(analytic, ref.central_differences(name, flat, h))
        redo = np.flatnonzero(err >= TOLERANCE) if refine else np.zeros(0, dtype=np.int64)
        if redo.size:
            if precise is None:
                precise = ReferenceForward(graph, params, hyper, dtype=np.longdouble)
            fine = precise.central_differences(name, flat[redo], h).astype(np.float64)
            err[redo] = ad.relative_errors(analytic[redo], fine)
        errors[name] = float(err.max())
        checked[name] = int(flat.shape[0])
        refined[name] = int(redo.size)
    return GradientAudit(errors, checked, refined, kink_margin(graph, params, hyper), h, sampled)


def make_audit_graph(seed: int = 0, n_nodes: int = 10, n_edges: int = 8, hyper: HyperParams | None = None) -> WsiGraph:
    """Small random graph with hand-placed directed edges and mixed weights."""
    hyper = hyper or HyperParams()
    rng = np.random.default_rng(seed)
    cells = rng.choice(25, size=n_nodes, replace=False)
    coords = np.stack([cells % 5, cells // 5], axis=1).astype(np.int64)
    pairs = [(i, j) for i in range(n_nodes) for j in range(n_nodes) if i != j]
    pick = rng.choice(len(pairs), size=n_edges, replace=False)
    edges = np.array(sorted(pairs[p] for p in pick), dtype=np.int64).reshape(-1, 2)
    return WsiGraph(
        wsi_id=f"audit-{seed}",
        coords=coords,
        node_features=rng.standard_normal((n_nodes, hyper.feature_dim)),
        positional=positional_encoding(coords, hyper.pe_dim, hyper.pe_normalized),
        edges=edges,
        node_weights=rng.integers(1, 5, size=n_nodes).astype(np.int64),
        label=int(rng.integers(0, 2)),
        patch_ids=[f"n{i}" for i in range(n_nodes)],
    )


def audit_setup(
    seed: int = 0,
    hyper: HyperParams | None = None,
    margin: float = KINK_MARGIN,
    loss_range: tuple[float, float] = (0.05, 5.0),
    max_tries: int = 500,
) -> tuple[WsiGraph, ModelParams]:
    """Seeded audit graph and parameters away from ReLU kinks and saturation.

    Graphs are drawn from ``seed, seed + 1, ...`` until no ReLU input lies
    within ``margin`` of 0 and the loss lies in ``loss_range``, so the
    result is reproducible for a given seed.
    """
    hyper = hyper or HyperParams()
    params = init_params(hyper)
    lo, hi = loss_range
    for attempt in range(max_tries):
        graph = make_audit_graph(seed + attempt, hyper=hyper)
        ref = ReferenceForward(graph, params, hyper)
        if lo <= ref.loss() <= hi and min(np.abs(a).min() for a in ref.relu_args) >= margin:
            return graph, params
    raise DataError(f"no audit graph with ReLU margin {margin} in {max_tries} tries")
