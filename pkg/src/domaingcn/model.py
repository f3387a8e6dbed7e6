"""The graph classifier: projection, residual softmax-aggregation layers,
attention pooling and a two-class linear head."""

from __future__ import annotations

import io
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import RowGroups, Tape, Tensor
from .config import HyperParams
from .errors import DimensionError, FormatError, IOFailure
from .graph import WsiGraph, positional_encoding
from .weights import apply_weights

CHECKPOINT_VERSION = 1


class ModelParams:
    """Named trainable matrices. Biases are stored as 1 x n rows."""

    def __init__(self, tensors: dict[str, Tensor], layers: int):
        self.tensors = tensors
        self.layers = layers

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(t.data, requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()},
            self.layers,
        )

    def n_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def equal(self, other: "ModelParams") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(t.data, other.tensors[k].data) for k, t in self.tensors.items()
        )


def param_shapes(hyper: HyperParams) -> dict[str, tuple[int, int]]:
    width = hyper.width
    shapes = {"proj_W": (hyper.feature_dim, hyper.hidden), "proj_b": (1, hyper.hidden)}
    for l in range(hyper.layers):
        shapes[f"layer{l}.mlp1_W"] = (width, width)
        shapes[f"layer{l}.mlp1_b"] = (1, width)
        shapes[f"layer{l}.mlp2_W"] = (width, width)
        shapes[f"layer{l}.mlp2_b"] = (1, width)
    shapes["attn_V"] = (width, hyper.hidden)
    shapes["attn_w"] = (hyper.hidden, 1)
    shapes["head_W"] = (width, 2)
    shapes["head_b"] = (1, 2)
    return shapes


def init_params(hyper: HyperParams, seed: int | None = None) -> ModelParams:
    """Glorot-uniform matrices, zero biases, drawn in a fixed name order."""
    rng = np.random.default_rng(hyper.seed if seed is None else seed)
    tensors = {}
    for name, (fan_in, fan_out) in param_shapes(hyper).items():
        if name.endswith("_b"):
            data = np.zeros((fan_in, fan_out))
        else:
            a = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-a, a, size=(fan_in, fan_out))
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(tensors, hyper.layers)


def project_and_concat(x_uni: Tensor, x_pe: Tensor, params: ModelParams) -> Tensor:
    W = params["proj_W"]
    if x_uni.shape[1] != W.shape[0] or x_uni.shape[0] != x_pe.shape[0]:
        raise DimensionError(
            f"project_and_concat: features {x_uni.shape}, positional {x_pe.shape}, projection {W.shape}"
        )
    return ad.concat_cols(ad.add_row(ad.matmul(x_uni, W), params["proj_b"]), x_pe)


class EdgeIndex:
    """Edge bookkeeping reused by every layer of one forward pass."""

    def __init__(self, edges: np.ndarray, n_nodes: int):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
            raise DimensionError(f"edges reference nodes outside 0..{n_nodes - 1}")
        self.src = edges[:, 0]
        self.dst = edges[:, 1]
        self.n_nodes = n_nodes
        # softmax runs over nodes that have neighbours; sums land on all N
        present, local = np.unique(self.src, return_inverse=True)
        self.softmax_groups = RowGroups(local.reshape(-1), present.shape[0])
        self.sum_groups = RowGroups(self.src, n_nodes)


def message_passing_layer(
    x: Tensor,
    edges,
    params: ModelParams,
    layer: int,
    epsilon: float,
    message_weights=None,
) -> Tensor:
    """``x_i + MLP(x_i + sum_j softmax_j(m_j) * m_j)`` with ``m_j = relu(x_j) + eps``.

    The softmax runs over each node's neighbours, separately per channel.
    Nodes without neighbours aggregate zero. ``message_weights`` (constants)
    scale each node's outgoing message.
    """
    idx = edges if isinstance(edges, EdgeIndex) else EdgeIndex(edges, x.shape[0])
    msg = ad.shift(ad.relu(x), epsilon)
    if message_weights is not None:
        msg = ad.scale_rows(msg, message_weights)
    if idx.src.shape[0]:
        m = ad.gather_rows(msg, idx.dst)
        alpha = ad.group_softmax(m, idx.softmax_groups)
        agg = ad.segment_sum(ad.mul(alpha, m), idx.sum_groups)
        h = ad.add(x, agg)
    else:
        h = x
    p = f"layer{layer}."
    z = ad.relu(ad.add_row(ad.matmul(h, params[p + "mlp1_W"]), params[p + "mlp1_b"]))
    z = ad.add_row(ad.matmul(z, params[p + "mlp2_W"]), params[p + "mlp2_b"])
    return ad.add(x, z)


def attention_pool(h: Tensor, params: ModelParams) -> tuple[Tensor, np.ndarray]:
    """Softmax attention over all nodes; returns (1 x width embedding, scores)."""
    s = ad.matmul(ad.tanh(ad.matmul(h, params["attn_V"])), params["attn_w"])
    a = ad.group_softmax(s, np.zeros(h.shape[0], dtype=np.intp))
    emb = ad.matmul(ad.transpose(a), h)
    return emb, a.data[:, 0].copy()


def graph_positional(graph: WsiGraph, hyper: HyperParams) -> np.ndarray:
    if graph.positional.shape[1] == hyper.pe_dim:
        return graph.positional
    return positional_encoding(graph.coords, hyper.pe_dim, hyper.pe_normalized)


def node_embeddings(graph: WsiGraph, params: ModelParams, hyper: HyperParams) -> Tensor:
    """Node states after the last message-passing layer."""
    x = project_and_concat(Tensor(graph.node_features), Tensor(graph_positional(graph, hyper)), params)
    message_weights = None
    if hyper.domain_weights_enabled:
        if hyper.weight_mode == "scale_input":
            x = apply_weights(x, graph.node_weights)
        else:
            message_weights = graph.node_weights
    idx = EdgeIndex(graph.edges, graph.n_nodes)
    for l in range(params.layers):
        x = message_passing_layer(x, idx, params, l, hyper.epsilon, message_weights)
    return x


def forward(graph: WsiGraph, params: ModelParams, hyper: HyperParams) -> tuple[Tensor, np.ndarray]:
    """Logits (1 x 2) and per-node attention scores for one slide."""
    h = node_embeddings(graph, params, hyper)
    emb, scores = attention_pool(h, params)
    logits = ad.add_row(ad.matmul(emb, params["head_W"]), params["head_b"])
    return logits, scores


def loss_and_grads(graph: WsiGraph, params: ModelParams, hyper: HyperParams) -> tuple[float, Tensor]:
    """Cross-entropy for one slide; fills ``.grad`` on every parameter."""
    with Tape() as tape:
        logits, _ = forward(graph, params, hyper)
        loss = ad.cross_entropy_with_logits(logits, graph.label)
    tape.backward(loss)
    return loss.item(), logits


def loss_value(graph: WsiGraph, params: ModelParams, hyper: HyperParams) -> float:
    logits, _ = forward(graph, params, hyper)
    return ad.cross_entropy_with_logits(logits, graph.label).item()


def predict_proba(graph: WsiGraph, params: ModelParams, hyper: HyperParams) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities (2,) and attention scores, no tape."""
    logits, scores = forward(graph, params, hyper)
    z = logits.data[0] - logits.data[0].max()
    p = np.exp(z)
    return p / p.sum(), scores


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ModelParams, hyper: HyperParams) -> None:
    """Write every parameter matrix plus the hyperparameters to one ``.npz``."""
    header = {"format": "domaingcn-checkpoint", "version": CHECKPOINT_VERSION, "hyper": asdict(hyper),
              "names": list(params.tensors), "shapes": [list(t.shape) for t in params.tensors.values()]}
    arrays = {f"param:{k}": t.data for k, t in params.items()}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc.strerror}") from exc


def load_checkpoint(path: str | Path) -> tuple[ModelParams, HyperParams]:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["header"]).decode())
            arrays = {k: z[k] for k in z.files}
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a checkpoint ({exc})") from exc
    if header.get("format") != "domaingcn-checkpoint" or header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format/version")
    hyper = HyperParams(**header["hyper"])
    expected = param_shapes(hyper)
    tensors = {}
    for name, shape in zip(header["names"], header["shapes"]):
        data = arrays[f"param:{name}"]
        if tuple(shape) != data.shape or expected.get(name) != data.shape:
            raise FormatError(f"{path}: parameter {name} has shape {data.shape}, expected {expected.get(name)}")
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    if set(tensors) != set(expected):
        raise FormatError(f"{path}: parameter set does not match hyperparameters")
    return ModelParams(tensors, hyper.layers), hyper
