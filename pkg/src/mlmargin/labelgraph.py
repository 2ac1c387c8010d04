"""Label co-occurrence graph, graph attention over word embeddings, and the
channel-gate branch derived from them.

The branch is input-independent: it maps fixed class-word embeddings and a
fixed co-occurrence graph to a per-channel weight vector that gates backbone
features.  Because nothing here depends on the image, the whole branch can be
evaluated once, frozen to disk, and replayed at inference for the cost of one
multiply per channel per spatial position.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mlmargin import tensor as T
from mlmargin.tensor import ShapeError, Tensor

__all__ = [
    "GraphStructureError",
    "FrozenGateError",
    "GatParams",
    "build_correlation",
    "init_gat_params",
    "gat_forward",
    "gat_attention_maps",
    "channel_weights",
    "reweight_and_pool",
    "freeze_branch",
    "load_frozen_gate",
    "gate_flops",
    "load_embeddings",
    "save_embeddings",
]

# Additive mask value: exp(x - rowmax) underflows to exactly 0.0 for masked
# entries, so excluded neighbors get attention weight exactly zero.
_MASK_FILL = -1e30


class GraphStructureError(ValueError):
    """The label graph violates a structural requirement."""


class FrozenGateError(ValueError):
    """A frozen channel-gate file is missing, malformed, or corrupt."""


def build_correlation(annotations, num_classes: int, tau: float = 0.4, p: float = 0.2) -> np.ndarray:
    """Estimate, binarize, and reweight the label co-occurrence matrix.

    ``annotations`` is an iterable of per-sample label collections (set
    semantics; duplicates within a sample are ignored).  Entry (i, j) starts
    as the conditional frequency P(j present | i present), is kept as an edge
    when it reaches ``tau``, and the binary graph is then rescaled: each row
    with any neighbors spreads mass ``p`` uniformly over them and keeps
    ``1 - p`` on the diagonal; a row with no neighbors keeps its full unit
    self-loop.  Every class must occur at least once.
    """
    if num_classes < 2:
        raise GraphStructureError("need at least 2 classes")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"reweight factor p must lie in [0, 1), got {p}")
    occur = np.zeros(num_classes, dtype=np.int64)
    joint = np.zeros((num_classes, num_classes), dtype=np.int64)
    for sample in annotations:
        labels = sorted(set(int(c) for c in sample))
        for c in labels:
            if not 0 <= c < num_classes:
                raise GraphStructureError(f"label {c} outside [0, {num_classes})")
        for a_i, a in enumerate(labels):
            occur[a] += 1
            for b in labels[a_i + 1 :]:
                joint[a, b] += 1
                joint[b, a] += 1
    missing = np.flatnonzero(occur == 0)
    if missing.size:
        raise GraphStructureError(
            f"class {int(missing[0])} never occurs; conditional probabilities undefined"
        )
    cond = joint / occur[:, None]
    adj = (cond >= tau).astype(np.float64)
    np.fill_diagonal(adj, 1.0)

    z = np.zeros_like(adj)
    for i in range(num_classes):
        row = adj[i].copy()
        row[i] = 0.0
        neighbors = row.sum()
        if neighbors > 0:
            z[i] = p * row / neighbors
            z[i, i] = 1.0 - p
        else:
            z[i, i] = 1.0
    return z


@dataclass
class GatLayer:
    """One multi-head attention layer: per-head mixing matrix plus the two
    halves of the edge-scoring vector, stored rank-1 so the weight-decay
    policy leaves them alone."""

    w: list  # heads x Tensor(in_dim, out_dim)
    a_src: list  # heads x Tensor(out_dim,)
    a_dst: list  # heads x Tensor(out_dim,)
    concat: bool  # concat head outputs (hidden) vs average them (final)


@dataclass
class GatParams:
    layers: list
    alpha: float = 0.2

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.w)
            out.extend(layer.a_src)
            out.extend(layer.a_dst)
        return out


def init_gat_params(
    rng: np.random.Generator,
    in_dim: int,
    out_dim: int,
    hidden_dim: int = 32,
    heads: int = 4,
    alpha: float = 0.2,
) -> GatParams:
    """Two attention layers: heads concatenated after the first, averaged
    after the second so the output width is exactly ``out_dim``."""

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)

    def att_vec(dim):
        bound = np.sqrt(6.0 / (dim + 1))
        return Tensor(rng.uniform(-bound, bound, size=dim), requires_grad=True)

    first = GatLayer(
        w=[glorot(in_dim, hidden_dim) for _ in range(heads)],
        a_src=[att_vec(hidden_dim) for _ in range(heads)],
        a_dst=[att_vec(hidden_dim) for _ in range(heads)],
        concat=True,
    )
    second = GatLayer(
        w=[glorot(hidden_dim * heads, out_dim) for _ in range(heads)],
        a_src=[att_vec(out_dim) for _ in range(heads)],
        a_dst=[att_vec(out_dim) for _ in range(heads)],
        concat=False,
    )
    return GatParams(layers=[first, second], alpha=alpha)


def _attention_head(nodes: Tensor, w: Tensor, a_src: Tensor, a_dst: Tensor,
                    mask: np.ndarray, fill: np.ndarray, alpha: float, collect):
    z = T.matmul(nodes, w)
    f = z.shape[1]
    src = T.matmul(z, a_src.reshape((f, 1)))
    dst = T.matmul(z, a_dst.reshape((f, 1)))
    e = T.leaky_relu(src + dst.transpose(), alpha)
    att = T.softmax(e * mask + fill, axis=-1)
    if collect is not None:
        collect.append(att.data.copy())
    return T.matmul(att, z)


def _gat_run(embeddings, z_matrix: np.ndarray, params: GatParams, collect=None) -> Tensor:
    nodes = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    if nodes.ndim != 2:
        raise ShapeError(f"embeddings must be rank-2 (classes, features), got {nodes.shape}")
    k = nodes.shape[0]
    if z_matrix.shape != (k, k):
        raise ShapeError(f"graph matrix shape {z_matrix.shape} does not match {k} classes")
    mask = (z_matrix != 0).astype(np.float64)
    if np.any(mask.sum(axis=1) == 0):
        bad = int(np.flatnonzero(mask.sum(axis=1) == 0)[0])
        raise GraphStructureError(f"node {bad} has no neighbors and no self-loop")
    fill = _MASK_FILL * (1.0 - mask)

    h = nodes
    for li, layer in enumerate(params.layers):
        heads = [
            _attention_head(h, w, a_s, a_d, mask, fill, params.alpha, collect)
            for w, a_s, a_d in zip(layer.w, layer.a_src, layer.a_dst)
        ]
        if layer.concat:
            h = T.concat(heads, axis=1)
        else:
            acc = heads[0]
            for extra in heads[1:]:
                acc = acc + extra
            h = acc * (1.0 / len(heads))
        if li < len(params.layers) - 1:
            h = T.elu(h)
    return h.transpose()  # (out_dim, classes)


def gat_forward(embeddings, z_matrix: np.ndarray, params: GatParams) -> Tensor:
    """Run the attention layers over the label graph.

    Output is (channels, classes): one column of channel evidence per class.
    Attention for node i is a softmax over exactly the nonzero entries of
    row i of ``z_matrix``; everything else receives weight exactly 0.
    """
    return _gat_run(embeddings, z_matrix, params)


def gat_attention_maps(embeddings, z_matrix: np.ndarray, params: GatParams) -> list:
    """Per-layer, per-head attention matrices (rows sum to 1 on neighborhoods)."""
    maps: list = []
    _gat_run(embeddings, z_matrix, params, collect=maps)
    return maps


def channel_weights(h: Tensor) -> Tensor:
    """Gate vector: sigmoid of the strongest per-channel evidence across classes."""
    if h.ndim != 2:
        raise ShapeError(f"expected (channels, classes) input, got {h.shape}")
    return T.sigmoid(h.amax(axis=1))


def reweight_and_pool(f: Tensor, w) -> Tensor:
    """Gate channels, then sum average- and max-pooled gated features.

    Per channel c: out_c = w_c * avg(f_c) + w_c * max(f_c).  Accepts
    (channels, h, w) or a leading batch axis.
    """
    f = f if isinstance(f, Tensor) else Tensor(f)
    w = w if isinstance(w, Tensor) else Tensor(w)
    channels = f.shape[-3] if f.ndim >= 3 else None
    if f.ndim not in (3, 4):
        raise ShapeError(f"expected rank-3 or rank-4 features, got {f.shape}")
    if w.shape != (channels,):
        raise ShapeError(f"gate length {w.shape} does not match {channels} channels")
    pooled = T.pool(f, "avg") + T.pool(f, "max")
    return pooled * w


def gate_flops(channels: int, spatial_positions: int) -> int:
    """Multiply count the frozen gate adds to inference: one per channel per
    spatial position, and nothing else."""
    return channels * spatial_positions


def freeze_branch(embeddings, z_matrix: np.ndarray, params: GatParams, path) -> np.ndarray:
    """Evaluate the branch once and persist the gate vector.

    The JSON stores every float through repr, which round-trips float64
    exactly, plus a checksum of the raw float64 bytes; a reloaded gate is
    bitwise identical to the live one.
    """
    w = channel_weights(gat_forward(embeddings, z_matrix, params)).data
    payload = {
        "s": int(w.shape[0]),
        "weights": [float(v) for v in w],
        "checksum": hashlib.sha256(w.astype(np.float64).tobytes()).hexdigest(),
    }
    Path(path).write_text(json.dumps(payload, indent=1))
    return w


def load_frozen_gate(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FrozenGateError(f"frozen gate file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FrozenGateError(f"frozen gate file is not valid JSON: {e}") from e
    try:
        s = int(payload["s"])
        w = np.asarray([float(v) for v in payload["weights"]], dtype=np.float64)
        checksum = payload["checksum"]
    except (KeyError, TypeError, ValueError) as e:
        raise FrozenGateError(f"frozen gate file missing or malformed field: {e}") from e
    if w.shape != (s,):
        raise FrozenGateError(f"gate length {w.shape[0]} does not match declared s={s}")
    actual = hashlib.sha256(w.tobytes()).hexdigest()
    if actual != checksum:
        raise FrozenGateError("frozen gate checksum mismatch; file corrupt or tampered")
    return w


def save_embeddings(path, class_names, vectors: np.ndarray) -> None:
    """One line per class: `name v1 v2 ... vN` (plain-text word-vector layout)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(class_names) != vectors.shape[0]:
        raise ShapeError("one embedding row per class name required")
    lines = []
    for name, row in zip(class_names, vectors):
        if any(ch.isspace() for ch in name):
            raise ValueError(f"class name {name!r} must not contain whitespace")
        lines.append(name + " " + " ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_embeddings(path, class_names) -> np.ndarray:
    """Load per-class word vectors; every class must be present, since labels
    without usable names cannot drive the graph branch at all."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(
            f"embeddings file not found: {path}; classes without word embeddings "
            "(unnamed labels) cannot use the label-graph branch"
        )
    table: dict[str, np.ndarray] = {}
    width = None
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        name, values = parts[0], parts[1:]
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise ValueError(f"embeddings line {ln}: expected {width} values, got {len(values)}")
        try:
            table[name] = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError as e:
            raise ValueError(f"embeddings line {ln}: {e}") from e
    missing = [n for n in class_names if n not in table]
    if missing:
        raise KeyError(
            f"no word embedding for class {missing[0]!r}; unnamed labels "
            "cannot use the label-graph branch"
        )
    return np.stack([table[n] for n in class_names])
