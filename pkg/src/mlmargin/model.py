"""Full classifier: backbone features, one of four heads, and a score bank.

Heads:
  plain        global avg+max pooled features, linear bank
  gat          graph-gated pooled features, linear bank
  decoder      cross-attention group queries, grouped bank
  decoder+gat  graph-gated features into the decoder

With the angular-margin loss the bank runs in cosine mode, so scores are
cosines in [-1, 1]; with the focal loss it emits raw affine logits.  The
graph gate can run live (recomputed through the attention layers, counted in
``graph_evals``) or frozen (a constant vector loaded from disk; no graph
computation at all).
"""

from __future__ import annotations

import numpy as np

from mlmargin import labelgraph
from mlmargin import tensor as T
from mlmargin.backbone import BackboneParams, extract, init_backbone_params
from mlmargin.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mlmargin.config import RunConfig
from mlmargin.decoder import (
    decode,
    init_classifier_bank,
    init_decoder_params,
    project_logits,
)
from mlmargin.losses import aam_loss, asl_loss
from mlmargin.tensor import ShapeError, Tensor

__all__ = ["MultilabelClassifier", "ModelStateError"]


class ModelStateError(ValueError):
    """The model is asked to do something its configuration cannot support."""


class MultilabelClassifier:
    def __init__(self, cfg: RunConfig, num_classes: int, rng: np.random.Generator,
                 annotations=None, embeddings=None, z_matrix=None):
        self.cfg = cfg
        self.num_classes = num_classes
        self.backbone_cfg = cfg.backbone_config()
        self.backbone_params: BackboneParams = init_backbone_params(rng, self.backbone_cfg)
        s = self.backbone_cfg.out_channels

        self.decoder_cfg = None
        self.decoder_params = None
        if cfg.uses_decoder():
            self.decoder_cfg = cfg.decoder_config(num_classes)
            self.decoder_params = init_decoder_params(rng, self.decoder_cfg, in_channels=s)
            bank_dim, bank_groups = self.decoder_cfg.embed_dim, self.decoder_cfg.groups
        else:
            bank_dim, bank_groups = s, 1
        self.bank = init_classifier_bank(
            rng, num_classes, bank_dim,
            normalize=(cfg.loss_kind == "aam"),
            num_groups=bank_groups,
        )

        self.gat_params = None
        self.graph_embeddings = None
        self.z_matrix = None
        self.frozen_gate: np.ndarray | None = None
        self.graph_evals = 0
        if cfg.uses_graph():
            if embeddings is None:
                raise ModelStateError(
                    "graph heads need per-class word embeddings; classes without them "
                    "(unnamed labels) cannot use the label-graph branch"
                )
            embeddings = np.asarray(embeddings, dtype=np.float64)
            if embeddings.shape[0] != num_classes:
                raise ShapeError(
                    f"embeddings rows {embeddings.shape[0]} do not match {num_classes} classes"
                )
            if z_matrix is not None:
                self.z_matrix = np.asarray(z_matrix, dtype=np.float64)
            elif annotations is not None:
                self.z_matrix = labelgraph.build_correlation(
                    annotations, num_classes, tau=cfg.graph_tau, p=cfg.graph_p
                )
            else:
                raise ModelStateError("graph heads need annotations or a prebuilt graph matrix")
            self.graph_embeddings = embeddings
            self.gat_params = labelgraph.init_gat_params(
                rng, in_dim=embeddings.shape[1], out_dim=s,
                hidden_dim=cfg.graph_hidden_dim, heads=cfg.graph_heads,
            )

    # -- parameters -----------------------------------------------------------

    def named_parameters(self) -> list:
        out = []
        for i, (f, b) in enumerate(zip(self.backbone_params.filters, self.backbone_params.biases)):
            out.append((f"backbone.filters.{i}", f))
            out.append((f"backbone.biases.{i}", b))
        if self.decoder_params is not None:
            d = self.decoder_params
            out += [("decoder.queries", d.queries), ("decoder.w_q", d.w_q),
                    ("decoder.w_k", d.w_k), ("decoder.w_v", d.w_v), ("decoder.w_o", d.w_o),
                    ("decoder.ff_w1", d.ff_w1), ("decoder.ff_b1", d.ff_b1),
                    ("decoder.ff_w2", d.ff_w2), ("decoder.ff_b2", d.ff_b2)]
        out += [("bank.weights", self.bank.weights), ("bank.bias", self.bank.bias)]
        if self.gat_params is not None:
            for li, layer in enumerate(self.gat_params.layers):
                for hi, (w, a_s, a_d) in enumerate(zip(layer.w, layer.a_src, layer.a_dst)):
                    out.append((f"gat.layers.{li}.w.{hi}", w))
                    out.append((f"gat.layers.{li}.a_src.{hi}", a_s))
                    out.append((f"gat.layers.{li}.a_dst.{hi}", a_d))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    # -- forward --------------------------------------------------------------

    def _gate(self) -> Tensor:
        if self.frozen_gate is not None:
            return Tensor(self.frozen_gate)
        self.graph_evals += 1
        h = labelgraph.gat_forward(self.graph_embeddings, self.z_matrix, self.gat_params)
        return labelgraph.channel_weights(h)

    def scores(self, x) -> Tensor:
        """Class scores: cosines under the margin loss, raw logits otherwise.
        Accepts (C, H, W) or (B, C, H, W); returns (K,) or (B, K)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        f = extract(x, self.backbone_cfg, self.backbone_params)
        kind = self.cfg.head_kind
        if kind == "plain":
            v = T.pool(f, "avg") + T.pool(f, "max")
            v = v.reshape(v.shape + (1,))
        elif kind == "gat":
            v = labelgraph.reweight_and_pool(f, self._gate())
            v = v.reshape(v.shape + (1,))
        elif kind == "decoder":
            v = decode(f, self.decoder_cfg, self.decoder_params)
        else:  # decoder+gat
            gate = self._gate()
            gated = f * gate.reshape((gate.shape[0], 1, 1))
            v = decode(gated, self.decoder_cfg, self.decoder_params)
        return project_logits(v, self.bank)

    def loss(self, scores: Tensor, targets) -> Tensor:
        if self.cfg.loss_kind == "aam":
            return aam_loss(scores, targets, self.cfg.aam_config())
        return asl_loss(scores, targets, self.cfg.asl_config())

    def predict_scores(self, x) -> np.ndarray:
        return self.scores(x).data

    def predict_proba(self, x) -> np.ndarray:
        """Per-class probabilities: the margin loss's positive probability
        sigmoid(s * (cos - m)), or plain sigmoid of the logit."""
        raw = self.predict_scores(x)
        if self.cfg.loss_kind == "aam":
            z = self.cfg.loss_s * (raw - self.cfg.loss_m)
        else:
            z = raw
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        e = np.exp(z[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    # -- graph-branch freezing ------------------------------------------------

    def _require_graph(self):
        if not self.cfg.uses_graph():
            raise ModelStateError(f"head {self.cfg.head_kind!r} has no graph branch")

    def freeze_gate(self, path) -> np.ndarray:
        """Evaluate the graph branch once and persist the gate vector."""
        self._require_graph()
        return labelgraph.freeze_branch(self.graph_embeddings, self.z_matrix,
                                        self.gat_params, path)

    def use_frozen_gate(self, source) -> None:
        """Adopt a frozen gate (path or array); later forwards skip the graph."""
        self._require_graph()
        if isinstance(source, (str,)) or hasattr(source, "__fspath__"):
            gate = labelgraph.load_frozen_gate(source)
        else:
            gate = np.asarray(source, dtype=np.float64)
        if gate.shape != (self.backbone_cfg.out_channels,):
            raise ShapeError(
                f"gate length {gate.shape} does not match {self.backbone_cfg.out_channels} channels"
            )
        self.frozen_gate = gate

    def unfreeze_gate(self) -> None:
        self.frozen_gate = None

    # -- checkpoint plumbing ---------------------------------------------------

    def state_arrays(self) -> dict:
        arrays = {name: p.data for name, p in self.named_parameters()}
        if self.cfg.uses_graph():
            arrays["graph.z_matrix"] = self.z_matrix
            arrays["graph.embeddings"] = self.graph_embeddings
        return arrays

    def load_state_arrays(self, arrays: dict) -> None:
        for name, p in self.named_parameters():
            if name not in arrays:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"parameter {name!r} shape {arr.shape} does not match model {p.data.shape}"
                )
            p.data = arr.astype(np.float64).copy()
        if self.cfg.uses_graph():
            if "graph.z_matrix" in arrays:
                self.z_matrix = arrays["graph.z_matrix"].copy()
            if "graph.embeddings" in arrays:
                self.graph_embeddings = arrays["graph.embeddings"].copy()

    def save(self, path, extra_arrays: dict | None = None, meta: dict | None = None) -> None:
        arrays = self.state_arrays()
        if extra_arrays:
            arrays.update(extra_arrays)
        full_meta = {
            "config": self.cfg.to_flat_dict(),
            "num_classes": self.num_classes,
        }
        if meta:
            full_meta.update(meta)
        save_checkpoint(path, arrays, full_meta)

    @classmethod
    def from_checkpoint(cls, path) -> tuple:
        """Rebuild a model from a checkpoint; returns (model, arrays, meta)."""
        arrays, meta = load_checkpoint(path)
        try:
            cfg = RunConfig.from_flat_dict(meta["config"])
            num_classes = int(meta["num_classes"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"checkpoint meta missing field: {e}") from e
        rng = np.random.default_rng(cfg.seed)
        if cfg.uses_graph():
            if "graph.embeddings" not in arrays or "graph.z_matrix" not in arrays:
                raise CheckpointError("checkpoint for a graph head lacks graph state")
            model = cls(cfg, num_classes, rng,
                        embeddings=arrays["graph.embeddings"],
                        z_matrix=arrays["graph.z_matrix"])
        else:
            model = cls(cfg, num_classes, rng)
        model.load_state_arrays(arrays)
        return model, arrays, meta
