"""Named, seeded finite-difference audit targets.

Each target builds a scalar-valued function plus the tensors it is
differentiated against, sized small enough that central differences over
every element stay cheap.  Random draws avoid the known non-smooth points
(probability clipping in the focal loss, exact zeros under ReLU) so the
finite-difference comparison measures gradient correctness, not kink
crossings.
"""

from __future__ import annotations

import numpy as np

from mlmargin import tensor as T
from mlmargin.backbone import BackboneConfig, extract, init_backbone_params
from mlmargin.decoder import DecoderConfig, decode, init_classifier_bank, init_decoder_params, project_logits
from mlmargin.labelgraph import channel_weights, gat_forward, init_gat_params
from mlmargin.losses import AamConfig, AslConfig, aam_loss, asl_loss
from mlmargin.tensor import GradcheckReport, Tensor, gradcheck

__all__ = ["TARGETS", "MODULE_TARGETS", "build_target", "run_target"]

TARGETS = ("aam_loss", "asl_loss", "gat_forward", "decode", "extract", "full_head")

# what the --module flag of the audit subcommand maps onto
MODULE_TARGETS = {
    "losses": ("aam_loss", "asl_loss"),
    "labelgraph": ("gat_forward",),
    "decoder": ("decode",),
    "backbone": ("extract",),
    "model": ("full_head",),
    "all": TARGETS,
}

# tolerance per target: single blocks at 1e-5, the deep composition at 1e-4
TARGET_TOL = {name: 1e-5 for name in TARGETS}
TARGET_TOL["full_head"] = 1e-4


def _ring(k: int) -> np.ndarray:
    z = np.eye(k)
    for i in range(k):
        z[i, (i + 1) % k] = 0.5
        z[i, (i - 1) % k] = 0.25
    return z


def _coeffs(rng, shape):
    return Tensor(rng.normal(size=shape))


def _build_aam(rng):
    cos = Tensor(rng.uniform(-0.9, 0.9, size=(3, 4)), requires_grad=True)
    y = (rng.random((3, 4)) < 0.5).astype(np.float64)
    cfg = AamConfig(s=9.0, m=0.15, k=0.6, gamma_pos=1.0, gamma_neg=2.0)
    return lambda c: aam_loss(c, y, cfg), [cos]


def _build_asl(rng):
    # logits in (-2, 2.5): probabilities stay clear of the clip kink at ~0.05
    logits = Tensor(rng.uniform(-2.0, 2.5, size=(3, 4)), requires_grad=True)
    y = (rng.random((3, 4)) < 0.5).astype(np.float64)
    cfg = AslConfig(gamma_pos=1.0, gamma_neg=3.0, clip=0.05)
    return lambda x: asl_loss(x, y, cfg), [logits]


def _build_gat(rng):
    k, feat = 5, 6
    emb = Tensor(rng.normal(size=(k, feat)), requires_grad=True)
    z = _ring(k)
    params = init_gat_params(rng, in_dim=feat, out_dim=6, hidden_dim=4, heads=2)
    coeffs = _coeffs(rng, (6, k))

    def fn(e, *_):
        return (gat_forward(e, z, params) * coeffs).sum()

    return fn, [emb] + params.parameters()


def _build_decode(rng):
    cfg = DecoderConfig(num_classes=5, embed_dim=8, heads=2, ff_dim=12, groups=3)
    params = init_decoder_params(rng, cfg, in_channels=6)
    f = Tensor(rng.normal(size=(2, 6, 2, 2)), requires_grad=True)
    coeffs = _coeffs(rng, (2, 8, 3))

    def fn(x, *_):
        return (decode(x, cfg, params) * coeffs).sum()

    return fn, [f] + params.parameters()


def _build_extract(rng):
    cfg = BackboneConfig(in_channels=2, stage_widths=(3, 4))
    params = init_backbone_params(rng, cfg)
    x = Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
    coeffs = _coeffs(rng, (1, 4, 2, 2))

    def fn(inp, *_):
        return (extract(inp, cfg, params) * coeffs).sum()

    return fn, [x] + params.parameters()


def _build_full_head(rng):
    """Backbone -> graph gate -> decoder -> cosine bank -> margin loss."""
    k = 4
    bb_cfg = BackboneConfig(in_channels=2, stage_widths=(3, 4))
    bb = init_backbone_params(rng, bb_cfg)
    dec_cfg = DecoderConfig(num_classes=k, embed_dim=6, heads=2, ff_dim=10, groups=2)
    dec = init_decoder_params(rng, dec_cfg, in_channels=4)
    bank = init_classifier_bank(rng, k, 6, normalize=True, num_groups=2)
    gat = init_gat_params(rng, in_dim=5, out_dim=4, hidden_dim=4, heads=2)
    emb = Tensor(rng.normal(size=(k, 5)), requires_grad=True)
    z = _ring(k)
    x = Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
    y = (rng.random((1, k)) < 0.5).astype(np.float64)
    loss_cfg = AamConfig(s=7.0, m=0.1, k=0.65, gamma_pos=1.0, gamma_neg=2.0)

    def fn(inp, e, *_):
        f = extract(inp, bb_cfg, bb)
        gate = channel_weights(gat_forward(e, z, gat))
        gated = f * gate.reshape((gate.shape[0], 1, 1))
        scores = project_logits(decode(gated, dec_cfg, dec), bank)
        return aam_loss(scores, y, loss_cfg)

    inputs = [x, emb] + bb.parameters() + gat.parameters() + dec.parameters() + bank.parameters()
    return fn, inputs


_BUILDERS = {
    "aam_loss": _build_aam,
    "asl_loss": _build_asl,
    "gat_forward": _build_gat,
    "decode": _build_decode,
    "extract": _build_extract,
    "full_head": _build_full_head,
}


def build_target(name: str, seed: int):
    """Return (fn, inputs, tol) for a named audit target."""
    if name not in _BUILDERS:
        raise ValueError(f"unknown audit target {name!r}; choose from {TARGETS}")
    fn, inputs = _BUILDERS[name](np.random.default_rng([seed, hash_name(name)]))
    return fn, inputs, TARGET_TOL[name]


def hash_name(name: str) -> int:
    """Stable small integer per target so seeds never collide across targets."""
    return sum(ord(ch) for ch in name) % 1009


def run_target(name: str, seed: int = 0, step: float = 1e-6) -> GradcheckReport:
    fn, inputs, tol = build_target(name, seed)
    return gradcheck(fn, inputs, tol=tol, step=step)
