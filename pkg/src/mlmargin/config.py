"""Run configuration: one flat JSON object with dotted keys.

Every knob of a training run lives here, grouped by dotted prefix
(``loss.s``, ``optim.max_lr``, ...).  Presets bundle the scale, learning
rate, and focusing exponents that work for different dataset shapes; the
shared defaults (margin 0.0, k 0.7, EMA decay 0.9997, SAM rho 0.05) are the
same across presets.  The only environment override honored is
MLMARGIN_OUT for the output directory.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from mlmargin.backbone import BackboneConfig
from mlmargin.decoder import DecoderConfig
from mlmargin.losses import AamConfig, AslConfig
from mlmargin.optim import OneCycleConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "save_config", "PRESETS"]

HEAD_KINDS = ("plain", "gat", "decoder", "decoder+gat")
LOSS_KINDS = ("aam", "asl")


class ConfigError(ValueError):
    """A run configuration file or value is invalid."""


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"

    backbone_in_channels: int = 3
    backbone_stage_widths: tuple = (16, 32)

    head_kind: str = "decoder"
    head_embed_dim: int = 64
    head_heads: int = 4
    head_ff_dim: int = 128
    head_groups: int = 0  # 0 = min(100, num_classes)

    graph_tau: float = 0.4
    graph_p: float = 0.2
    graph_hidden_dim: int = 32
    graph_heads: int = 4
    graph_embeddings: str | None = None

    loss_kind: str = "aam"
    loss_s: float = 23.0
    loss_m: float = 0.0
    loss_k: float = 0.7
    loss_gamma_pos: float = 0.0
    loss_gamma_neg: float = 1.0
    loss_swap_focusing: bool = False
    loss_clip: float = 0.05

    optim_max_lr: float = 0.007
    optim_rho: float = 0.05
    optim_momentum: float = 0.9
    optim_weight_decay: float = 1e-4
    optim_epochs: int = 50
    optim_batch_size: int = 64

    schedule_warmup_frac: float = 0.3
    schedule_div_initial: float = 25.0
    schedule_div_final: float = 1e4

    ema_decay: float = 0.9997

    early_stop_patience: int = 5
    early_stop_beta: float = 0.9
    early_stop_enabled: bool = True

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head.kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss.kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        self.backbone_stage_widths = tuple(int(w) for w in self.backbone_stage_widths)

    # -- derived sub-configs -------------------------------------------------

    def aam_config(self) -> AamConfig:
        return AamConfig(
            s=self.loss_s, m=self.loss_m, k=self.loss_k,
            gamma_pos=self.loss_gamma_pos, gamma_neg=self.loss_gamma_neg,
            swap_focusing=self.loss_swap_focusing,
        )

    def asl_config(self) -> AslConfig:
        return AslConfig(gamma_pos=self.loss_gamma_pos, gamma_neg=self.loss_gamma_neg,
                         clip=self.loss_clip)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(in_channels=self.backbone_in_channels,
                              stage_widths=self.backbone_stage_widths)

    def decoder_config(self, num_classes: int) -> DecoderConfig:
        return DecoderConfig(
            num_classes=num_classes,
            embed_dim=self.head_embed_dim,
            heads=self.head_heads,
            ff_dim=self.head_ff_dim,
            groups=self.head_groups or min(100, num_classes),
        )

    def onecycle_config(self, total_steps: int) -> OneCycleConfig:
        return OneCycleConfig(
            max_lr=self.optim_max_lr,
            total_steps=total_steps,
            warmup_frac=self.schedule_warmup_frac,
            div_initial=self.schedule_div_initial,
            div_final=self.schedule_div_final,
        )

    def uses_graph(self) -> bool:
        return self.head_kind in ("gat", "decoder+gat")

    def uses_decoder(self) -> bool:
        return self.head_kind in ("decoder", "decoder+gat")

    # -- flat dotted-key serialization ----------------------------------------

    def to_flat_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[_field_to_key(f.name)] = value
        return out

    @classmethod
    def from_flat_dict(cls, payload: dict) -> "RunConfig":
        known = {_field_to_key(f.name): f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in payload.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[known[key]] = value
        return cls(**kwargs)


_GROUPS = ("backbone", "head", "graph", "loss", "optim", "schedule", "ema", "early_stop")


def _field_to_key(name: str) -> str:
    for g in sorted(_GROUPS, key=len, reverse=True):
        prefix = g + "_"
        if name.startswith(prefix):
            return f"{g}.{name[len(prefix):]}"
    return name


PRESETS: dict = {
    # scale / lr / focusing exponents tuned per dataset shape; margin, k,
    # EMA decay, and rho are shared
    "coco-style": {"loss.kind": "aam", "loss.s": 23.0, "optim.max_lr": 0.007,
                   "loss.gamma_neg": 1.0, "loss.gamma_pos": 0.0},
    "voc-style": {"loss.kind": "aam", "loss.s": 17.0, "optim.max_lr": 0.005,
                  "loss.gamma_neg": 2.0, "loss.gamma_pos": 1.0},
    "nus-style": {"loss.kind": "aam", "loss.s": 23.0, "optim.max_lr": 0.009,
                  "loss.gamma_neg": 2.0, "loss.gamma_pos": 1.0},
    "vg500-style": {"loss.kind": "aam", "loss.s": 25.0, "optim.max_lr": 0.005,
                    "loss.gamma_neg": 1.0, "loss.gamma_pos": 0.0},
    "asl-default": {"loss.kind": "asl", "optim.max_lr": 0.0001,
                    "loss.gamma_neg": 4.0, "loss.gamma_pos": 0.0, "loss.clip": 0.05},
}


def preset_config(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    flat = RunConfig().to_flat_dict()
    flat.update(PRESETS[name])
    flat.update(overrides)
    return RunConfig.from_flat_dict(flat)


def load_config(path) -> RunConfig:
    """Read a flat dotted-key JSON config; MLMARGIN_OUT overrides out_dir."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object of dotted keys")
    if "preset" in payload:
        name = payload.pop("preset")
        flat = RunConfig().to_flat_dict()
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
        flat.update(PRESETS[name])
        flat.update(payload)
        payload = flat
    cfg = RunConfig.from_flat_dict(payload)
    env_out = os.environ.get("MLMARGIN_OUT")
    if env_out:
        cfg.out_dir = env_out
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_flat_dict(), indent=1, sort_keys=True))
