"""Training configuration with paper-default hyperparameters.

Precedence when assembling a config: CLI flag > config file > built-in
default. The config file is a flat JSON object keyed by field name.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class TrainConfig:
    # loss weights and schedule
    lambda_content: float = 100.0   # deblurring content weight
    lambda_caption: float = 5e-3    # captioning weight in the total loss
    lambda_tree: float = 10.0       # tree classification weight in the total loss
    critic_steps: int = 5           # critic updates per joint update
    lr: float = 1e-4
    epochs_flat: int = 150
    epochs_decay: int = 150
    epochs: int = 300
    gp_weight: float = 10.0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    # model shapes
    batch_size: int = 4
    image_size: int = 64
    backbone_channels: int = 16     # c: backbone feature map channels
    node_channels: int = 32         # c': tree node map channels
    node_feat_dim: int = 64         # pooled per-node feature size
    ngf: int = 32                   # generator width; coupling sees c'' = 2*ngf
    ndf: int = 32                   # critic width
    n_res_blocks: int = 9
    perceptual_channels: int = 32
    embed_dim: int = 128
    hidden_size: int = 256
    attn_dim: int = 64
    attend_over: str = "probs"      # attention input: node "probs" or "features"
    dropout: float = 0.1
    # data
    min_freq: int = 1
    max_disp: float = 15.0
    line_samples: int = 17
    caption_max_len: int = 16
    captions_per_image: int = 5
    # run control
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 100     # joint steps between periodic checkpoints
    perceptual_weights: str = ""    # optional exported feature-net weights

    def __post_init__(self):
        if self.lambda_content < 0 or self.lambda_caption < 0 or self.lambda_tree < 0:
            raise ValueError("loss weights must be non-negative")
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def build(cls, config_file=None, overrides: dict | None = None) -> "TrainConfig":
        """Defaults, updated by an optional JSON file, then CLI overrides."""
        values: dict = {}
        if config_file:
            path = Path(config_file)
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
            unknown = set(data) - set(cls.field_names())
            if unknown:
                raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
            values.update(data)
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls(**values)
