"""Seeded initialization and small torch helpers shared by the model modules."""

from __future__ import annotations

import torch
from torch import nn

from .seeding import derive_seed

__all__ = ["derive_seed", "init_module", "seeded_dropout", "to_tensor", "to_image"]


def init_module(module: nn.Module, seed: int) -> None:
    """Deterministic init: Kaiming-uniform (fan-in) weights, zero biases.

    Parameters are visited in named order so the same seed always produces
    the same values regardless of construction history.
    """
    gen = torch.Generator().manual_seed(seed)
    for _, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if param.dim() >= 2:
                nn.init.kaiming_uniform_(param, mode="fan_in",
                                         nonlinearity="relu", generator=gen)
            else:
                param.zero_()


def seeded_dropout(x: torch.Tensor, p: float,
                   rng: torch.Generator | None = None) -> torch.Tensor:
    """Dropout that stays active at inference; mask drawn from `rng` if given."""
    if p <= 0.0:
        return x
    keep = 1.0 - p
    mask = torch.rand(x.shape, generator=rng, device=x.device,
                      dtype=x.dtype) < keep
    return x * mask.to(x.dtype) / keep


def to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 float array in [0,1] -> (3, H, W) tensor."""
    t = torch.as_tensor(image, dtype=dtype)
    if t.dim() != 3 or t.shape[-1] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {tuple(t.shape)}")
    return t.permute(2, 0, 1).contiguous()


def to_image(t: torch.Tensor):
    """(3, H, W) tensor -> H x W x 3 numpy array."""
    if t.dim() != 3 or t.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) tensor, got shape {tuple(t.shape)}")
    return t.detach().permute(1, 2, 0).cpu().numpy()
