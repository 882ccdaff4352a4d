"""Finite-difference gradient verification for the custom layers.

Each check builds a tiny double-precision fixture, computes analytic
gradients with autograd, and compares them against central differences
computed by perturbing every element. The finite-difference side never
touches autograd, so the two routes are independent.
"""

from __future__ import annotations

from typing import Callable

import torch

from .captioner import CaptionDecoder, caption_loss
from .deblur import CouplingBlock, PerceptualExtractor, perceptual_loss
from .s3tree import SemanticTree, tree_loss
from .torchutil import init_module

EPS = 1e-5


def central_diff_grads(loss_fn: Callable[[], torch.Tensor],
                       params: list[torch.Tensor], eps: float = EPS):
    """Central finite-difference gradient of loss_fn wrt each tensor."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = loss_fn().item()
                flat[i] = orig - eps
                minus = loss_fn().item()
                flat[i] = orig
                gflat[i] = (plus - minus) / (2.0 * eps)
            grads.append(g)
    return grads


def max_rel_error(analytic, numeric) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a is None:
            a = torch.zeros_like(n)
        diff = (a - n).abs()
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=1e-4)
        worst = max(worst, (diff / denom).max().item())
    return worst


def _compare(loss_fn, params) -> float:
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    with torch.no_grad():
        numeric = central_diff_grads(loss_fn, params)
    return max_rel_error(analytic, numeric)


def _rand(gen, *shape):
    return torch.rand(shape, generator=gen, dtype=torch.float64) - 0.5


def check_decouple(seed: int = 7) -> float:
    gen = torch.Generator().manual_seed(seed)
    tree = SemanticTree(3, 4, 4, 5, 4, seed=seed).double()
    _jitter_biases(tree, gen)
    V = _rand(gen, 1, 3, 4, 4)
    weights = {j: _rand(gen, 1, 4, 4, 4) for j in (1, 3, 5, 7)}
    params = [p for name, p in tree.named_parameters() if "decouple" in name]

    def loss_fn():
        maps = tree.decouple(V)
        return sum((maps[j] * weights[j]).sum() for j in (1, 3, 5, 7))

    return _compare(loss_fn, params)


def check_combine(seed: int = 11) -> float:
    gen = torch.Generator().manual_seed(seed)
    tree = SemanticTree(3, 4, 4, 5, 4, seed=seed).double()
    _jitter_biases(tree, gen)
    left = _rand(gen, 1, 4, 4, 4)
    right = _rand(gen, 1, 4, 4, 4)
    weight = _rand(gen, 1, 4, 4, 4)
    params = [p for name, p in tree.named_parameters() if "combine" in name]

    def loss_fn():
        out = tree.combine_pair(left, right, 2)
        return (out * weight).sum()

    return _compare(loss_fn, params)


def check_classify(seed: int = 13) -> float:
    gen = torch.Generator().manual_seed(seed)
    tree = SemanticTree(3, 4, 4, 5, 4, seed=seed).double()
    _jitter_biases(tree, gen)
    H = _rand(gen, 1, 4, 4, 4)
    params = [p for name, p in tree.named_parameters()
              if "feat_fcs.1" in name or "classifiers.1" in name]

    def loss_fn():
        _, logits, _ = tree.classify_node(H, 1)
        return torch.nn.functional.cross_entropy(logits, torch.tensor([2]))

    return _compare(loss_fn, params)


def check_tree_loss(seed: int = 3) -> float:
    """Whole-tree gradient: every parameter through forward + tree_loss."""
    gen = torch.Generator().manual_seed(seed)
    tree = SemanticTree(3, 4, 4, 5, 4, seed=seed).double()
    _jitter_biases(tree, gen)
    V = _rand(gen, 1, 3, 4, 4)
    labels = torch.tensor([[1, 2, 3, 0, 4, 1, 2]])
    params = list(tree.parameters())

    def loss_fn():
        return tree_loss(tree(V), labels)

    return _compare(loss_fn, params)


def check_couple_into_layer(seed: int = 17) -> float:
    gen = torch.Generator().manual_seed(seed)
    block = CouplingBlock(tree_channels=14, layer_channels=3).double()
    init_module(block, seed)
    _jitter_biases(block, gen)
    layer = _rand(gen, 1, 3, 4, 4)
    coupled = _rand(gen, 1, 14, 2, 2)
    weight = _rand(gen, 1, 6, 4, 4)
    params = list(block.parameters())

    def loss_fn():
        return (block(layer, coupled) * weight).sum()

    return _compare(loss_fn, params)


def check_perceptual_loss(seed: int = 19) -> float:
    gen = torch.Generator().manual_seed(seed)
    extractor = PerceptualExtractor(channels=4, seed=seed).double()
    _jitter_biases(extractor, gen)
    target = _rand(gen, 1, 3, 4, 4) + 0.5
    restored = (_rand(gen, 1, 3, 4, 4) + 0.5).requires_grad_(True)

    def loss_fn():
        return perceptual_loss(extractor, target, restored)

    return _compare(loss_fn, [restored])


def _tiny_decoder(seed: int) -> CaptionDecoder:
    return CaptionDecoder(vocab_size=7, n_entities=5, n_relations=4,
                          backbone_channels=2, embed_dim=4, hidden_size=5,
                          attn_dim=3, node_feat_dim=4, seed=seed).double()


class _FixedBundle:
    """Stand-in NodeBundle with fixed probability/feature vectors."""

    def __init__(self, gen):
        self.probs = {}
        self.h = {}
        for j in range(1, 8):
            size = 5 if j in (1, 3, 5, 7) else 4
            raw = torch.rand((1, size), generator=gen, dtype=torch.float64)
            self.probs[j] = raw / raw.sum()
            self.h[j] = _rand(gen, 1, 4)


def check_attend(seed: int = 23) -> float:
    gen = torch.Generator().manual_seed(seed)
    decoder = _tiny_decoder(seed)
    _jitter_biases(decoder, gen)
    bundle = _FixedBundle(gen)
    hidden = _rand(gen, 1, 5)
    weight = _rand(gen, 1, 3)
    params = [p for name, p in decoder.named_parameters()
              if name.startswith(("attn_", "ent_proj", "rel_proj"))]

    def loss_fn():
        context, _ = decoder.attend(hidden, decoder.node_vectors(bundle))
        return (context * weight).sum()

    return _compare(loss_fn, params)


def check_caption_loss(seed: int = 29) -> float:
    gen = torch.Generator().manual_seed(seed)
    decoder = _tiny_decoder(seed)
    _jitter_biases(decoder, gen)
    bundle = _FixedBundle(gen)
    V = _rand(gen, 1, 2, 4, 4)
    tokens = torch.tensor([[1, 4, 5, 6, 2]])
    params = list(decoder.parameters())

    def loss_fn():
        return caption_loss(decoder, V, bundle, tokens)

    return _compare(loss_fn, params)


def _jitter_biases(module: torch.nn.Module, gen: torch.Generator) -> None:
    """Move zero-initialized biases off the ReLU kink for stable differences."""
    with torch.no_grad():
        for _, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if p.dim() == 1:
                p.add_(0.2 * (torch.rand(p.shape, generator=gen, dtype=p.dtype) - 0.5))


CHECKS = {
    "s3tree": {
        "decouple": check_decouple,
        "combine": check_combine,
        "classify_node": check_classify,
        "tree_loss": check_tree_loss,
    },
    "deblur": {
        "couple_into_layer": check_couple_into_layer,
        "perceptual_loss": check_perceptual_loss,
    },
    "captioner": {
        "attend": check_attend,
        "caption_loss": check_caption_loss,
    },
}


def run_suite(module: str = "all") -> dict[str, float]:
    """Max relative error per op for one module group or all of them."""
    if module == "all":
        groups = CHECKS.values()
    elif module in CHECKS:
        groups = [CHECKS[module]]
    else:
        raise ValueError(f"unknown gradcheck module {module!r}; "
                         f"choose from {sorted(CHECKS)} or 'all'")
    results = {}
    for group in groups:
        for name, fn in group.items():
            results[name] = fn()
    return results
