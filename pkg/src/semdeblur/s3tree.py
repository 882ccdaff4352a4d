"""Seven-node semantic tree over backbone feature maps.

The tree decouples a backbone feature map V into four entity node maps
(nodes 1, 3, 5, 7), combines child pairs into three relation node maps
(2 <- 1,3; 6 <- 5,7; 4 <- 2,6), and classifies every node against its
entity or relation vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .capparse import ENTITY_NODES, RELATION_NODES
from .errors import LabelError, ShapeError
from .torchutil import init_module

# parent -> (left child, right child); parents listed in evaluation order
COMBINE_TOPOLOGY = {2: (1, 3), 6: (5, 7), 4: (2, 6)}
COMBINE_ORDER = (2, 6, 4)
ALL_NODES = (1, 2, 3, 4, 5, 6, 7)


@dataclass
class NodeBundle:
    """Per-node outputs of one tree forward pass, keyed by node id 1..7."""

    maps: dict[int, torch.Tensor]    # (B, c', h, w) feature map per node
    h: dict[int, torch.Tensor]       # (B, feat_dim) pooled feature vector
    logits: dict[int, torch.Tensor]  # (B, vocab size of the node's kind)
    probs: dict[int, torch.Tensor]


class SemanticTree(nn.Module):
    """Decouple / combine / classify over a fixed seven-node topology.

    Args:
        in_channels: channels of the backbone feature map V.
        node_channels: channels c' of every node feature map.
        feat_dim: dimensionality of the pooled per-node feature vector.
        n_entities: entity vocabulary size (nodes 1, 3, 5, 7).
        n_relations: relation vocabulary size (nodes 2, 4, 6).
    """

    def __init__(self, in_channels: int, node_channels: int, feat_dim: int,
                 n_entities: int, n_relations: int, seed: int = 0):
        super().__init__()
        self.in_channels = in_channels
        self.node_channels = node_channels
        self.feat_dim = feat_dim
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.decouple_convs = nn.ModuleDict({
            str(j): nn.Conv2d(in_channels, node_channels, 3, padding=1)
            for j in ENTITY_NODES})
        self.combine_convs = nn.ModuleDict({
            str(j): nn.Conv2d(2 * node_channels, node_channels, 3, padding=1)
            for j in COMBINE_ORDER})
        self.feat_fcs = nn.ModuleDict({
            str(j): nn.Linear(node_channels, feat_dim) for j in ALL_NODES})
        self.classifiers = nn.ModuleDict({
            str(j): nn.Linear(feat_dim,
                              n_entities if j in ENTITY_NODES else n_relations)
            for j in ALL_NODES})
        init_module(self, seed)

    def vocab_size(self, node_id: int) -> int:
        return self.n_entities if node_id in ENTITY_NODES else self.n_relations

    def decouple(self, V: torch.Tensor) -> dict[int, torch.Tensor]:
        """Entity node maps from V: 3x3 conv + ReLU, spatial size preserved."""
        if V.dim() != 4 or V.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected V of shape (B, {self.in_channels}, h, w), got {tuple(V.shape)}")
        return {j: F.relu(self.decouple_convs[str(j)](V)) for j in ENTITY_NODES}

    def combine_pair(self, left: torch.Tensor, right: torch.Tensor,
                     parent_id: int) -> torch.Tensor:
        """Relation node map from two children: concat, 3x3 conv, ReLU."""
        if left.shape != right.shape:
            raise ShapeError(
                f"combine operands differ: {tuple(left.shape)} vs {tuple(right.shape)}")
        return F.relu(self.combine_convs[str(parent_id)](torch.cat([left, right], dim=1)))

    def classify_node(self, H: torch.Tensor, node_id: int):
        """(pooled feature h, logits, probs) for one node map."""
        pooled = F.relu(H).mean(dim=(2, 3))
        h = self.feat_fcs[str(node_id)](pooled)
        logits = self.classifiers[str(node_id)](h)
        return h, logits, F.softmax(logits, dim=-1)

    def forward(self, V: torch.Tensor) -> NodeBundle:
        maps = self.decouple(V)
        for parent in COMBINE_ORDER:
            left, right = COMBINE_TOPOLOGY[parent]
            maps[parent] = self.combine_pair(maps[left], maps[right], parent)
        h, logits, probs = {}, {}, {}
        for j in ALL_NODES:
            h[j], logits[j], probs[j] = self.classify_node(maps[j], j)
        return NodeBundle(maps=maps, h=h, logits=logits, probs=probs)


def tree_loss(bundle: NodeBundle, labels: torch.Tensor) -> torch.Tensor:
    """Summed per-node negative log likelihood, averaged over the batch.

    `labels` is a (B, 7) long tensor of category ids ordered by node id.
    """
    if labels.dim() == 1:
        labels = labels.unsqueeze(0)
    if labels.shape[1] != 7:
        raise ShapeError(f"labels must be (B, 7), got {tuple(labels.shape)}")
    total = None
    for j in ALL_NODES:
        logits = bundle.logits[j]
        y = labels[:, j - 1]
        if (y < 0).any() or (y >= logits.shape[1]).any():
            raise LabelError(f"node {j} label outside vocab of size {logits.shape[1]}")
        nll = -F.log_softmax(logits, dim=-1).gather(1, y.unsqueeze(1)).squeeze(1)
        total = nll if total is None else total + nll
    return total.mean()


def couple_tree_maps(bundle: NodeBundle) -> torch.Tensor:
    """Channel-wise concatenation of all node maps in node-id order."""
    return torch.cat([bundle.maps[j] for j in ALL_NODES], dim=1)
