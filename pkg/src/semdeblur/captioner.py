"""Caption decoder: LSTM conditioned on pooled image features, attending
over the seven tree-node predictions."""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .capparse import ENTITY_NODES
from .errors import EmptyInput, LabelError
from .s3tree import ALL_NODES, NodeBundle
from .torchutil import init_module

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

_WORD_RE = re.compile(r"[a-z0-9']+")


def tokenize(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class CaptionVocab:
    """Word list for the decoder; specials occupy ids 0..3."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if tuple(words[:4]) != SPECIALS:
            raise ValueError(f"caption vocab must start with {SPECIALS}")
        if len(set(words)) != len(words):
            raise ValueError("caption vocab words must be unique")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def from_captions(cls, captions: Iterable[str], min_freq: int = 1) -> "CaptionVocab":
        counts: Counter = Counter()
        n = 0
        for caption in captions:
            n += 1
            counts.update(tokenize(caption))
        if n == 0:
            raise EmptyInput("caption corpus is empty")
        kept = sorted((w for w, c in counts.items() if c >= min_freq),
                      key=lambda w: (-counts[w], w))
        return cls(list(SPECIALS) + kept)

    def encode(self, caption: str, max_len: int | None = None) -> list[int]:
        """BOS + word ids + EOS, truncated to max_len interior tokens."""
        ids = [self.index.get(w, self.unk_id) for w in tokenize(caption)]
        if max_len is not None:
            ids = ids[:max_len]
        return [self.bos_id] + ids + [self.eos_id]

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if i in (self.bos_id, self.pad_id):
                continue
            if i == self.eos_id:
                break
            words.append(self.words[i])
        return " ".join(words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for word in self.words:
                f.write(word + "\n")

    @classmethod
    def load(cls, path) -> "CaptionVocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


class CaptionDecoder(nn.Module):
    """Single-layer LSTM decoder with additive attention over node predictions.

    The pooled image vector initializes the recurrent state; each step
    consumes the previous token's embedding concatenated with the attention
    context over the seven projected node vectors.
    """

    def __init__(self, vocab_size: int, n_entities: int, n_relations: int,
                 backbone_channels: int, embed_dim: int = 128,
                 hidden_size: int = 256, attn_dim: int = 64,
                 node_feat_dim: int = 64, attend_over: str = "probs",
                 seed: int = 0):
        super().__init__()
        if attend_over not in ("probs", "features"):
            raise ValueError("attend_over must be 'probs' or 'features'")
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.attend_over = attend_over
        self.embed = nn.Embedding(vocab_size, embed_dim)
        self.cell = nn.LSTMCell(embed_dim + attn_dim, hidden_size)
        self.image_fc = nn.Linear(backbone_channels, hidden_size)
        self.init_h = nn.Linear(hidden_size, hidden_size)
        self.init_c = nn.Linear(hidden_size, hidden_size)
        self.ent_proj = nn.Linear(n_entities, attn_dim)
        self.rel_proj = nn.Linear(n_relations, attn_dim)
        self.feat_proj = nn.Linear(node_feat_dim, attn_dim)
        self.attn_hidden = nn.Linear(hidden_size, attn_dim)
        self.attn_node = nn.Linear(attn_dim, attn_dim)
        self.attn_score = nn.Linear(attn_dim, 1, bias=False)
        self.out = nn.Linear(hidden_size, vocab_size)
        init_module(self, seed)

    def pool_image_vector(self, V: torch.Tensor) -> torch.Tensor:
        """Global average pool over the feature map, then an affine map."""
        return self.image_fc(V.mean(dim=(2, 3)))

    def init_state(self, h_V: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.init_h(h_V), self.init_c(h_V)

    def node_vectors(self, bundle: NodeBundle) -> torch.Tensor:
        """(B, 7, attn_dim) projected node vectors in node-id order."""
        vecs = []
        for j in ALL_NODES:
            if self.attend_over == "probs":
                proj = self.ent_proj if j in ENTITY_NODES else self.rel_proj
                vecs.append(proj(bundle.probs[j]))
            else:
                vecs.append(self.feat_proj(bundle.h[j]))
        return torch.stack(vecs, dim=1)

    def attend(self, hidden: torch.Tensor, node_vecs: torch.Tensor):
        """Additive attention; returns (context, weights over the 7 nodes)."""
        scores = self.attn_score(torch.tanh(
            self.attn_hidden(hidden).unsqueeze(1) + self.attn_node(node_vecs)))
        weights = F.softmax(scores.squeeze(-1), dim=1)
        context = (weights.unsqueeze(-1) * node_vecs).sum(dim=1)
        return context, weights

    def decode_step(self, prev_token: torch.Tensor, state, node_vecs: torch.Tensor):
        """One teacher-forcing / generation step.

        Returns (log-probabilities over the vocab, new state).
        """
        if (prev_token < 0).any() or (prev_token >= self.vocab_size).any():
            raise LabelError("token id outside caption vocab")
        h, c = state
        context, _ = self.attend(h, node_vecs)
        x = torch.cat([self.embed(prev_token), context], dim=1)
        h, c = self.cell(x, (h, c))
        return F.log_softmax(self.out(h), dim=-1), (h, c)


def caption_loss(decoder: CaptionDecoder, V: torch.Tensor, bundle: NodeBundle,
                 tokens: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
    """Teacher-forced NLL: summed over time, masked at PAD, batch-averaged.

    `tokens` is (B, L) with BOS first; positions equal to pad_id contribute
    nothing, so padding a batch never changes its loss.
    """
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    state = decoder.init_state(decoder.pool_image_vector(V))
    node_vecs = decoder.node_vectors(bundle)
    total = torch.zeros(tokens.shape[0], dtype=V.dtype, device=V.device)
    for t in range(1, tokens.shape[1]):
        logp, state = decoder.decode_step(tokens[:, t - 1], state, node_vecs)
        target = tokens[:, t]
        mask = (target != pad_id).to(logp.dtype)
        safe_target = torch.where(target == pad_id, torch.zeros_like(target), target)
        total = total - logp.gather(1, safe_target.unsqueeze(1)).squeeze(1) * mask
    return total.mean()


def generate(decoder: CaptionDecoder, V: torch.Tensor, bundle: NodeBundle,
             strategy: str = "greedy", max_len: int = 16,
             beam_size: int = 3, bos_id: int = 1, eos_id: int = 2) -> list[int]:
    """Decode one caption (batch size 1). Returns [BOS, ..., EOS?] token ids."""
    if strategy not in ("greedy", "beam"):
        raise ValueError("strategy must be 'greedy' or 'beam'")
    if V.shape[0] != 1:
        raise ValueError("generate expects a single image")
    if strategy == "greedy":
        beam_size = 1
    node_vecs = decoder.node_vectors(bundle)
    state0 = decoder.init_state(decoder.pool_image_vector(V))
    # hypotheses: (cumulative logprob, tokens, state, finished)
    beams = [(0.0, [bos_id], state0, False)]
    with torch.no_grad():
        for _ in range(max_len):
            if all(b[3] for b in beams):
                break
            candidates = []
            for score, toks, state, finished in beams:
                if finished:
                    candidates.append((score, toks, state, True))
                    continue
                prev = torch.tensor([toks[-1]], device=V.device)
                logp, new_state = decoder.decode_step(prev, state, node_vecs)
                top = torch.topk(logp[0], k=min(beam_size, decoder.vocab_size))
                for lp, idx in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((score + lp, toks + [idx], new_state, idx == eos_id))
            candidates.sort(key=lambda b: -b[0])
            beams = candidates[:beam_size]
    return beams[0][1]
