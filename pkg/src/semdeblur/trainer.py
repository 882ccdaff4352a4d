"""Training: backbone features, tree pretraining, and the alternating
critic/joint co-training loop with checkpointing."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from . import deblur as D
from .capparse import Vocab
from .captioner import CaptionDecoder, CaptionVocab, caption_loss
from .checkpoint import Checkpoint
from .config import TrainConfig
from .errors import DataError, NonFiniteLoss, ShapeError
from .imgio import load_image
from .manifest import Manifest, ManifestRecord
from .s3tree import SemanticTree, couple_tree_maps, tree_loss
from .seeding import derive_seed
from .torchutil import init_module, to_tensor

MODEL_NAMES = ("backbone", "s3tree", "generator", "critic", "perceptual", "captioner")


class BackboneEncoder(nn.Module):
    """Small frozen conv encoder: four stride-2 ReLU blocks, H/16 x W/16 x c."""

    def __init__(self, out_channels: int = 16, seed: int = 0, frozen: bool = True):
        super().__init__()
        chans = [3, out_channels, out_channels, out_channels, out_channels]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU()]
        self.layers = nn.Sequential(*layers)
        self.out_channels = out_channels
        init_module(self, seed)
        if frozen:
            self.requires_grad_(False)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W), got {tuple(image.shape)}")
        if image.shape[-2] % 16 or image.shape[-1] % 16:
            raise ShapeError("backbone input height/width must be divisible by 16")
        return self.layers(image)


@dataclass
class VocabSet:
    entity: Vocab
    relation: Vocab
    caption: CaptionVocab

    def as_word_lists(self) -> dict:
        return {"entity": self.entity.words, "relation": self.relation.words,
                "caption": self.caption.words}

    @classmethod
    def from_word_lists(cls, data: dict) -> "VocabSet":
        return cls(entity=Vocab(Vocab.ENTITY, data["entity"]),
                   relation=Vocab(Vocab.RELATION, data["relation"]),
                   caption=CaptionVocab(data["caption"]))


def build_models(config: TrainConfig, vocabs: VocabSet) -> dict[str, nn.Module]:
    """All six model components, each seeded from the master config seed."""
    seed = lambda name: derive_seed(config.seed, name)  # noqa: E731
    models = {
        "backbone": BackboneEncoder(config.backbone_channels, seed("backbone")),
        "s3tree": SemanticTree(config.backbone_channels, config.node_channels,
                               config.node_feat_dim, len(vocabs.entity),
                               len(vocabs.relation), seed("s3tree")),
        "generator": D.Generator(config.ngf, tree_channels=7 * config.node_channels,
                                 n_res_blocks=config.n_res_blocks,
                                 dropout=config.dropout, seed=seed("generator")),
        "critic": D.Critic(config.ndf, seed=seed("critic")),
        "perceptual": D.PerceptualExtractor(config.perceptual_channels,
                                            seed=seed("perceptual")),
        "captioner": CaptionDecoder(
            len(vocabs.caption), len(vocabs.entity), len(vocabs.relation),
            config.backbone_channels, embed_dim=config.embed_dim,
            hidden_size=config.hidden_size, attn_dim=config.attn_dim,
            node_feat_dim=config.node_feat_dim, attend_over=config.attend_over,
            seed=seed("captioner")),
    }
    if config.perceptual_weights:
        models["perceptual"].load_weights(config.perceptual_weights)
    return models


def checkpoint_from(models: dict, config: TrainConfig, vocabs: VocabSet,
                    step: int = 0, optimizers: dict | None = None) -> Checkpoint:
    sections = {name: models[name].state_dict() for name in MODEL_NAMES}
    for name, opt in (optimizers or {}).items():
        sections[f"opt_{name}"] = opt.state_dict()
    seeds = {name: derive_seed(config.seed, name) for name in MODEL_NAMES}
    return Checkpoint(sections=sections, config=config.to_dict(), step=step,
                      seeds=seeds, vocabs=vocabs.as_word_lists())


def restore_models(ckpt: Checkpoint) -> tuple[TrainConfig, dict, VocabSet]:
    """Rebuild config, vocabularies, and model components from a checkpoint."""
    config = TrainConfig(**ckpt.config)
    vocabs = VocabSet.from_word_lists(ckpt.vocabs)
    models = build_models(config, vocabs)
    for name in MODEL_NAMES:
        if name in ckpt.sections:
            models[name].load_state_dict(ckpt.sections[name])
    return config, models, vocabs


def total_loss(imd: torch.Tensor | float, imc: torch.Tensor | float,
               tree: torch.Tensor | float, config: TrainConfig):
    """L_total = deblur + lambda_caption * caption + lambda_tree * tree."""
    return imd + config.lambda_caption * imc + config.lambda_tree * tree


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Flat for epochs_flat epochs, then linear decay to zero over epochs_decay."""
    if epoch < config.epochs_flat:
        return config.lr
    remaining = config.epochs_flat + config.epochs_decay - epoch
    return config.lr * max(0.0, remaining / config.epochs_decay)


class _PairCache:
    """Loads each (blurry, sharp) pair once; toy datasets fit in memory."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}

    def pair(self, record: ManifestRecord) -> tuple[torch.Tensor, torch.Tensor]:
        hit = self._cache.get(record.id)
        if hit is None:
            blurry = to_tensor(load_image(self.manifest.resolve(record.blurry_path)))
            sharp = to_tensor(load_image(self.manifest.resolve(record.sharp_path)))
            hit = self._cache[record.id] = (blurry, sharp)
        return hit


def _batch_stream(records, batch_size: int, rng: random.Random):
    """Infinite stream of record batches; reshuffled each pass."""
    order = list(range(len(records)))
    while True:
        rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            yield [records[i] for i in order[start:start + batch_size]]


def _assemble(records, cache: _PairCache, vocabs: VocabSet,
              rng: random.Random, max_len: int):
    """Batch tensors: blurry, sharp, node labels, padded caption tokens."""
    blurry = torch.stack([cache.pair(r)[0] for r in records])
    sharp = torch.stack([cache.pair(r)[1] for r in records])
    labels, token_rows = [], []
    for record in records:
        idx = rng.randrange(len(record.captions))
        if not record.tree_labels:
            raise DataError(f"record {record.id!r} has no tree labels; "
                            "annotate the manifest with the vocab step first")
        labels.append(record.tree_labels[idx])
        token_rows.append(vocabs.caption.encode(record.captions[idx], max_len))
    width = max(len(row) for row in token_rows)
    pad = vocabs.caption.pad_id
    tokens = torch.tensor([row + [pad] * (width - len(row)) for row in token_rows])
    return blurry, sharp, torch.tensor(labels), tokens


def _steps_per_epoch(n_records: int, batch_size: int) -> int:
    return max(1, math.ceil(n_records / batch_size))


class _RunLog:
    def __init__(self, out_dir: Path | None, name: str):
        self.history: dict = {"joint": [], "critic": [], "steps": []}
        self._fh = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self._fh = open(out_dir / name, "w", encoding="utf-8")

    def add(self, kind: str, entry: dict):
        self.history[kind].append(entry)
        if self._fh is not None:
            self._fh.write(json.dumps({"kind": kind, **entry}, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def _check_finite(value: float, what: str, last_good):
    if not math.isfinite(value):
        raise NonFiniteLoss(f"{what} became non-finite ({value})",
                            last_good_checkpoint=last_good)


def infer(models: dict, blurry: torch.Tensor, rng: torch.Generator | None = None):
    """(restored, bundle, V) for a blurry batch, without gradients."""
    with torch.no_grad():
        V = models["backbone"](blurry)
        bundle = models["s3tree"](V)
        restored = models["generator"](blurry, couple_tree_maps(bundle), rng)
    return restored, bundle, V


def node_accuracy(bundle, labels: torch.Tensor) -> list[float]:
    """Fraction of correct argmax predictions per node over a batch."""
    accs = []
    for j in range(1, 8):
        pred = bundle.logits[j].argmax(dim=1)
        accs.append((pred == labels[:, j - 1]).float().mean().item())
    return accs


def pretrain_tree(manifest: Manifest, config: TrainConfig, vocabs: VocabSet,
                  out_dir=None, steps: int | None = None,
                  log_every: int = 25) -> Checkpoint:
    """Minimize the tree classification loss alone on the train split.

    Returns a checkpoint of all components (only backbone + tree trained
    state matters); the run log records loss and per-node accuracy.
    """
    records = manifest.split("train")
    if not records:
        raise DataError("train split is empty")
    if config.deterministic:
        torch.set_num_threads(1)
    models = build_models(config, vocabs)
    tree = models["s3tree"]
    backbone = models["backbone"]
    opt = torch.optim.Adam(tree.parameters(), lr=config.lr,
                           betas=(config.adam_beta1, config.adam_beta2))
    cache = _PairCache(manifest)
    rng = random.Random(derive_seed(config.seed, "pretrain-batches"))
    stream = _batch_stream(records, config.batch_size, rng)
    total_steps = steps if steps is not None else (
        config.epochs * _steps_per_epoch(len(records), config.batch_size))
    out_dir = Path(out_dir) if out_dir is not None else None
    log = _RunLog(out_dir, "pretrain_log.jsonl")
    try:
        for step in range(total_steps):
            blurry, _, labels, _ = _assemble(next(stream), cache, vocabs, rng,
                                             config.caption_max_len)
            with torch.no_grad():
                V = backbone(blurry)
            bundle = tree(V)
            loss = tree_loss(bundle, labels)
            _check_finite(loss.item(), "tree loss", None)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % log_every == 0 or step == total_steps - 1:
                log.add("joint", {"step": step, "tree": loss.item(),
                                  "node_acc": node_accuracy(bundle, labels)})
    finally:
        log.close()
    ckpt = checkpoint_from(models, config, vocabs, step=total_steps)
    ckpt.history = log.history
    if out_dir is not None:
        ckpt.save(out_dir / "tree_pretrained.s3ed")
    return ckpt


def cotrain(manifest: Manifest, config: TrainConfig, vocabs: VocabSet,
            init: Checkpoint | None = None, out_dir=None,
            joint_steps: int | None = None, log_every: int = 10) -> Checkpoint:
    """Alternating optimization: critic_steps WGAN-GP critic updates, then one
    joint Adam step on generator + tree + captioner (+ coupling).

    The backbone stays frozen. On a non-finite loss the run aborts with
    NonFiniteLoss carrying the last periodic checkpoint path. The returned
    checkpoint gets a `history` attribute with per-step loss components.
    """
    records = manifest.split("train")
    if not records:
        raise DataError("train split is empty")
    if config.deterministic:
        torch.set_num_threads(1)
    models = build_models(config, vocabs)
    if init is not None:
        for name in MODEL_NAMES:
            if name in init.sections:
                models[name].load_state_dict(init.sections[name])
    backbone, tree = models["backbone"], models["s3tree"]
    generator, critic = models["generator"], models["critic"]
    perceptual, captioner = models["perceptual"], models["captioner"]

    joint_params = (list(tree.parameters()) + list(generator.parameters())
                    + list(captioner.parameters()))
    opt_joint = torch.optim.Adam(joint_params, lr=config.lr,
                                 betas=(config.adam_beta1, config.adam_beta2))
    opt_critic = torch.optim.Adam(critic.parameters(), lr=config.lr,
                                  betas=(config.adam_beta1, config.adam_beta2))

    cache = _PairCache(manifest)
    rng = random.Random(derive_seed(config.seed, "cotrain-batches"))
    gp_rng = torch.Generator().manual_seed(derive_seed(config.seed, "gp-eps"))
    dropout_rng = torch.Generator().manual_seed(derive_seed(config.seed, "dropout"))
    stream = _batch_stream(records, config.batch_size, rng)
    spe = _steps_per_epoch(len(records), config.batch_size)
    total_joint = joint_steps if joint_steps is not None else config.epochs * spe
    out_dir = Path(out_dir) if out_dir is not None else None
    log = _RunLog(out_dir, "train_log.jsonl")
    last_good = None
    n_critic = n_joint = 0

    def batch():
        return _assemble(next(stream), cache, vocabs, rng, config.caption_max_len)

    try:
        for step in range(total_joint):
            lr = lr_schedule(step // spe, config)
            for group in opt_joint.param_groups:
                group["lr"] = lr
            for group in opt_critic.param_groups:
                group["lr"] = lr

            for _ in range(config.critic_steps):
                blurry, sharp, _, _ = batch()
                fake, _, _ = infer(models, blurry, dropout_rng)
                d_loss = D.critic_wgan_gp_loss(critic, sharp, fake,
                                               config.gp_weight, gp_rng)
                _check_finite(d_loss.item(), "critic loss", last_good)
                opt_critic.zero_grad()
                d_loss.backward()
                opt_critic.step()
                n_critic += 1
                log.add("critic", {"step": step, "loss": d_loss.item()})

            blurry, sharp, labels, tokens = batch()
            with torch.no_grad():
                V = backbone(blurry)
            bundle = tree(V)
            restored = generator(blurry, couple_tree_maps(bundle), dropout_rng)
            gan = -D.critic_score(critic, restored)
            content = D.perceptual_loss(perceptual, sharp, restored)
            imd = gan + config.lambda_content * content
            imc = (caption_loss(captioner, V, bundle, tokens, vocabs.caption.pad_id)
                   if config.lambda_caption > 0 else torch.zeros(()))
            l_tree = (tree_loss(bundle, labels)
                      if config.lambda_tree > 0 else torch.zeros(()))
            loss = total_loss(imd, imc, l_tree, config)
            _check_finite(loss.item(), "total loss", last_good)
            opt_joint.zero_grad()
            loss.backward()
            opt_joint.step()
            n_joint += 1
            entry = {"step": step, "lr": lr, "total": loss.item(),
                     "imd": imd.item(), "gan": gan.item(),
                     "content": content.item(), "imc": imc.item(),
                     "tree": l_tree.item()}
            log.add("joint", entry)

            if out_dir is not None and (step + 1) % config.checkpoint_every == 0:
                path = out_dir / f"cotrain_step{step + 1}.s3ed"
                checkpoint_from(models, config, vocabs, step + 1,
                                {"joint": opt_joint, "critic": opt_critic}).save(path)
                last_good = path
        log.add("steps", {"critic": n_critic, "joint": n_joint})
    finally:
        log.close()
    ckpt = checkpoint_from(models, config, vocabs, total_joint,
                           {"joint": opt_joint, "critic": opt_critic})
    ckpt.history = log.history
    if out_dir is not None:
        ckpt.save(out_dir / "cotrained.s3ed")
    return ckpt
