import numpy as np
import pytest
import torch

from semdeblur import blursynth, capparse
from semdeblur.captioner import CaptionVocab
from semdeblur.config import TrainConfig
from semdeblur.imgio import save_image
from semdeblur.manifest import Manifest
from semdeblur.trainer import VocabSet

TOY_CAPTIONS = [
    "a man rides a horse on a beach",
    "a train stops at the track",
    "a dog runs in the grass",
    "a woman holds an umbrella on a street",
    "a cat sits on a chair",
    "a boy throws a ball in a park",
    "a bus parks by a building",
    "a bird flies over the water",
    "a girl eats a sandwich at a table",
    "a plane flies above a mountain",
    "a sheep grazes in a field near a fence",
    "a truck drives down a road",
    "a child plays with a kite on a hill",
    "a surfer rides a wave near a shore",
    "a clock hangs on a wall in a room",
    "a boat sails across a lake",
]


def make_toy_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Blocky, edge-rich test image; motion blur visibly degrades it."""
    img = np.zeros((size, size, 3))
    for _ in range(10):
        y0, x0 = rng.integers(0, size - 6, 2)
        h, w = rng.integers(3, 9, 2)
        img[y0:y0 + h, x0:x0 + w] = rng.random(3)
    for _ in range(3):
        x = rng.integers(2, size - 2)
        img[:, x:x + 1] = rng.random(3)
        y = rng.integers(2, size - 2)
        img[y:y + 1, :] = rng.random(3)
    img += np.linspace(0, 0.25, size)[None, :, None]
    return np.clip(img, 0, 1)


def write_toy_sources(root, n_images: int = 16, size: int = 32, seed: int = 42):
    """Sharp PNGs plus a caption file under `root`; returns their paths."""
    sharp_dir = root / "sharp"
    sharp_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n_images):
        save_image(sharp_dir / f"img{i:02d}.png", make_toy_image(rng, size))
        lines.append(f"img{i:02d}\t{TOY_CAPTIONS[i % len(TOY_CAPTIONS)]}")
    captions = root / "captions.tsv"
    captions.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return sharp_dir, captions


def annotate(manifest: Manifest, vocabs: VocabSet) -> None:
    for record in manifest.records:
        record.tree_labels = [
            list(capparse.prune_to_tree(capparse.tag_caption(c), vocabs.entity,
                                        vocabs.relation).node_labels)
            for c in record.captions]


def desk_config(**overrides) -> TrainConfig:
    """Small shapes that train in seconds on CPU; fields overridable."""
    base = dict(batch_size=4, image_size=32, backbone_channels=16,
                node_channels=16, node_feat_dim=16, ngf=16, ndf=16,
                embed_dim=32, hidden_size=48, attn_dim=16, dropout=0.0,
                perceptual_channels=16, lr=1e-3, seed=1)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """16-image severely blurred dataset with vocabularies and tree labels."""
    root = tmp_path_factory.mktemp("toyds")
    sharp_dir, captions = write_toy_sources(root, n_images=16)
    manifest = blursynth.make_dataset(sharp_dir, captions, blursynth.SEV, seed=7,
                                      out_dir=root / "ds", split_fracs=(1.0, 0.0, 0.0))
    corpus = [c for r in manifest.records for c in r.captions]
    ent, rel = capparse.build_vocabs(corpus, min_freq=1)
    cap = CaptionVocab.from_captions(corpus, min_freq=1)
    vocabs = VocabSet(entity=ent, relation=rel, caption=cap)
    annotate(manifest, vocabs)
    manifest.save(root / "ds" / "manifest.jsonl")
    loaded = Manifest.load(root / "ds" / "manifest.jsonl",
                           ent_size=len(ent), rel_size=len(rel))
    return {"root": root, "manifest": loaded, "vocabs": vocabs,
            "sharp_dir": sharp_dir, "captions": captions}


def eight_pair_manifest(toy_dataset) -> Manifest:
    """First eight records of the session dataset as their own manifest."""
    manifest = toy_dataset["manifest"]
    return Manifest(records=manifest.records[:8], root=manifest.root)
