"""Command-line surface: dataset synthesis, vocab building, training,
inference, evaluation, gradient checks, and node heatmap export."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import blursynth, capparse
from .captioner import CaptionVocab, generate
from .checkpoint import Checkpoint
from .config import TrainConfig
from .imgio import load_image, save_image
from .manifest import Manifest
from .seeding import derive_seed

GRAD_TOL = 1e-3


def _parse_range(text: str) -> blursynth.SeverityRange:
    if text in blursynth.NAMED_RANGES:
        return blursynth.NAMED_RANGES[text]
    try:
        lo, hi = (float(x) for x in text.split(","))
        return blursynth.SeverityRange(lo, hi)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"range must be 'less_sev', 'sev', or 'lo,hi': {exc}") from exc


def _typed(value: str, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes", "on")
    return target_type(value)


def _config_from_args(args) -> TrainConfig:
    overrides = {}
    field_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    concrete = {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if key not in field_types:
            raise ValueError(f"unknown config key {key!r}")
        overrides[key] = _typed(raw, concrete[key])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return TrainConfig.build(getattr(args, "config", None), overrides)


def _load_vocabs(vocab_dir):
    from .trainer import VocabSet

    vocab_dir = Path(vocab_dir)
    return VocabSet(
        entity=capparse.Vocab.load(vocab_dir / "entity_vocab.txt", capparse.Vocab.ENTITY),
        relation=capparse.Vocab.load(vocab_dir / "relation_vocab.txt", capparse.Vocab.RELATION),
        caption=CaptionVocab.load(vocab_dir / "caption_vocab.txt"),
    )


def cmd_synth(args) -> int:
    ent = rel = None
    if args.vocab_dir:
        vocabs = _load_vocabs(args.vocab_dir)
        ent, rel = vocabs.entity, vocabs.relation
    manifest = blursynth.make_dataset(
        args.sharp, args.captions, _parse_range(args.range), args.seed, args.out,
        max_disp=args.max_disp, n_samples=args.samples, grid=args.grid,
        split_fracs=(args.train_frac, args.val_frac,
                     max(0.0, 1.0 - args.train_frac - args.val_frac)),
        ent_vocab=ent, rel_vocab=rel, jobs=args.jobs)
    print(f"wrote {len(manifest)} records to {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_vocab(args) -> int:
    manifest = Manifest.load(args.manifest, check_paths=False)
    captions = [c for record in manifest.records for c in record.captions]
    synonyms = capparse.load_synonym_map(args.synonyms) if args.synonyms else None
    ent, rel = capparse.build_vocabs(captions, args.min_freq, synonyms=synonyms)
    cap = CaptionVocab.from_captions(captions, args.min_freq)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ent.save(out_dir / "entity_vocab.txt")
    rel.save(out_dir / "relation_vocab.txt")
    cap.save(out_dir / "caption_vocab.txt")
    if args.annotate:
        for record in manifest.records:
            record.tree_labels = [
                list(capparse.prune_to_tree(capparse.tag_caption(c), ent, rel).node_labels)
                for c in record.captions]
        manifest.save(Path(args.manifest))
    print(f"entity vocab {len(ent)}, relation vocab {len(rel)}, "
          f"caption vocab {len(cap)}")
    return 0


def cmd_pretrain_tree(args) -> int:
    from .trainer import pretrain_tree

    config = _config_from_args(args)
    vocabs = _load_vocabs(args.vocab_dir)
    manifest = Manifest.load(args.manifest, ent_size=len(vocabs.entity),
                             rel_size=len(vocabs.relation))
    ckpt = pretrain_tree(manifest, config, vocabs, out_dir=args.out, steps=args.steps)
    final = ckpt.history["joint"][-1]
    print(f"pretrained tree for {ckpt.step} steps; final loss {final['tree']:.4f}")
    return 0


def cmd_train(args) -> int:
    from .trainer import cotrain

    config = _config_from_args(args)
    vocabs = _load_vocabs(args.vocab_dir)
    manifest = Manifest.load(args.manifest, ent_size=len(vocabs.entity),
                             rel_size=len(vocabs.relation))
    init = Checkpoint.load(args.init) if args.init else None
    ckpt = cotrain(manifest, config, vocabs, init=init, out_dir=args.out,
                   joint_steps=args.steps)
    counts = ckpt.history["steps"][-1]
    print(f"co-trained {counts['joint']} joint / {counts['critic']} critic steps; "
          f"checkpoint at {Path(args.out) / 'cotrained.s3ed'}")
    return 0


def _restore_for_inference(ckpt_path):
    from .trainer import restore_models

    ckpt = Checkpoint.load(ckpt_path)
    return restore_models(ckpt)


def cmd_deblur(args) -> int:
    import torch

    from .s3tree import couple_tree_maps
    from .torchutil import to_image, to_tensor

    _, models, _ = _restore_for_inference(args.ckpt)
    image = to_tensor(load_image(args.infile)).unsqueeze(0)
    rng = None
    if args.deterministic:
        rng = torch.Generator().manual_seed(derive_seed(args.seed or 0, "deblur"))
    with torch.no_grad():
        V = models["backbone"](image)
        bundle = models["s3tree"](V)
        restored = models["generator"](image, couple_tree_maps(bundle), rng)
    save_image(args.out, to_image(restored[0]))
    print(f"wrote {args.out}")
    return 0


def cmd_caption(args) -> int:
    import torch

    from .torchutil import to_tensor

    _, models, vocabs = _restore_for_inference(args.ckpt)
    image = to_tensor(load_image(args.infile)).unsqueeze(0)
    with torch.no_grad():
        V = models["backbone"](image)
        bundle = models["s3tree"](V)
    ids = generate(models["captioner"], V, bundle, args.strategy,
                   max_len=args.max_len, beam_size=args.beam,
                   bos_id=vocabs.caption.bos_id, eos_id=vocabs.caption.eos_id)
    text = vocabs.caption.decode(ids)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    manifest = Manifest.load(args.manifest)
    report = evaluate(manifest, args.ckpt, args.out, split=args.split,
                      seed=args.seed or 0)
    print(f"evaluated {report.count} items; mean PSNR {report.mean('psnr'):.3f}, "
          f"mean SSIM {report.mean('ssim'):.4f}, "
          f"mean BLEU-4 {report.mean('bleu', 3):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.module)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name}: max relative error {err:.3e}")
    print(f"worst: {worst:.3e} (tolerance {GRAD_TOL:.0e})")
    return 0 if worst < GRAD_TOL else 1


def load_colormap() -> np.ndarray:
    path = resources.files("semdeblur.data") / "viridis_lut.txt"
    rows = [line.split() for line in path.read_text().splitlines()
            if line and not line.startswith("#")]
    return np.array(rows, dtype=np.uint8)


def export_heatmaps(ckpt_path, image_path, out_dir) -> list[Path]:
    """Per-node heatmap PNGs plus a top-3 label table.

    Node maps are channel-averaged, min-max normalized (constant maps render
    mid-scale), colormapped with the bundled lookup table, and upsampled to
    the input resolution.
    """
    import torch

    from PIL import Image

    from .torchutil import to_tensor

    _, models, vocabs = _restore_for_inference(ckpt_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = load_image(image_path)
    batch = to_tensor(image).unsqueeze(0)
    with torch.no_grad():
        bundle = models["s3tree"](models["backbone"](batch))
    lut = load_colormap()
    written = []
    label_lines = []
    for j in range(1, 8):
        mean_map = bundle.maps[j][0].mean(dim=0).numpy()
        lo, hi = mean_map.min(), mean_map.max()
        if hi - lo < 1e-12:
            norm = np.full_like(mean_map, 0.5)
        else:
            norm = (mean_map - lo) / (hi - lo)
        rgb = lut[np.round(norm * 255).astype(np.int64)]
        img = Image.fromarray(rgb).resize((image.shape[1], image.shape[0]),
                                          Image.BILINEAR)
        path = out_dir / f"node_{j}.png"
        img.save(path, format="PNG")
        written.append(path)

        probs = bundle.probs[j][0]
        words = (vocabs.entity if j in capparse.ENTITY_NODES else vocabs.relation).words
        top = torch.topk(probs, k=min(3, probs.numel()))
        entries = ", ".join(f"{words[i]}:{p:.4f}"
                            for p, i in zip(top.values.tolist(), top.indices.tolist()))
        label_lines.append(f"node_{j}\t{entries}")
    labels_path = out_dir / "labels.txt"
    labels_path.write_text("\n".join(label_lines) + "\n", encoding="utf-8")
    return written + [labels_path]


def cmd_heatmaps(args) -> int:
    written = export_heatmaps(args.ckpt, args.infile, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s3e",
        description="Semantic-tree-guided deblurring and captioning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="blur a directory of sharp images and write a manifest")
    p.add_argument("--sharp", required=True, help="directory of sharp PNG images")
    p.add_argument("--captions", required=True, help="caption file: 'id<TAB>caption' lines")
    p.add_argument("--range", default="sev", help="'less_sev', 'sev', or 'lo,hi'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--max-disp", type=float, default=15.0)
    p.add_argument("--samples", type=int, default=17)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--vocab-dir", help="existing vocab dir for immediate label annotation")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("vocab", help="build vocabularies and annotate tree labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--out", required=True, help="directory for the vocab files")
    p.add_argument("--synonyms", help="optional 'word<TAB>canonical' merge table")
    p.add_argument("--no-annotate", dest="annotate", action="store_false")
    p.set_defaults(fn=cmd_vocab)

    for name, fn in (("pretrain-tree", cmd_pretrain_tree), ("train", cmd_train)):
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=True)
        p.add_argument("--vocab-dir", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (repeatable)")
        p.add_argument("--steps", type=int, help="override the epoch-derived step count")
        p.add_argument("--seed", type=int)
        if name == "train":
            p.add_argument("--init", help="checkpoint to initialize from")
        p.set_defaults(fn=fn)

    p = sub.add_parser("deblur", help="restore one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true",
                   help="seed the inference dropout mask")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_deblur)

    p = sub.add_parser("caption", help="caption one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--strategy", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_caption)

    p = sub.add_parser("eval", help="run metrics over a manifest split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", default="all",
                   choices=("s3tree", "deblur", "captioner", "all"))
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("heatmaps", help="export per-node heatmaps and top-3 labels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_heatmaps)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # runtime failures exit 1, usage errors exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
