"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion
report, or via the full suite where the asserts alone gate the result.
The overfit runs (criterion 5) dominate the runtime at a few minutes of CPU.
"""

import math
import time

import numpy as np
import pytest
import torch
from torch import nn

from conftest import desk_config, eight_pair_manifest
from semdeblur import blursynth as bs
from semdeblur import gradcheck
from semdeblur.captioner import caption_loss, generate, tokenize
from semdeblur.checkpoint import Checkpoint
from semdeblur.config import TrainConfig
from semdeblur.deblur import CouplingBlock, Generator, critic_wgan_gp_loss
from semdeblur.imgio import load_image
from semdeblur.manifest import Manifest
from semdeblur.metrics import bleu, psnr, ssim
from semdeblur.s3tree import SemanticTree, couple_tree_maps, tree_loss
from semdeblur.torchutil import to_image, to_tensor
from semdeblur.trainer import (build_models, cotrain, infer, lr_schedule,
                               node_accuracy, pretrain_tree, restore_models,
                               total_loss)

GRAD_TOL = 1e-3


def report(num: int, name: str, ok: bool, detail: str = ""):
    print(f"\nACCEPTANCE {num} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


class PixelSumCritic(nn.Module):
    def forward(self, x):
        return x.flatten(1).sum(dim=1)


def overfit_config(**kw):
    base = dict(batch_size=4, image_size=32, backbone_channels=8,
                node_channels=8, node_feat_dim=16, ngf=16, ndf=16,
                embed_dim=16, hidden_size=32, attn_dim=16, dropout=0.0,
                perceptual_channels=16, lr=1e-3, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_criterion_1_gradient_suite():
    start = time.time()
    results = gradcheck.run_suite("all")
    elapsed = time.time() - start
    worst = max(results.values())
    detail = ", ".join(f"{k}={v:.2e}" for k, v in results.items())
    report(1, "gradient suite", worst < GRAD_TOL and elapsed < 120.0,
           f"worst {worst:.2e} in {elapsed:.1f}s ({detail})")


def test_criterion_2_analytic_loss_oracles():
    # uniform tree loss at the full vocabulary sizes (839 entities, 247 relations)
    tree = SemanticTree(3, 4, 4, n_entities=839, n_relations=247, seed=0)
    bundle = tree(torch.zeros(1, 3, 4, 4))
    uniform = tree_loss(bundle, torch.zeros(1, 7, dtype=torch.long)).item()
    expected = 4 * math.log(839) + 3 * math.log(247)
    ok_tree = abs(uniform - expected) < 1e-3

    # gradient penalty of the pixel-sum critic: gp_weight * (sqrt(N) - 1)^2
    ok_gp = True
    gp_details = []
    for h, w in ((2, 2), (3, 3)):
        batch = torch.rand(3, 1, h, w, generator=torch.Generator().manual_seed(0))
        loss = critic_wgan_gp_loss(PixelSumCritic(), batch, batch.clone(),
                                   gp_weight=10.0).item()
        target = 10.0 * (math.sqrt(h * w) - 1.0) ** 2
        ok_gp &= abs(loss - target) < 1e-5
        gp_details.append(f"{h}x{w}:{loss:.6f}")

    ok_total = total_loss(1.0, 2.0, 3.0, TrainConfig()) == 31.01
    report(2, "analytic loss oracles", ok_tree and ok_gp and ok_total,
           f"uniform tree {uniform:.5f} vs {expected:.5f}; "
           f"gp {' '.join(gp_details)}; total_loss(1,2,3)=31.01 {ok_total}")


def test_criterion_3_metric_oracles():
    p = psnr(np.zeros((1, 1)), np.full((1, 1), 0.5))
    img = np.random.default_rng(0).random((16, 16, 3))
    s_same = ssim(img, img.copy())
    s_const = ssim(np.zeros((16, 16)), np.ones((16, 16)))
    b = bleu("the the the".split(), ["the cat".split()], 1)
    ok = (abs(p - 6.0206) < 1e-4 and abs(s_same - 1.0) < 1e-9
          and abs(s_const - 9.999e-5) < 1e-7 and abs(b - 1.0 / 3.0) < 1e-4)
    report(3, "metric oracles", ok,
           f"psnr={p:.5f} ssim_same={s_same:.10f} ssim_const={s_const:.3e} bleu={b:.5f}")


def test_criterion_4_structural_checks():
    ok_channels = True
    for ngf in (4, 8, 16):
        block = CouplingBlock(tree_channels=14, layer_channels=2 * ngf)
        out = block(torch.rand(1, 2 * ngf, 8, 8), torch.rand(1, 14, 8, 8))
        ok_channels &= out.shape[1] == 4 * ngf

    tree = SemanticTree(3, 4, 4, 5, 4, seed=0)
    V = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    before = tree(V)
    with torch.no_grad():
        tree.decouple_convs["1"].weight.add_(0.25)
    after = tree(V)
    ok_local = all(torch.equal(before.maps[j], after.maps[j]) for j in (3, 5, 6, 7)) \
        and all(not torch.equal(before.maps[j], after.maps[j]) for j in (1, 2, 4))

    gen = Generator(ngf=4, tree_channels=14, n_res_blocks=2, dropout=0.0, seed=0)
    with torch.no_grad():
        gen.out_conv.weight.zero_()
        gen.out_conv.bias.zero_()
    image = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(2))
    ok_identity = torch.equal(gen(image), image)
    report(4, "structural checks", ok_channels and ok_local and ok_identity,
           f"coupling 2c'' {ok_channels}, locality {ok_local}, identity {ok_identity}")


def test_criterion_5a_tree_pretraining(toy_dataset):
    config = overfit_config(backbone_channels=16, node_channels=16, lr=3e-3)
    start = time.time()
    ckpt = pretrain_tree(toy_dataset["manifest"], config, toy_dataset["vocabs"],
                         steps=300)
    _, models, _ = restore_models(ckpt)
    manifest = toy_dataset["manifest"]
    blurry = torch.stack([to_tensor(load_image(manifest.resolve(r.blurry_path)))
                          for r in manifest.records])
    labels = torch.tensor([r.tree_labels[0] for r in manifest.records])
    with torch.no_grad():
        bundle = models["s3tree"](models["backbone"](blurry))
    acc = float(np.mean(node_accuracy(bundle, labels)))
    report(5, "overfit (a) tree pretraining", acc >= 0.95,
           f"node accuracy {acc:.3f} on 16 samples after 300 steps "
           f"({time.time() - start:.0f}s)")


@pytest.fixture(scope="module")
def cotrain_500(toy_dataset):
    manifest = eight_pair_manifest(toy_dataset)
    config = overfit_config()
    start = time.time()
    ckpt = cotrain(manifest, config, toy_dataset["vocabs"], joint_steps=500)
    return {"ckpt": ckpt, "manifest": manifest, "seconds": time.time() - start}


def test_criterion_5b_cotraining_psnr_gain(cotrain_500):
    manifest = cotrain_500["manifest"]
    _, models, _ = restore_models(cotrain_500["ckpt"])
    base, restored = [], []
    for record in manifest.records:
        blurry_img = load_image(manifest.resolve(record.blurry_path))
        sharp_img = load_image(manifest.resolve(record.sharp_path))
        base.append(psnr(blurry_img, sharp_img))
        out, _, _ = infer(models, to_tensor(blurry_img).unsqueeze(0))
        restored.append(psnr(to_image(out[0]).astype(np.float64), sharp_img))
    gain = float(np.mean(restored) - np.mean(base))
    report(5, "overfit (b) co-training PSNR gain", gain >= 2.0,
           f"blurry {np.mean(base):.2f} dB -> restored {np.mean(restored):.2f} dB "
           f"(+{gain:.2f} dB, 500 joint steps in {cotrain_500['seconds']:.0f}s)")


def test_criterion_5c_captioner_overfit(toy_dataset):
    config = overfit_config(backbone_channels=16, node_channels=16,
                            embed_dim=32, hidden_size=48)
    vocabs = toy_dataset["vocabs"]
    manifest = eight_pair_manifest(toy_dataset)
    models = build_models(config, vocabs)
    records = manifest.records
    blurry = torch.stack([to_tensor(load_image(manifest.resolve(r.blurry_path)))
                          for r in records])
    rows = [vocabs.caption.encode(r.captions[0]) for r in records]
    width = max(len(row) for row in rows)
    tokens = torch.tensor([row + [vocabs.caption.pad_id] * (width - len(row))
                           for row in rows])
    with torch.no_grad():
        V = models["backbone"](blurry)
        bundle = models["s3tree"](V)
    decoder = models["captioner"]
    opt = torch.optim.Adam(decoder.parameters(), lr=5e-3)
    start = time.time()
    for _ in range(400):
        loss = caption_loss(decoder, V, bundle, tokens, vocabs.caption.pad_id)
        opt.zero_grad()
        loss.backward()
        opt.step()

    def single(i):
        maps = {j: bundle.maps[j][i:i + 1] for j in range(1, 8)}
        h = {j: bundle.h[j][i:i + 1] for j in range(1, 8)}
        logits = {j: bundle.logits[j][i:i + 1] for j in range(1, 8)}
        probs = {j: bundle.probs[j][i:i + 1] for j in range(1, 8)}
        return type(bundle)(maps=maps, h=h, logits=logits, probs=probs)

    per_token, exact = [], 0
    for i, record in enumerate(records):
        bi = single(i)
        with torch.no_grad():
            li = caption_loss(decoder, V[i:i + 1], bi, tokens[i:i + 1],
                              vocabs.caption.pad_id).item()
        n_predicted = sum(1 for t in tokens[i].tolist()[1:]
                          if t != vocabs.caption.pad_id)
        per_token.append(li / n_predicted)
        ids = generate(decoder, V[i:i + 1], bi, "greedy", max_len=12)
        exact += int(vocabs.caption.decode(ids)
                     == " ".join(tokenize(record.captions[0])))
    nll = float(np.mean(per_token))
    report(5, "overfit (c) captioner", nll < 0.5 and exact >= 6,
           f"per-token NLL {nll:.4f}, {exact}/8 exact greedy decodes "
           f"({time.time() - start:.0f}s)")


def test_criterion_6_blur_synthesis(tmp_path):
    # constant-flow blur against the explicit 1-D line-kernel oracle
    rng = np.random.default_rng(1)
    row = rng.random((1, 48, 1))
    img = np.repeat(np.repeat(row, 16, axis=0), 3, axis=2)
    k, n = 5.0, 17
    flow = bs.MotionFlow(field=np.stack([np.full((16, 48), k),
                                         np.zeros((16, 48))], axis=-1), severity=1.0)
    blurred = bs.apply_motion_blur(img, flow, n_samples=n)
    taps = {}
    for t in np.linspace(-0.5, 0.5, n):
        offset = k * t
        lo = int(np.floor(offset))
        frac = offset - lo
        taps[lo] = taps.get(lo, 0.0) + (1.0 - frac) / n
        taps[lo + 1] = taps.get(lo + 1, 0.0) + frac / n
    expected = np.zeros(48)
    for off, wgt in taps.items():
        expected += wgt * row[0, np.clip(np.arange(48) + off, 0, 47), 0]
    conv_err = float(np.max(np.abs(blurred[8, :, 0] - expected)))

    # severity ordering over 20 seeded images
    from conftest import make_toy_image
    img_rng = np.random.default_rng(5)
    gaps = []
    for seed in range(20):
        sharp = make_toy_image(img_rng)
        less = bs.apply_motion_blur(sharp, bs.sample_motion_flow(32, 32, bs.LESS_SEV, seed))
        sev = bs.apply_motion_blur(sharp, bs.sample_motion_flow(32, 32, bs.SEV, seed))
        gaps.append((psnr(less, sharp), psnr(sev, sharp)))
    mean_less = float(np.mean([g[0] for g in gaps]))
    mean_sev = float(np.mean([g[1] for g in gaps]))

    zero = bs.MotionFlow(field=np.zeros((32, 32, 2)), severity=0.0)
    sharp = make_toy_image(np.random.default_rng(9))
    ok_zero = np.array_equal(bs.apply_motion_blur(sharp, zero), sharp)
    report(6, "blur synthesis", conv_err < 1e-6 and mean_sev < mean_less and ok_zero,
           f"conv oracle err {conv_err:.2e}; PSNR sev {mean_sev:.2f} < "
           f"less_sev {mean_less:.2f}; zero-flow identity {ok_zero}")


def test_criterion_7_determinism(toy_dataset, tmp_path):
    manifest = eight_pair_manifest(toy_dataset)
    config = overfit_config(dropout=0.1, seed=3)
    traces = []
    for _ in range(2):
        ckpt = cotrain(manifest, config, toy_dataset["vocabs"], joint_steps=10)
        traces.append([e["total"] for e in ckpt.history["joint"]])
    ok_trace = traces[0] == traces[1]

    ckpt.save(tmp_path / "a.s3ed")
    Checkpoint.load(tmp_path / "a.s3ed").save(tmp_path / "b.s3ed")
    ok_ckpt = (tmp_path / "a.s3ed").read_bytes() == (tmp_path / "b.s3ed").read_bytes()

    from conftest import write_toy_sources
    sharp_dir, captions = write_toy_sources(tmp_path, n_images=4, seed=31)
    serial = bs.make_dataset(sharp_dir, captions, bs.SEV, 2, tmp_path / "serial")
    parallel = bs.make_dataset(sharp_dir, captions, bs.SEV, 2,
                               tmp_path / "parallel", jobs=3)
    ok_synth = all(
        (tmp_path / "serial" / a.blurry_path).read_bytes()
        == (tmp_path / "parallel" / b.blurry_path).read_bytes()
        for a, b in zip(serial.records, parallel.records))
    report(7, "determinism", ok_trace and ok_ckpt and ok_synth,
           f"10-step trace bitwise {ok_trace}, checkpoint round-trip {ok_ckpt}, "
           f"parallel==serial synthesis {ok_synth}")


def test_criterion_8_schedule_conformance(toy_dataset):
    manifest = eight_pair_manifest(toy_dataset)
    ckpt = cotrain(manifest, overfit_config(), toy_dataset["vocabs"], joint_steps=4)
    counts = ckpt.history["steps"][-1]
    ok_ratio = counts["critic"] == 5 * counts["joint"] and counts["joint"] == 4

    config = TrainConfig()
    ok_lr = (lr_schedule(0, config) == 1e-4 and lr_schedule(149, config) == 1e-4
             and lr_schedule(225, config) == pytest.approx(5e-5)
             and lr_schedule(300, config) == 0.0)
    report(8, "schedule conformance", ok_ratio and ok_lr,
           f"critic:joint = {counts['critic']}:{counts['joint']}; "
           f"lr(0)={lr_schedule(0, config):.0e}, lr(225)={lr_schedule(225, config):.1e}, "
           f"lr(300)={lr_schedule(300, config):.1f}")
