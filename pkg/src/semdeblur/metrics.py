"""Image and caption quality metrics plus the evaluation harness."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

import torch

from .captioner import generate, tokenize
from .checkpoint import Checkpoint
from .errors import ShapeError
from .imgio import load_image
from .manifest import Manifest
from .seeding import derive_seed
from .torchutil import to_tensor

PSNR_CAP = 100.0

_LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB for (near-)identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse))


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    xs = np.arange(window) - (window - 1) / 2.0
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    r = len(kernel) // 2
    return out[r:-r, r:-r] if r else out


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, peak: float = 1.0,
         per_channel: bool = False) -> float:
    """Gaussian-windowed SSIM, averaged over valid positions (and channels).

    RGB inputs are converted to Rec. 601 luma unless per_channel is set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window:
        raise ShapeError(f"image smaller than the {window}x{window} window")
    if a.ndim == 3:
        if per_channel:
            return float(np.mean([ssim(a[..., c], b[..., c], window, sigma,
                                       k1, k2, peak) for c in range(a.shape[2])]))
        a = a @ _LUMA
        b = b @ _LUMA
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    kernel = _gaussian_kernel(window, sigma)
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    var_a = _windowed_mean(a * a, kernel) - mu_a**2
    var_b = _windowed_mean(b * b, kernel) - mu_b**2
    cov = _windowed_mean(a * b, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: list[str], references: list[list[str]], n: int = 4) -> float:
    """Corpus-standard BLEU-n: clipped precisions, geometric mean, brevity
    penalty, no smoothing."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    if not candidate:
        return 0.0
    if not references:
        raise ValueError("at least one reference is required")
    log_precisions = []
    for k in range(1, n + 1):
        cand_counts = _ngram_counts(candidate, k)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in _ngram_counts(ref, k).items():
                max_ref[gram] = max(max_ref[gram], count)
        clipped = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
        if clipped == 0:
            return 0.0
        log_precisions.append(np.log(clipped / total))
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c > r else float(np.exp(1.0 - r / c))
    return float(bp * np.exp(np.mean(log_precisions)))


@dataclass
class EvalItem:
    id: str
    psnr: float
    ssim: float
    bleu: tuple[float, float, float, float]
    caption: str


@dataclass
class EvalReport:
    items: list[EvalItem] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.items)

    def mean(self, attr: str, idx: int | None = None) -> float:
        if not self.items:
            return 0.0
        if idx is None:
            return float(np.mean([getattr(item, attr) for item in self.items]))
        return float(np.mean([getattr(item, attr)[idx] for item in self.items]))

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"count: {self.count}\n")
            f.write(f"mean_psnr: {self.mean('psnr'):.6f}\n")
            f.write(f"mean_ssim: {self.mean('ssim'):.6f}\n")
            for k in range(4):
                f.write(f"mean_bleu{k + 1}: {self.mean('bleu', k):.6f}\n")
            for key, value in sorted(self.config.items()):
                f.write(f"config.{key}: {value}\n")
            f.write("\nid\tpsnr\tssim\tbleu1\tbleu2\tbleu3\tbleu4\tcaption\n")
            for item in self.items:
                bleus = "\t".join(f"{v:.6f}" for v in item.bleu)
                f.write(f"{item.id}\t{item.psnr:.6f}\t{item.ssim:.6f}\t"
                        f"{bleus}\t{item.caption}\n")


def evaluate(manifest: Manifest, checkpoint_path, out_path, split: str = "test",
             max_len: int = 16, seed: int = 0) -> EvalReport:
    """Deblur + caption every record in a split; write the report and the
    candidate/reference caption exports next to it."""
    from .s3tree import couple_tree_maps  # deferred: keeps import graph flat
    from .trainer import restore_models

    ckpt = Checkpoint.load(checkpoint_path)
    config, models, vocabs = restore_models(ckpt)
    records = manifest.split(split)
    report = EvalReport(config=dict(ckpt.config))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cand_lines, ref_lines = [], []
    rng = torch.Generator().manual_seed(derive_seed(seed, "eval-dropout"))
    for record in records:
        blurry = load_image(manifest.resolve(record.blurry_path))
        sharp = load_image(manifest.resolve(record.sharp_path))
        batch = to_tensor(blurry).unsqueeze(0)
        with torch.no_grad():
            V = models["backbone"](batch)
            bundle = models["s3tree"](V)
            restored = models["generator"](batch, couple_tree_maps(bundle), rng)
        restored_img = restored[0].permute(1, 2, 0).numpy().astype(np.float64)
        ids = generate(models["captioner"], V, bundle, "greedy", max_len=max_len,
                       bos_id=vocabs.caption.bos_id, eos_id=vocabs.caption.eos_id)
        caption = vocabs.caption.decode(ids)
        refs = [tokenize(c) for c in record.captions]
        scores = tuple(bleu(tokenize(caption), refs, n) for n in (1, 2, 3, 4))
        report.items.append(EvalItem(
            id=record.id, psnr=psnr(restored_img, sharp),
            ssim=ssim(restored_img, sharp), bleu=scores, caption=caption))
        cand_lines.append(f"{record.id}\t{caption}\n")
        ref_lines.extend(f"{record.id}\t{c}\n" for c in record.captions)
    report.write(out_path)
    (out_path.parent / "candidates.txt").write_text("".join(cand_lines), encoding="utf-8")
    (out_path.parent / "references.txt").write_text("".join(ref_lines), encoding="utf-8")
    return report
