"""Synthetic motion blur: smooth per-pixel displacement fields sampled at a
severity level, integrated along symmetric exposure paths."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import ManifestError
from .imgio import load_image, save_image
from .seeding import derive_seed


@dataclass(frozen=True)
class SeverityRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo <= self.hi <= 1.0):
            raise ValueError(f"invalid severity range [{self.lo}, {self.hi}]")


LESS_SEV = SeverityRange(0.2, 0.5)
SEV = SeverityRange(0.5, 1.0)
NAMED_RANGES = {"less_sev": LESS_SEV, "sev": SEV}


@dataclass
class MotionFlow:
    """Per-pixel displacement field (H, W, 2) as (dx, dy), plus its severity."""

    field: np.ndarray
    severity: float


def _bilinear_grid(coarse: np.ndarray, height: int, width: int) -> np.ndarray:
    """Upsample a (g, g, 2) control grid to (H, W, 2) with corners aligned."""
    g = coarse.shape[0]
    ys = np.linspace(0.0, g - 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(0.0, g - 1.0, width) if width > 1 else np.zeros(1)
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((height, width, 2))
    for k in range(2):
        out[..., k] = map_coordinates(coarse[..., k], [cy, cx], order=1, mode="nearest")
    return out


def sample_motion_flow(width: int, height: int, sev_range: SeverityRange,
                       seed: int, max_disp: float = 15.0,
                       grid: int = 4) -> MotionFlow:
    """Smooth random flow whose peak displacement is severity * max_disp.

    Severity is drawn uniformly from the range; the field is a coarse
    Gaussian control grid bilinearly upsampled, rescaled so its largest
    displacement vector has norm severity * max_disp. Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    severity = float(rng.uniform(sev_range.lo, sev_range.hi))
    coarse = rng.standard_normal((grid, grid, 2))
    field = _bilinear_grid(coarse, height, width)
    norms = np.sqrt((field ** 2).sum(axis=-1))
    peak = norms.max()
    if peak > 0.0:
        field = field * (severity * max_disp / peak)
    else:
        field = np.zeros_like(field)
    return MotionFlow(field=field, severity=severity)


def apply_motion_blur(image: np.ndarray, flow: MotionFlow,
                      n_samples: int = 17) -> np.ndarray:
    """Average bilinear samples along p - flow/2 .. p + flow/2 per pixel.

    Borders clamp to the edge; zero flow returns the input unchanged.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    field = flow.field
    if image.shape[:2] != field.shape[:2]:
        raise ValueError(f"flow shape {field.shape[:2]} does not match "
                         f"image {image.shape[:2]}")
    if not field.any():
        return image.copy()
    height, width = image.shape[:2]
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    acc = np.zeros_like(image)
    for t in np.linspace(-0.5, 0.5, n_samples):
        sy = ys + field[..., 1] * t
        sx = xs + field[..., 0] * t
        for c in range(image.shape[2]):
            acc[..., c] += map_coordinates(image[..., c], [sy, sx],
                                           order=1, mode="nearest")
    return np.clip(acc / n_samples, 0.0, 1.0)


def _read_captions_file(path) -> dict[str, list[str]]:
    """Caption file: one "image_id<TAB>caption" line per caption."""
    captions: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ManifestError(f"{path}:{lineno}: expected 'id<TAB>caption'")
            image_id, caption = line.split("\t", 1)
            captions.setdefault(image_id, []).append(caption)
    return captions


def assign_split(seed: int, image_id: str,
                 fracs: tuple[float, float, float]) -> str:
    """Deterministic train/val/test assignment from the image id."""
    u = (derive_seed(seed, f"split:{image_id}") % 10**9) / 10**9
    if u < fracs[0]:
        return "train"
    if u < fracs[0] + fracs[1]:
        return "val"
    return "test"


def make_dataset(sharp_dir, captions_file, sev_range: SeverityRange, seed: int,
                 out_dir, *, max_disp: float = 15.0, n_samples: int = 17,
                 grid: int = 4, split_fracs: tuple[float, float, float] = (0.8, 0.1, 0.1),
                 ent_vocab=None, rel_vocab=None, jobs: int = 1):
    """Blur every sharp PNG and write blurred images plus a JSONL manifest.

    Per-image seeds derive from (seed, image id), so parallel and serial
    runs produce identical outputs. Tree labels are filled only when both
    vocabularies are provided; otherwise the `vocab` step annotates later.
    """
    from .manifest import Manifest, ManifestRecord  # local import, avoids cycle

    sharp_dir = Path(sharp_dir)
    out_dir = Path(out_dir)
    blur_dir = out_dir / "blur"
    blur_dir.mkdir(parents=True, exist_ok=True)
    captions = _read_captions_file(captions_file) if captions_file else {}
    images = sorted(sharp_dir.glob("*.png"))

    def build_record(path: Path) -> ManifestRecord:
        image_id = path.stem
        caps = captions.get(image_id)
        if not caps:
            raise ManifestError(f"no caption for image {image_id!r}")
        sharp = load_image(path)
        flow = sample_motion_flow(sharp.shape[1], sharp.shape[0], sev_range,
                                  seed=derive_seed(seed, f"flow:{image_id}"),
                                  max_disp=max_disp, grid=grid)
        blurred = apply_motion_blur(sharp, flow, n_samples)
        blurry_path = blur_dir / f"{image_id}.png"
        save_image(blurry_path, blurred)
        labels = []
        if ent_vocab is not None and rel_vocab is not None:
            from .capparse import prune_to_tree, tag_caption
            labels = [list(prune_to_tree(tag_caption(c), ent_vocab, rel_vocab).node_labels)
                      for c in caps]
        return ManifestRecord(
            id=image_id,
            sharp_path=str(path.resolve()),
            blurry_path=str(blurry_path.relative_to(out_dir)),
            severity=flow.severity,
            captions=list(caps),
            tree_labels=labels,
            split=assign_split(seed, image_id, split_fracs),
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(build_record, images))
    else:
        records = [build_record(p) for p in images]

    manifest = Manifest(records=records, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
