"""Tile corpora: manifests with patient-level splits, a procedural IHC tile
synthesizer, and the hue-based staining-status oracle used for evaluation.

Synthetic tiles are rendered in optical-density space (Beer-Lambert): each
pixel's OD is a mix of a hematoxylin (blue counterstain) and a DAB (brown)
stain vector. FFPE tiles are crisp and well stained. FS tiles carry the same
content statistics plus blur, weakened DAB staining and translucent blobs of
the stain that contradicts the tile's label, placed mostly in the center of
the tile (the part the 10x crop sees), so that the wider 5x view contains more
well-stained tissue.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from matplotlib.colors import rgb_to_hsv
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import (
    DataFormatError, ImageTensor, IntegrityError, pixels_to_tensor, stream_seed, tensor_to_pixels,
)

log = logging.getLogger(__name__)

TILE_SIZE = 448
DOMAINS = ("FS", "FFPE")
SPLITS = ("train", "test")
MANIFEST_NAME = "manifest.csv"
LABELS_NAME = "labels.csv"
SPLIT_NAME = "split.csv"
CLEAN_DIR = "FS_clean"

# Ruifrok & Johnston stain OD vectors (unit norm).
HEMATOXYLIN = np.array([0.650, 0.704, 0.286])
DAB = np.array([0.268, 0.570, 0.776])
HEMATOXYLIN = HEMATOXYLIN / np.linalg.norm(HEMATOXYLIN)
DAB = DAB / np.linalg.norm(DAB)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    domain: str
    patient_id: str
    split: str


@dataclass
class CorpusManifest:
    entries: list
    root: Path = Path(".")
    magnification: str = "10x"

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def select(self, domain: str, split: str) -> list[Path]:
        return [self.resolve(e) for e in self.entries if e.domain == domain and e.split == split]

    def patient_splits(self) -> dict[str, set]:
        out: dict[str, set] = {}
        for e in self.entries:
            out.setdefault(e.patient_id, set()).add(e.split)
        return out

    def validate(self, check_files: bool = True) -> None:
        for e in self.entries:
            if e.domain not in DOMAINS:
                raise IntegrityError(f"{e.path}: unknown domain {e.domain!r}")
            if e.split not in SPLITS:
                raise IntegrityError(f"{e.path}: unknown split {e.split!r}")
        leaked = sorted(p for p, s in self.patient_splits().items() if len(s) > 1)
        if leaked:
            raise IntegrityError(f"patients present in both train and test: {leaked}")
        if check_files:
            for e in self.entries:
                check_tile(self.resolve(e))


def check_tile(path: Path) -> None:
    if not path.exists():
        raise IntegrityError(f"missing tile {path}")
    with Image.open(path) as im:
        if im.size != (TILE_SIZE, TILE_SIZE) or im.mode not in ("RGB", "RGBA"):
            raise DataFormatError(f"{path}: expected {TILE_SIZE}x{TILE_SIZE} RGB, got {im.size} {im.mode}")


def write_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "domain", "patient_id", "split"])
        for e in manifest.entries:
            w.writerow([e.path, e.domain, e.patient_id, e.split])


def load_manifest(path: str | Path, check_files: bool = True) -> CorpusManifest:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"path", "domain", "patient_id", "split"}:
        raise DataFormatError(f"{path}: bad manifest header {list(rows[0])}")
    manifest = CorpusManifest([ManifestEntry(**r) for r in rows], root=path.parent)
    manifest.validate(check_files)
    return manifest


def assign_splits(patient_ids: Iterable[str], seed: int, train_fraction: float = 0.8) -> dict[str, str]:
    """Seeded random patient-level assignment; depends only on the set of ids."""
    ids = sorted(set(patient_ids))
    rng = np.random.default_rng(stream_seed(seed, "split"))
    order = rng.permutation(len(ids))
    n_train = int(math.ceil(train_fraction * len(ids)))
    return {ids[j]: ("train" if rank < n_train else "test") for rank, j in enumerate(order)}


def read_split_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pid, split = row["patient_id"], row["split"]
            if split not in SPLITS:
                raise IntegrityError(f"{path}: unknown split {split!r} for {pid}")
            if out.get(pid, split) != split:
                raise IntegrityError(f"{path}: patient {pid} assigned to both train and test")
            out[pid] = split
    return out


def write_split_file(splits: dict[str, str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "split"])
        for pid in sorted(splits):
            w.writerow([pid, splits[pid]])


def scan_corpus(root_dir: str | Path, split_file: str | Path | None = None, seed: int = 0) -> CorpusManifest:
    """Build a manifest from ``root/{FS,FFPE}/<patient>/<tile>.png``.

    Splits come from ``split_file`` (CSV ``patient_id,split``) when it exists;
    otherwise they are generated per patient (80/20) and written to
    ``split_file`` (default ``root/split.csv``).
    """
    root = Path(root_dir)
    split_path = Path(split_file) if split_file else root / SPLIT_NAME
    found = []
    for domain in DOMAINS:
        for tile in sorted((root / domain).glob("*/*.png")):
            check_tile(tile)
            found.append((tile.relative_to(root).as_posix(), domain, tile.parent.name))
    patients = {pid for _, _, pid in found}
    if split_path.exists():
        splits = read_split_file(split_path)
        unassigned = sorted(patients - set(splits))
        if unassigned:
            raise IntegrityError(f"patients missing from {split_path}: {unassigned}")
    else:
        splits = assign_splits(patients, seed)
        write_split_file(splits, split_path)
    manifest = CorpusManifest(
        [ManifestEntry(p, d, pid, splits[pid]) for p, d, pid in found], root=root
    )
    manifest.validate(check_files=False)
    return manifest


def read_labels(path: str | Path) -> dict[str, str]:
    with open(path, newline="") as fh:
        return {r["path"]: r["label"] for r in csv.DictReader(fh)}


# --------------------------------------------------------------------------
# image I/O and iteration order


def read_tile(path: str | Path, dtype=torch.float32) -> torch.Tensor:
    with Image.open(path) as im:
        return pixels_to_tensor(np.asarray(im.convert("RGB")), dtype)


def write_tile(t: torch.Tensor, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tensor_to_pixels(t)).save(path)


def epoch_order(n: int, seed: int, epoch: int, stream: str = "order") -> np.ndarray:
    """Shuffled index order; a pure function of (seed, epoch, stream)."""
    return np.random.default_rng(stream_seed(seed, stream, epoch)).permutation(n)


def sample_index(n: int, seed: int, iteration: int, stream: str) -> int:
    """Index drawn at ``iteration`` when walking epoch orders back to back."""
    epoch, pos = divmod(iteration, n)
    return int(epoch_order(n, seed, epoch, stream)[pos])


# --------------------------------------------------------------------------
# synthesis


@dataclass
class SynthSpec:
    n_train: int = 1000
    n_test: int = 200
    n_train_patients: int = 40
    n_test_patients: int = 10
    nuclei_per_tile: tuple = (24, 48)
    positive_fraction: float = 0.5
    contamination_blob_rate: float = 2.0
    blur_sigma: float = 1.5
    stain_attenuation: float = 0.7
    shared_patients: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must lie in [0, 1]")
        for name in ("contamination_blob_rate", "blur_sigma", "stain_attenuation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.stain_attenuation > 1:
            raise ValueError("stain_attenuation must be <= 1")
        lo, hi = self.nuclei_per_tile
        if not 0 <= lo <= hi:
            raise ValueError("nuclei_per_tile must be an ordered (lo, hi) range")


def _smooth_noise(rng, shape, sigma):
    n = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _od_to_pixels(od: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(255.0 * np.power(10.0, -od)), 0, 255).astype(np.uint8)


@dataclass
class _TileContent:
    """Stain concentration maps (hematoxylin, DAB) before any FS degradation."""
    conc_h: np.ndarray
    conc_d: np.ndarray
    nuclear_d: np.ndarray = field(repr=False)


def _render_content(rng: np.random.Generator, spec: SynthSpec, positive: bool, size: int = TILE_SIZE) -> _TileContent:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    conc_h = 0.05 + 0.025 * _smooth_noise(rng, (size, size), 12)
    conc_h += 0.02 * _smooth_noise(rng, (size, size), 2)
    conc_d = np.zeros((size, size))
    nuclear_d = np.zeros((size, size))
    fine = _smooth_noise(rng, (size, size), 1.0)
    lo, hi = spec.nuclei_per_tile
    for _ in range(int(rng.integers(lo, hi + 1))):
        cy, cx = rng.uniform(-8, size + 8, 2)
        a, b = rng.uniform(8, 15), rng.uniform(6, 11)
        th = rng.uniform(0, np.pi)
        y0, y1 = int(max(cy - 16, 0)), int(min(cy + 17, size))
        x0, x1 = int(max(cx - 16, 0)), int(min(cx + 17, size))
        if y0 >= y1 or x0 >= x1:
            continue
        dy, dx = yy[y0:y1, x0:x1] - cy, xx[y0:y1, x0:x1] - cx
        u = (dx * np.cos(th) + dy * np.sin(th)) / a
        v = (-dx * np.sin(th) + dy * np.cos(th)) / b
        r = np.sqrt(u * u + v * v)
        # ~1 px antialiased edge, darker membrane rim, chromatin texture
        fill = np.clip((1.0 - r) * min(a, b), 0.0, 1.0)
        rim = np.exp(-((r - 0.9) / 0.08) ** 2)
        tex = 1.0 + 0.2 * fine[y0:y1, x0:x1]
        ny, nx = rng.uniform(-0.4, 0.4, 2)
        nucleolus = np.exp(-((u - nx) ** 2 + (v - ny) ** 2) / 0.02)
        if positive:
            d = rng.uniform(0.6, 0.85) * fill * tex * (1 + 0.4 * rim)
            h = 0.35 * fill + 0.4 * nucleolus * fill
        else:
            d = np.zeros_like(fill)
            h = rng.uniform(0.75, 1.0) * fill * tex * (1 + 0.4 * rim) + 0.5 * nucleolus * fill
        conc_h[y0:y1, x0:x1] = np.maximum(conc_h[y0:y1, x0:x1], h)
        conc_d[y0:y1, x0:x1] = np.maximum(conc_d[y0:y1, x0:x1], d)
        nuclear_d[y0:y1, x0:x1] = np.maximum(nuclear_d[y0:y1, x0:x1], fill)
    return _TileContent(conc_h, conc_d, nuclear_d)


def _compose(conc_h, conc_d) -> np.ndarray:
    return conc_h[..., None] * HEMATOXYLIN + conc_d[..., None] * DAB


def render_ffpe(content: _TileContent) -> np.ndarray:
    return _od_to_pixels(_compose(content.conc_h, content.conc_d))


def render_fs(rng: np.random.Generator, content: _TileContent, spec: SynthSpec, positive: bool) -> np.ndarray:
    size = content.conc_h.shape[0]
    conc_h, conc_d = content.conc_h.copy(), content.conc_d.copy()
    if spec.stain_attenuation > 0:
        # weak positive staining: DAB partially lost, hematoxylin mildly
        conc_d *= 1.0 - spec.stain_attenuation * rng.uniform(0.0, 1.0)
        conc_h *= 1.0 - 0.3 * spec.stain_attenuation * rng.uniform(0.0, 1.0)
    n_blobs = rng.poisson(spec.contamination_blob_rate) if spec.contamination_blob_rate > 0 else 0
    if n_blobs:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        c = size / 2
        shape = 1.0 + 0.3 * _smooth_noise(rng, (size, size), 6)
        for _ in range(n_blobs):
            if rng.random() < 0.75:
                cy, cx = rng.uniform(c - size / 4, c + size / 4, 2)
            else:
                cy, cx = rng.uniform(0, size, 2)
            radius = rng.uniform(40, 90)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2)) * shape
            amount = rng.uniform(0.1, 0.3) * np.clip(blob, 0, None)
            # background staining of the contradicting stain
            if positive:
                conc_h = conc_h + amount
            else:
                conc_d = conc_d + amount
    od = _compose(conc_h, conc_d)
    if spec.blur_sigma > 0:
        od = gaussian_filter(od, (spec.blur_sigma, spec.blur_sigma, 0))
    return _od_to_pixels(od)


def synthesize_corpus(spec: SynthSpec, out_dir: str | Path) -> CorpusManifest:
    """Render a synthetic FS/FFPE corpus with manifest, split file and label index.

    Writes ``FS/``, ``FFPE/``, ``FS_clean/`` (undegraded renderings of the FS
    test tiles), ``manifest.csv``, ``split.csv`` and ``labels.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    labels: list[tuple[str, str]] = []
    splits: dict[str, str] = {}

    def patients(domain: str, split: str) -> list[str]:
        n = spec.n_train_patients if split == "train" else spec.n_test_patients
        prefix = "P" if spec.shared_patients or domain == "FS" else "Q"
        offset = 0 if split == "train" else spec.n_train_patients
        return [f"{prefix}{offset + i:03d}" for i in range(n)]

    for domain in DOMAINS:
        for split in SPLITS:
            n = spec.n_train if split == "train" else spec.n_test
            pids = patients(domain, split)
            for i in range(n):
                pid = pids[i % len(pids)]
                splits[pid] = split
                rng = np.random.default_rng(stream_seed(spec.seed, domain, split, i))
                positive = bool(rng.random() < spec.positive_fraction)
                label = "positive" if positive else "negative"
                content = _render_content(rng, spec, positive)
                name = f"{domain.lower()}_{split}_{i:05d}.png"
                rel = f"{domain}/{pid}/{name}"
                if domain == "FFPE":
                    pixels = render_ffpe(content)
                else:
                    pixels = render_fs(rng, content, spec, positive)
                    if split == "test":
                        clean_rel = f"{CLEAN_DIR}/{pid}/{name}"
                        _save(render_ffpe(content), out / clean_rel)
                        labels.append((clean_rel, label))
                _save(pixels, out / rel)
                entries.append(ManifestEntry(rel, domain, pid, split))
                labels.append((rel, label))

    manifest = CorpusManifest(entries, root=out)
    manifest.validate(check_files=False)
    write_manifest(manifest, out / MANIFEST_NAME)
    write_split_file(splits, out / SPLIT_NAME)
    with open(out / LABELS_NAME, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        w.writerows(labels)
    return manifest


def _save(pixels: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)


# --------------------------------------------------------------------------
# staining-status oracle

NUCLEUS_OD_THRESHOLD = 0.25   # mean OD over channels; background ~0.05
MIN_NUCLEUS_PIXELS = 40
POSITIVE_HUES = ((0.0, 90.0), (300.0, 360.0))   # brown / red-brown, degrees
NEGATIVE_HUES = ((150.0, 300.0),)               # blue / violet


def _as_unit_rgb(img) -> np.ndarray:
    if isinstance(img, ImageTensor):
        img = img.data
    if isinstance(img, torch.Tensor):
        return tensor_to_pixels(img).astype(np.float64) / 255.0
    arr = np.asarray(img)
    return arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr


def nuclei_mask(img) -> np.ndarray:
    rgb = _as_unit_rgb(img)
    od = -np.log10(np.clip(rgb, 1.0 / 255.0, 1.0))
    return od.mean(axis=-1) > NUCLEUS_OD_THRESHOLD


def mean_nuclear_hue(img) -> float | None:
    """Hue (degrees) of the mean RGB colour over segmented nuclei, or None."""
    rgb = _as_unit_rgb(img)
    mask = nuclei_mask(rgb)
    if mask.sum() < MIN_NUCLEUS_PIXELS:
        return None
    mean = rgb[mask].mean(axis=0)
    return float(rgb_to_hsv(mean[None, :])[0, 0] * 360.0)


def staining_status_of(img) -> str | None:
    """'positive', 'negative', or None when indeterminate.

    Accepts a CHW tensor / ImageTensor in [-1, 1] or HWC uint8 pixels.
    """
    hue = mean_nuclear_hue(img)
    if hue is None:
        return None
    if any(lo <= hue < hi for lo, hi in POSITIVE_HUES) or hue == 360.0:
        return "positive"
    if any(lo <= hue < hi for lo, hi in NEGATIVE_HUES):
        return "negative"
    return None
