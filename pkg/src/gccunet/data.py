"""Fundus samples: DRIVE-layout loading, synthetic vessels, patches, and mask I/O."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".gif", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm")
LAYOUT_DIRS = ("images", "labels", "masks")


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass
class FundusSample:
    """Image [C,H,W] in [0,1] with binary vessel label and field-of-view mask [H,W]."""

    image: np.ndarray
    label: np.ndarray
    fov: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 2:
            self.image = self.image[None]
        self.label = np.asarray(self.label, dtype=np.uint8)
        self.fov = np.asarray(self.fov, dtype=np.uint8)
        if self.image.ndim != 3:
            raise DataError(f"{self.name}: image must be [C,H,W], got {self.image.shape}")
        hw = self.image.shape[1:]
        if self.label.shape != hw or self.fov.shape != hw:
            raise DataError(f"{self.name}: label {self.label.shape} / fov {self.fov.shape} do not match image {hw}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise DataError(f"{self.name}: image values must lie in [0, 1]")
        if self.label.max() > 1 or self.fov.max() > 1:
            raise DataError(f"{self.name}: label and fov must be binary")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


@dataclass
class DatasetSpec:
    """Where samples come from and how they are cut into patches."""

    source: str = "synthetic"  # "synthetic" or "drive"
    path: Optional[str] = None
    seed: int = 0
    count: int = 250
    size: int = 48
    split: str = "train"
    patch_size: int = 48
    patch_stride: int = 24

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self, depth: int) -> "DatasetSpec":
        if self.source not in ("synthetic", "drive"):
            raise DataError(f"unknown dataset source {self.source!r}")
        if self.source == "drive" and not self.path:
            raise DataError("a DRIVE dataset needs a path")
        if self.patch_size % 2 ** depth:
            raise DataError(f"patch size {self.patch_size} must be divisible by {2 ** depth}")
        return self


def _read_raster(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            # palette (DRIVE's GIF masks) and 1-bit rasters become plain intensities
            if img.mode in ("P", "PA"):
                img = img.convert("RGB")
            elif img.mode == "1":
                img = img.convert("L")
            return np.array(img)
    except OSError as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc


def _to_gray(arr: np.ndarray) -> np.ndarray:
    # colour fundus images keep the green channel, where vessels contrast best
    if arr.ndim == 3:
        arr = arr[..., 1]
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64) / 255.0


def _binary_raster(path: Path) -> np.ndarray:
    arr = _read_raster(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 255))):
        bad = [int(v) for v in values if v not in (0, 255)][:5]
        raise DataError(f"{path}: binary raster must contain only 0 and 255, found {bad}")
    return (arr == 255).astype(np.uint8)


def _index_dir(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise FileNotFoundError(f"missing directory {folder}")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_drive_layout(root) -> list[FundusSample]:
    """Load ``root/{images,labels,masks}`` triplets matched by file stem, sorted by stem."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    images, labels, masks = (_index_dir(root / d) for d in LAYOUT_DIRS)
    if not images:
        raise DataError(f"{root / 'images'} contains no images")
    samples = []
    for stem in sorted(images):
        for kind, table in (("label", labels), ("mask", masks)):
            if stem not in table:
                raise FileNotFoundError(f"sample {stem!r}: missing {kind} file in {root / (kind + 's')}")
        image = _to_gray(_read_raster(images[stem]))
        label = _binary_raster(labels[stem])
        fov = _binary_raster(masks[stem])
        if label.shape != image.shape or fov.shape != image.shape:
            raise DataError(f"sample {stem!r}: image {image.shape}, label {label.shape}, mask {fov.shape} differ")
        samples.append(FundusSample(image[None], label, fov, name=stem))
    return samples


def drive_split(samples: list[FundusSample]) -> tuple[list[FundusSample], list[FundusSample]]:
    """First half for training, second half for testing."""
    half = len(samples) // 2
    return samples[:half], samples[half:]


def _walk(rng: np.random.Generator, size: int) -> np.ndarray:
    """One random-walk skeleton entering from the border; returns [n, 2] integer pixels."""
    side = rng.integers(4)
    t = rng.uniform(0.15, 0.85) * (size - 1)
    start, heading = {
        0: ((0.0, t), np.pi / 2),
        1: ((size - 1.0, t), -np.pi / 2),
        2: ((t, 0.0), 0.0),
        3: ((t, size - 1.0), np.pi),
    }[int(side)]
    # heading measured from the +column axis toward +row
    angle = heading + rng.uniform(-0.6, 0.6)
    turn = 0.0
    pos = np.array(start)
    pts = [np.round(pos).astype(int)]
    for _ in range(2 * size):
        turn = 0.7 * turn + rng.normal(0.0, 0.05)
        angle += turn
        pos = pos + np.array([np.sin(angle), np.cos(angle)])
        if pos.min() < 0 or pos.max() > size - 1:
            break
        p = np.round(pos).astype(int)
        if not np.array_equal(p, pts[-1]):
            pts.append(p)
    return np.array(pts)


_FOOTPRINTS = {
    1: np.ones((1, 1), bool),
    2: np.ones((2, 2), bool),
    3: ndimage.generate_binary_structure(2, 1),
}


def generate_synthetic(seed: int, count: int, size: int, return_branches: bool = False):
    """Seeded curvilinear vessel images.

    Each sample has 2 to 4 random-walk branches of width 1 to 3 px, dark on
    a smooth bright background with additive noise. The field of view is the
    whole frame. With ``return_branches`` a list of per-sample branch
    skeleton masks is returned as well.
    """
    if size < 16 or size % 8:
        raise DataError(f"synthetic size must be >= 16 and divisible by 8, got {size}")
    rng = np.random.default_rng(seed)
    samples, branches = [], []
    for idx in range(count):
        label = np.zeros((size, size), bool)
        skeletons = []
        for _ in range(int(rng.integers(2, 5))):
            pts = _walk(rng, size)
            while len(pts) < size // 2:
                pts = _walk(rng, size)
            skel = np.zeros((size, size), bool)
            skel[pts[:, 0], pts[:, 1]] = True
            width = int(rng.integers(1, 4))
            label |= ndimage.binary_dilation(skel, _FOOTPRINTS[width]) if width > 1 else skel
            skeletons.append(skel)
        background = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), size / 6.0)
        background = 0.6 + 0.1 * background / (np.abs(background).max() + 1e-12)
        contrast = rng.uniform(0.25, 0.4)
        vessels = ndimage.gaussian_filter(label.astype(np.float64), 0.6)
        image = background - contrast * vessels + rng.normal(0.0, 0.03, (size, size))
        image = np.clip(image, 0.0, 1.0)
        samples.append(FundusSample(image[None], label.astype(np.uint8), np.ones((size, size), np.uint8),
                                    name=f"synth_{seed}_{idx:04d}"))
        branches.append(skeletons)
    return (samples, branches) if return_branches else samples


def extract_patches(s: FundusSample, size: int, stride: int) -> list[FundusSample]:
    """Row-major sliding-window crops of image, label and fov."""
    H, W = s.shape
    if size < 1 or stride < 1:
        raise DataError("patch size and stride must be >= 1")
    if size > min(H, W):
        raise DataError(f"patch size {size} exceeds sample extents {H}x{W}")
    out = []
    for i in range(0, H - size + 1, stride):
        for j in range(0, W - size + 1, stride):
            out.append(FundusSample(
                s.image[:, i:i + size, j:j + size].copy(), s.label[i:i + size, j:j + size].copy(),
                s.fov[i:i + size, j:j + size].copy(), name=f"{s.name}@{i},{j}"))
    return out


def augment(s: FundusSample, rng: np.random.Generator) -> FundusSample:
    """Random horizontal flip and quarter turn (off unless requested)."""
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))

    def tf(a, axes):
        a = np.rot90(a, k, axes=axes)
        return np.flip(a, axis=axes[1]) if flip else a

    return FundusSample(tf(s.image, (1, 2)).copy(), tf(s.label, (0, 1)).copy(), tf(s.fov, (0, 1)).copy(), s.name)


def stack(samples: list[FundusSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]), np.stack([s.label for s in samples]),
            np.stack([s.fov for s in samples]))


def mask_to_bytes(mask: np.ndarray) -> np.ndarray:
    """Probabilities in [0,1] to uint8 by x*255 rounded half up."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise DataError(f"mask must be [H,W], got {mask.shape}")
    if not np.all(np.isfinite(mask)) or mask.min() < 0 or mask.max() > 1:
        raise DataError("mask values must lie in [0, 1]")
    return np.floor(mask * 255.0 + 0.5).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    path = Path(path)
    try:
        Image.fromarray(mask_to_bytes(mask), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write mask {path}: {exc}") from exc


def load_mask(path) -> np.ndarray:
    arr = _read_raster(Path(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.float64) / 255.0


def write_drive_layout(samples: list[FundusSample], root) -> None:
    """Write samples as 8-bit PNG triplets under ``root/{images,labels,masks}``."""
    root = Path(root)
    for d in LAYOUT_DIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    for s in samples:
        gray = s.image[0] if s.image.shape[0] == 1 else s.image[1]
        save_mask(gray, root / "images" / f"{s.name}.png")
        Image.fromarray(s.label * 255).save(root / "labels" / f"{s.name}.png")
        Image.fromarray(s.fov * 255).save(root / "masks" / f"{s.name}.png")
