"""Fundus dataset ingestion, preprocessing and random patch extraction.

Dataset layout on disk::

    <root>/images/<id>.png   RGB or grayscale fundus image
    <root>/masks/<id>.png    vessel annotation (nonzero = vessel)
    <root>/fov/<id>.png      field-of-view mask (optional; nonzero = inside)

PNG and the PGM/PPM/PNM family are accepted. DRIVE ships TIFF/GIF files,
which must be converted first (any image tool will do).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .engine import bten
from .engine.tensor import Tensor
from .errors import FormatError, IngestionError, ParameterError

RASTER_EXTENSIONS = (".png", ".pgm", ".ppm", ".pnm")
LUMA = np.array([0.299, 0.587, 0.114])
DEFAULT_PATCH = 48
DEFAULT_TRAIN = 170_000
DEFAULT_VAL = 19_000


@dataclass
class FundusImage:
    image: np.ndarray
    mask: np.ndarray
    fov: np.ndarray
    id: str = ""

    def __post_init__(self):
        hw = self.image.shape[:2]
        if self.mask.shape != hw or self.fov.shape != hw:
            raise IngestionError(
                f"{self.id}: raster sizes differ (image {hw}, mask {self.mask.shape}, fov {self.fov.shape})"
            )
        for label, arr in (("mask", self.mask), ("fov", self.fov)):
            if not np.isin(arr, (0, 1)).all():
                raise IngestionError(f"{self.id}: {label} is not binary")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


def _read_raster(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        return np.asarray(im)


def _find(folder: Path, stem: str) -> Optional[Path]:
    for ext in RASTER_EXTENSIONS:
        p = folder / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def _binary(raster: np.ndarray) -> np.ndarray:
    if raster.ndim == 3:
        raster = raster.max(axis=2)
    return (raster > 127).astype(np.uint8)


def load_dataset(root) -> list[FundusImage]:
    """Load every image/mask/FOV triplet under ``root``, sorted by id.

    Everything is validated before anything is returned, so a failure never
    yields a partial list.
    """
    root = Path(root)
    img_dir, mask_dir, fov_dir = root / "images", root / "masks", root / "fov"
    if not img_dir.is_dir():
        raise IngestionError(f"{root}: no images/ directory")
    stems = sorted(p.stem for p in img_dir.iterdir() if p.suffix.lower() in RASTER_EXTENSIONS)
    if not stems:
        raise IngestionError(f"{root}: images/ holds no PNG/PGM/PPM files")
    out = []
    for stem in stems:
        mask_path = _find(mask_dir, stem)
        if mask_path is None:
            raise IngestionError(f"{stem}: missing vessel mask in {mask_dir}")
        image = _read_raster(_find(img_dir, stem))
        mask = _binary(_read_raster(mask_path))
        fov_path = _find(fov_dir, stem) if fov_dir.is_dir() else None
        if fov_dir.is_dir() and fov_path is None:
            raise IngestionError(f"{stem}: missing FOV mask in {fov_dir}")
        fov = _binary(_read_raster(fov_path)) if fov_path else np.ones(image.shape[:2], np.uint8)
        out.append(FundusImage(image=image, mask=mask, fov=fov, id=stem))
    return out


def luminance(image: np.ndarray) -> np.ndarray:
    """Grayscale in [0, 1]; 8-bit input is divided by 255."""
    img = np.asarray(image)
    scale = 255.0 if np.issubdtype(img.dtype, np.integer) else 1.0
    img = img.astype(np.float64) / scale
    if img.ndim == 3:
        img = img[..., :3] @ LUMA
    return img


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def preprocess_array(img: FundusImage, clahe: bool = False, gamma: Optional[float] = None) -> np.ndarray:
    gray = luminance(img.image)
    inside = gray[img.fov.astype(bool)] if img.fov.any() else gray.ravel()
    sd = inside.std()
    z = (gray - inside.mean()) / sd if sd > 1e-12 else np.zeros_like(gray)
    out = minmax_normalize(z)
    if clahe:
        from skimage import exposure

        out = exposure.equalize_adapthist(out)
    if gamma is not None:
        out = out**gamma
    if clahe or gamma is not None:
        out = minmax_normalize(out)
    return out.astype(np.float32)


def preprocess(img: FundusImage, clahe: bool = False, gamma: Optional[float] = None) -> Tensor:
    """Luminance, FOV-wise standardization, then min-max to [0, 1].

    Returns a ``(1, 1, H, W)`` float32 tensor. CLAHE and gamma correction are
    optional extras applied after normalization.
    """
    arr = preprocess_array(img, clahe=clahe, gamma=gamma)
    return Tensor(arr[None, None], dtype=np.float32)


# ---------------------------------------------------------------------------
# patches


def split_counts(total: int, train_fraction: float) -> tuple[int, int]:
    if total < 1:
        raise ParameterError(f"total patch count must be >= 1, got {total}")
    if not 0 <= train_fraction <= 1:
        raise ParameterError(f"train fraction must be in [0, 1], got {train_fraction}")
    n_train = int(round(total * train_fraction))
    return n_train, total - n_train


@dataclass
class PatchSet:
    """Image/mask patch pairs with a train/validation split.

    ``origins`` holds ``(image index, top, left)`` for each patch.
    """

    images: np.ndarray
    masks: np.ndarray
    is_val: np.ndarray
    origins: np.ndarray
    patch_size: int
    seed: int
    image_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_train(self) -> int:
        return int((~self.is_val).sum())

    @property
    def n_val(self) -> int:
        return int(self.is_val.sum())

    @property
    def train_index(self) -> np.ndarray:
        return np.flatnonzero(~self.is_val)

    @property
    def val_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_val)

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.train_index
        return self.images[idx], self.masks[idx]

    def val(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.val_index
        return self.images[idx], self.masks[idx]

    def save(self, directory) -> None:
        """Write ``manifest.json``, ``images.bten``, ``masks.bten`` and ``split.csv``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        bten.save(d / "images.bten", self.images.astype(np.float32))
        bten.save(d / "masks.bten", self.masks.astype(np.float32))
        with open(d / "split.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "split", "image", "top", "left"])
            for i, (val, (img, top, left)) in enumerate(zip(self.is_val, self.origins)):
                w.writerow([i, "val" if val else "train", int(img), int(top), int(left)])
        manifest = {
            "kind": "patchset",
            "count": len(self),
            "n_train": self.n_train,
            "n_val": self.n_val,
            "patch_size": self.patch_size,
            "seed": self.seed,
            "image_ids": list(self.image_ids),
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "PatchSet":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except (OSError, ValueError) as exc:
            raise FormatError(f"{d}: unreadable patch-set manifest ({exc})") from exc
        images = bten.load(d / "images.bten", expect_dtype=np.float32)
        masks = bten.load(d / "masks.bten", expect_dtype=np.float32).astype(np.uint8)
        rows = list(csv.DictReader(open(d / "split.csv", newline="")))
        if len(rows) != len(images) or len(masks) != len(images):
            raise FormatError(f"{d}: split.csv, images and masks disagree on the patch count")
        is_val = np.array([r["split"] == "val" for r in rows], dtype=bool)
        origins = np.array([[int(r["image"]), int(r["top"]), int(r["left"])] for r in rows], dtype=np.int64)
        return cls(images, masks, is_val, origins.reshape(-1, 3), manifest["patch_size"], manifest["seed"],
                   manifest.get("image_ids", []))


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Per-image random stream: seeded with ``seed XOR image index``."""
    return np.random.default_rng(seed ^ index)


def extract_patches(
    images: Sequence[FundusImage],
    patch_size: int = DEFAULT_PATCH,
    total: Optional[int] = None,
    train_fraction: Optional[float] = None,
    seed: int = 0,
    n_train: Optional[int] = None,
    n_val: Optional[int] = None,
    clahe: bool = False,
    gamma: Optional[float] = None,
) -> PatchSet:
    """Draw random square patches lying fully inside their source image.

    Counts come either from ``n_train``/``n_val`` (exact mode; defaults
    170,000 / 19,000) or from ``total`` with ``train_fraction``. Patches are
    spread evenly over the images (the first ``total % len(images)`` images
    get one extra); top-left corners are uniform over the valid range. The
    train/validation assignment is a seeded permutation of all patches.
    """
    if not images:
        raise ParameterError("no images to extract patches from")
    if total is not None:
        n_train, n_val = split_counts(total, 1.0 if train_fraction is None else train_fraction)
    else:
        n_train = DEFAULT_TRAIN if n_train is None else n_train
        n_val = DEFAULT_VAL if n_val is None else n_val
    total = n_train + n_val
    if total < 1 or n_train < 0 or n_val < 0:
        raise ParameterError(f"invalid patch counts: train {n_train}, val {n_val}")
    P = patch_size
    for img in images:
        if P < 1 or P > min(img.shape):
            raise ParameterError(f"patch size {P} does not fit image {img.id} of size {img.shape}")

    k = len(images)
    per_image = [total // k + (1 if i < total % k else 0) for i in range(k)]
    patches = np.empty((total, 1, P, P), dtype=np.float32)
    masks = np.empty((total, 1, P, P), dtype=np.uint8)
    origins = np.empty((total, 3), dtype=np.int64)
    pos = 0
    for i, (img, count) in enumerate(zip(images, per_image)):
        if count == 0:
            continue
        arr = preprocess_array(img, clahe=clahe, gamma=gamma)
        H, W = img.shape
        rng = image_rng(seed, i)
        tops = rng.integers(0, H - P + 1, size=count)
        lefts = rng.integers(0, W - P + 1, size=count)
        for t, l in zip(tops, lefts):
            patches[pos, 0] = arr[t : t + P, l : l + P]
            masks[pos, 0] = img.mask[t : t + P, l : l + P]
            origins[pos] = (i, t, l)
            pos += 1
    is_val = np.zeros(total, dtype=bool)
    is_val[np.random.default_rng(seed).permutation(total)[n_train:]] = True
    return PatchSet(patches, masks, is_val, origins, P, seed, [img.id for img in images])
