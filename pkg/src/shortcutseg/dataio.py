"""Dataset ingestion and the two mitigation transforms (random crops, marker inpainting)."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import DomainError, UsageError
from .imaging import read_image, read_mask, resize_image, resize_mask

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class Sample:
    image: np.ndarray                 # [C,H,W] float32 in [0,1]
    mask: np.ndarray                  # [H,W] bool
    source_id: str = ""
    markers_present: bool | None = None   # None = unknown
    centroid: tuple[float, float] | None = None

    def __post_init__(self):
        if self.image.shape[-2:] != self.mask.shape:
            raise DomainError(f"{self.source_id}: image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass
class Dataset:
    """Stacked images [N,C,H,W] and masks [N,H,W] with per-sample metadata."""

    images: np.ndarray
    masks: np.ndarray
    ids: list[str]
    markers_present: list[bool | None] = field(default_factory=list)
    centroids: list[tuple[float, float] | None] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=bool)
        n = len(self.ids)
        if not self.markers_present:
            self.markers_present = [None] * n
        if not self.centroids:
            self.centroids = [None] * n
        if self.images.shape[0] != n or self.masks.shape[0] != n:
            raise DomainError("images, masks and ids must have the same length")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.masks[i], self.ids[i], self.markers_present[i], self.centroids[i])

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = list(indices)
        return Dataset(self.images[idx], self.masks[idx], [self.ids[i] for i in idx],
                       [self.markers_present[i] for i in idx], [self.centroids[i] for i in idx])

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.masks.copy(), list(self.ids), list(self.markers_present),
                       list(self.centroids))

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Dataset":
        if not samples:
            raise UsageError("cannot build a dataset from zero samples")
        return cls(np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]),
                   [s.source_id for s in samples], [s.markers_present for s in samples],
                   [s.centroid for s in samples])


def _stems(folder: Path) -> dict[str, Path]:
    found = {}
    for p in sorted(folder.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            found.setdefault(p.stem, p)
    return found


def load_dataset(root, target_size: int | None = None, channels: int | None = None) -> Dataset:
    """Load ``root/images`` and ``root/masks`` paired by filename stem, sorted by stem.

    Images are resized bilinearly and masks nearest-neighbour (then
    re-binarized at 0.5) to ``target_size`` when it is given.  A phantom
    ``manifest.csv`` next to the folders, if present, fills in marker flags
    and centroids.
    """
    root = Path(root)
    img_dir, msk_dir = root / "images", root / "masks"
    missing = [str(d) for d in (img_dir, msk_dir) if not d.is_dir()]
    if missing:
        raise FileNotFoundError(f"missing dataset folder(s): {', '.join(missing)}")
    images, masks = _stems(img_dir), _stems(msk_dir)
    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise UsageError(f"{root}: unmatched image/mask stems: {', '.join(unmatched)}")
    if not images:
        raise UsageError(f"{root}: no image/mask pairs found")
    stems = sorted(images)
    imgs = [read_image(images[s], channels) for s in stems]
    if channels is None:
        nch = max(im.shape[0] for im in imgs)
        imgs = [np.repeat(im, nch, axis=0) if im.shape[0] != nch else im for im in imgs]
    msks = [read_mask(masks[s]) for s in stems]
    out_imgs, out_msks = [], []
    for stem, im, mk in zip(stems, imgs, msks):
        if im.shape[-2:] != mk.shape:
            raise DomainError(f"{stem}: image {im.shape[-2:]} and mask {mk.shape} sizes differ")
        if target_size is not None:
            im = resize_image(im, target_size, target_size)
            mk = resize_mask(mk, target_size, target_size)
        else:
            mk = mk >= 0.5
        out_imgs.append(im)
        out_msks.append(mk)
    shapes = {m.shape for m in out_msks}
    if len(shapes) > 1:
        raise UsageError(f"{root}: images have different sizes {sorted(shapes)}; pass target_size")
    markers, centroids = [None] * len(stems), [None] * len(stems)
    if (root / "manifest.csv").exists():
        from .phantom import DatasetManifest

        by_stem = {Path(r["image_path"]).stem: r for r in DatasetManifest.read(root).records}
        for i, stem in enumerate(stems):
            rec = by_stem.get(stem)
            if rec is not None:
                markers[i] = rec["markers_present"]
                if np.isfinite(rec["centroid_x"]):
                    centroids[i] = (rec["centroid_x"], rec["centroid_y"])
    return Dataset(np.stack(out_imgs), np.stack(out_msks), stems, markers, centroids)


def split(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle then contiguous slicing into train/val/test."""
    if len(dataset) == 0:
        raise UsageError("cannot split an empty dataset")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise UsageError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    return (dataset.subset(order[:n_train]), dataset.subset(order[n_train:n_train + n_val]),
            dataset.subset(order[n_train + n_val:]))


# ----------------------------------------------------------------------------
# random-crop augmentation


@dataclass(frozen=True)
class CropSpec:
    scale: tuple[float, float] = (0.5, 1.0)
    output_size: int | None = None      # None keeps the source size

    def __post_init__(self):
        lo, hi = self.scale
        if not (0 < lo <= hi <= 1):
            raise UsageError(f"crop scale must satisfy 0 < min <= max <= 1, got {self.scale}")


def random_crop_augment(image: np.ndarray, mask: np.ndarray, spec: CropSpec, rng: np.random.Generator,
                        return_window: bool = False):
    """Crop a random square of side ``s*H`` (``s ~ U[min,max]``) and resize it to the output size."""
    h, w = mask.shape
    s = rng.uniform(*spec.scale)
    side = max(1, min(int(round(s * min(h, w))), h, w))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out = spec.output_size or h
    img = resize_image(image[:, top:top + side, left:left + side], out, out)
    msk = resize_mask(mask[top:top + side, left:left + side], out, out)
    if return_window:
        return img, msk, (top, left, side)
    return img, msk


# ----------------------------------------------------------------------------
# marker removal


@dataclass(frozen=True)
class MarkerColorSpec:
    color: tuple[float, float, float] = (1.0, 0.85, 0.1)
    tolerance: float = 0.15
    gray_threshold: float = 0.98

    def __post_init__(self):
        if not 0 <= self.tolerance < 0.5:
            raise UsageError(f"tolerance must be in [0, 0.5), got {self.tolerance}")


def detect_markers(image: np.ndarray, spec: MarkerColorSpec = MarkerColorSpec(), dilate: bool = True) -> np.ndarray:
    """Pixels within ``tolerance`` of the marker color in every channel, grown by one pixel."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    if image.shape[0] == 3:
        target = np.asarray(spec.color, dtype=np.float32)[:, None, None]
        # compare in float64 so a zero tolerance means exact equality of stored values
        hit = np.all(np.abs(image.astype(np.float64) - target.astype(np.float64)) <= spec.tolerance, axis=0)
    elif image.shape[0] == 1:
        hit = image[0] >= spec.gray_threshold
    else:
        raise DomainError(f"detect_markers expects 1 or 3 channels, got {image.shape[0]}")
    if dilate and hit.any():
        hit = ndimage.binary_dilation(hit, structure=np.ones((3, 3), dtype=bool))
    return hit


def inpaint_markers(image: np.ndarray, marker_mask: np.ndarray) -> np.ndarray:
    """Fill masked pixels by onion-peel diffusion from their unmasked 4-neighbours.

    Each pass fills every masked pixel that touches at least one known pixel
    with the mean of its known neighbours, then marks it known.  Pixels
    outside the mask are never written.
    """
    image = np.asarray(image, dtype=np.float32)
    unknown = np.array(marker_mask, dtype=bool)
    if unknown.shape != image.shape[-2:]:
        raise DomainError(f"marker mask {unknown.shape} does not match image {image.shape}")
    if not unknown.any():
        return image.copy()
    if unknown.all():
        raise DomainError("marker mask covers the whole image; nothing to inpaint from")
    out = image.astype(np.float64)
    squeeze = out.ndim == 2
    if squeeze:
        out = out[None]
    while unknown.any():
        known = ~unknown
        total = np.zeros_like(out)
        count = np.zeros(unknown.shape, dtype=np.int32)
        for axis, step in ((0, 1), (0, -1), (1, 1), (1, -1)):
            nb_known = _shift(known, axis, step)
            count += nb_known
            total += _shift(out * known, axis + 1, step)
        front = unknown & (count > 0)
        out[:, front] = total[:, front] / count[front]
        unknown &= ~front
    out = out.astype(np.float32)
    # unmasked pixels must come back bit-identical
    keep = ~np.asarray(marker_mask, dtype=bool)
    out[:, keep] = (image[None] if squeeze else image)[:, keep]
    return out[0] if squeeze else out


def _shift(a: np.ndarray, axis: int, step: int) -> np.ndarray:
    """Value of the neighbour at ``-step`` along ``axis`` (zero beyond the edge)."""
    out = np.zeros_like(a)
    n = a.shape[axis]
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if step > 0:
        src[axis], dst[axis] = slice(0, n - step), slice(step, n)
    else:
        src[axis], dst[axis] = slice(-step, n), slice(0, n + step)
    out[tuple(dst)] = a[tuple(src)]
    return out


def inpaint_dataset(dataset: Dataset, spec: MarkerColorSpec = MarkerColorSpec()) -> Dataset:
    cleaned = np.stack([inpaint_markers(im, detect_markers(im, spec)) for im in dataset.images])
    return dataset.with_images(cleaned)
