"""Shortcut diagnostics: banded Dice, centroid audits, paired and frozen-frame
evaluations, translation sweeps and saliency maps.

Every probe that needs predictions accepts either a :class:`SegModel` or any
object with a ``predict(images) -> masks`` method (for instance a fitted
:class:`~shortcutseg.estimators.UNetSegmenter` or an sklearn ``Pipeline``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, UsageError
from .metrics import dice, recall
from .phantom import SceneSpec, ellipse_extent, render, sample_lesion
from .segnet import PaddingMode, SegModel, coverage_mask, forward_logits, predict_mask
from .tensor import Tensor, backward, mul, tsum

__all__ = [
    "dice", "BandSpec", "band_index_map", "banded_dice", "BandedDiceReport",
    "centroid_distribution", "CentroidReport", "paired_shortcut_eval", "PairedEvalReport",
    "frame_stability", "StabilityReport", "aggregate_stability", "StabilitySummary",
    "translation_sweep", "SweepReport", "saliency_map", "marker_saliency_ratio",
    "predict_masks",
]


def predict_masks(model, images) -> np.ndarray:
    """Binary masks [N,H,W] from a SegModel or any estimator exposing ``predict``."""
    images = np.asarray(images, dtype=np.float32)
    if isinstance(model, SegModel):
        return predict_mask(model, images)
    return np.asarray(model.predict(images), dtype=bool)


# ----------------------------------------------------------------------------
# ring bands


@dataclass(frozen=True)
class BandSpec:
    n_bands: int = 5

    def __post_init__(self):
        if self.n_bands < 1:
            raise UsageError("n_bands must be >= 1")

    def edges(self, band: int) -> tuple[float, float]:
        return band / self.n_bands, (band + 1) / self.n_bands


def band_index_map(height: int, width: int, spec: BandSpec = BandSpec()) -> np.ndarray:
    """Band of each pixel: ``floor(n * max(|2x+1-W|/W, |2y+1-H|/H))``."""
    y, x = np.mgrid[0:height, 0:width]
    d = np.maximum(np.abs(2 * x + 1 - width) / width, np.abs(2 * y + 1 - height) / height)
    return np.minimum(np.floor(d * spec.n_bands).astype(np.int64), spec.n_bands - 1)


@dataclass
class BandedDiceReport:
    spec: BandSpec
    band_mean: list[float]          # NaN where undefined
    band_std: list[float]
    n_images: list[int]             # images with ground-truth foreground in the band
    pixel_counts: list[int]         # pixels per band in one frame
    overall_mean: float
    overall_std: float
    per_image: list[list[float]] = field(repr=False, default_factory=list)   # NaN where undefined

    @property
    def defined(self) -> list[bool]:
        return [n > 0 for n in self.n_images]

    @property
    def spread(self) -> float:
        vals = [m for m, ok in zip(self.band_mean, self.defined) if ok]
        return max(vals) - min(vals) if vals else float("nan")

    def rows(self) -> list[dict]:
        return [{"band": b, "d_lo": self.spec.edges(b)[0], "d_hi": self.spec.edges(b)[1],
                 "dice_mean": self.band_mean[b], "dice_std": self.band_std[b], "n_images": self.n_images[b]}
                for b in range(self.spec.n_bands)]

    def to_dict(self) -> dict:
        return {"n_bands": self.spec.n_bands, "band_mean": self.band_mean, "band_std": self.band_std,
                "n_images": self.n_images, "pixel_counts": self.pixel_counts,
                "overall_mean": self.overall_mean, "overall_std": self.overall_std}


def banded_dice(preds, gts, spec: BandSpec = BandSpec(), coverage: np.ndarray | None = None) -> BandedDiceReport:
    """Per-band Dice averaged over the images that have ground truth in that band.

    ``coverage`` optionally restricts every band to a pixel subset (e.g. the
    footprint of a valid-padding model).
    """
    preds = np.asarray(preds, dtype=bool)
    gts = np.asarray(gts, dtype=bool)
    if preds.ndim == 2:
        preds, gts = preds[None], gts[None]
    if len(preds) == 0:
        raise UsageError("banded_dice needs at least one image")
    if preds.shape != gts.shape:
        raise DomainError(f"banded_dice: predictions {preds.shape} vs ground truth {gts.shape}")
    _, h, w = gts.shape
    bands = band_index_map(h, w, spec)
    cover = np.ones((h, w), dtype=bool) if coverage is None else np.asarray(coverage, dtype=bool)
    per_image = [[float("nan")] * spec.n_bands for _ in range(len(preds))]
    means, stds, counts, pixels = [], [], [], []
    for b in range(spec.n_bands):
        sel = (bands == b) & cover
        pixels.append(int(sel.sum()))
        scores = []
        for i, (p, g) in enumerate(zip(preds, gts)):
            gb = g[sel]
            if gb.any():
                per_image[i][b] = dice(p[sel], gb)
                scores.append(per_image[i][b])
        counts.append(len(scores))
        means.append(float(np.mean(scores)) if scores else float("nan"))
        stds.append(float(np.std(scores)) if scores else float("nan"))
    overall = [dice(p[cover], g[cover]) for p, g in zip(preds, gts)]
    return BandedDiceReport(spec, means, stds, counts, pixels, float(np.mean(overall)),
                            float(np.std(overall)), per_image)


# ----------------------------------------------------------------------------
# centroid audit


@dataclass
class CentroidReport:
    histogram: np.ndarray            # [bins, bins], rows = y, columns = x
    centroids: np.ndarray            # [N, 2] normalized (x, y) in [0, 1]
    central_fraction: float
    n_empty: int

    def rows(self) -> list[dict]:
        bins = self.histogram.shape[0]
        return [{"bin_x": x, "bin_y": y, "count": int(self.histogram[y, x])}
                for y in range(bins) for x in range(bins)]

    def to_dict(self) -> dict:
        return {"bins": int(self.histogram.shape[0]), "central_fraction": self.central_fraction,
                "n_masks": int(len(self.centroids)), "n_empty": self.n_empty,
                "histogram": self.histogram.tolist()}


def centroid_distribution(masks, bins: int = 32) -> CentroidReport:
    """Normalized mask centroids, their 2-d histogram and the fraction inside the central box.

    A centroid at pixel coordinates (x, y) normalizes to ((x+0.5)/W, (y+0.5)/H);
    the central box is [0.25, 0.75]^2, i.e. half the frame's side length.
    """
    pts, empty = [], 0
    for m in masks:
        m = np.asarray(m, dtype=bool)
        ys, xs = np.nonzero(m)
        if len(xs) == 0:
            empty += 1
            continue
        h, w = m.shape
        pts.append(((xs.mean() + 0.5) / w, (ys.mean() + 0.5) / h))
    if not pts:
        raise UsageError("centroid_distribution: every mask is empty")
    pts = np.asarray(pts)
    hist = np.zeros((bins, bins), dtype=np.int64)
    ix = np.minimum((pts[:, 0] * bins).astype(int), bins - 1)
    iy = np.minimum((pts[:, 1] * bins).astype(int), bins - 1)
    np.add.at(hist, (iy, ix), 1)
    inside = np.all((pts >= 0.25) & (pts <= 0.75), axis=1)
    return CentroidReport(hist, pts, float(inside.mean()), empty)


# ----------------------------------------------------------------------------
# paired marked / clean evaluation


@dataclass
class PairedEvalReport:
    marked_mean: float
    marked_std: float
    clean_mean: float
    clean_std: float
    ids: list[str] = field(default_factory=list)
    marked_dice: list[float] = field(default_factory=list)
    clean_dice: list[float] = field(default_factory=list)

    @property
    def deltas(self) -> list[float]:
        return [m - c for m, c in zip(self.marked_dice, self.clean_dice)]

    @property
    def mean_delta(self) -> float:
        return self.marked_mean - self.clean_mean

    def rows(self) -> list[dict]:
        return [{"id": i, "dice_marked": m, "dice_clean": c, "delta": m - c}
                for i, m, c in zip(self.ids, self.marked_dice, self.clean_dice)]

    def to_dict(self) -> dict:
        return {"marked_mean": self.marked_mean, "marked_std": self.marked_std,
                "clean_mean": self.clean_mean, "clean_std": self.clean_std, "mean_delta": self.mean_delta}


def paired_shortcut_eval(model, marked_set, clean_set) -> PairedEvalReport:
    """Per-image Dice with and without markers on the same underlying scenes (paired by id)."""
    clean_index = {sid: i for i, sid in enumerate(clean_set.ids)}
    missing = [sid for sid in marked_set.ids if sid not in clean_index]
    if missing or len(clean_index) != len(marked_set.ids):
        raise UsageError(f"unpaired sample ids: {missing or sorted(set(clean_index) - set(marked_set.ids))}")
    order = [clean_index[sid] for sid in marked_set.ids]
    pm = predict_masks(model, marked_set.images)
    pc = predict_masks(model, clean_set.images[order])
    dm = [dice(p, g) for p, g in zip(pm, marked_set.masks)]
    dc = [dice(p, g) for p, g in zip(pc, clean_set.masks[order])]
    return PairedEvalReport(float(np.mean(dm)), float(np.std(dm)), float(np.mean(dc)), float(np.std(dc)),
                            list(marked_set.ids), dm, dc)


# ----------------------------------------------------------------------------
# frozen-frame stability


@dataclass
class StabilityReport:
    curve: list[float]                       # Dice(mask_t, mask_T) for t = 0..T
    gt_curve: list[float] | None = None      # Dice(mask_t, ground truth) when given
    video_id: str = ""

    @property
    def endpoint(self) -> float:
        return self.curve[0]


@dataclass
class StabilitySummary:
    mean: float
    std: float
    endpoints: list[float]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n_sequences": len(self.endpoints)}


def frame_stability(model, frames, gt_mask=None, video_id: str = "") -> StabilityReport:
    frames = np.asarray(frames, dtype=np.float32)
    if len(frames) < 2:
        raise UsageError("frame_stability needs at least 2 frames")
    masks = predict_masks(model, frames)
    final = masks[-1]
    curve = [dice(m, final) for m in masks]
    gt_curve = [dice(m, gt_mask) for m in masks] if gt_mask is not None else None
    return StabilityReport(curve, gt_curve, video_id)


def aggregate_stability(reports) -> StabilitySummary:
    ends = [r.endpoint for r in reports]
    return StabilitySummary(float(np.mean(ends)), float(np.std(ends)), ends)


# ----------------------------------------------------------------------------
# translation sweep


@dataclass
class SweepReport:
    offsets: list[float]       # distance of the lesion center from the frame center, px
    centers: list[tuple[float, float]]
    recall: list[float]
    dice: list[float]

    @property
    def recall_spread(self) -> float:
        return max(self.recall) - min(self.recall)

    def rows(self) -> list[dict]:
        return [{"step": i, "offset_px": o, "center_x": c[0], "center_y": c[1], "recall": r, "dice": d}
                for i, (o, c, r, d) in enumerate(zip(self.offsets, self.centers, self.recall, self.dice))]

    def to_dict(self) -> dict:
        return {"offsets": self.offsets, "recall": self.recall, "dice": self.dice}


def translation_sweep(model, scene_spec: SceneSpec, n_steps: int = 9, seed: int = 0,
                      angle: float = 0.0, end_fraction: float = 1.0,
                      max_offset: float | None = None) -> SweepReport:
    """Move one lesion from the frame center toward the border along a ray at ``angle``.

    By default the last step puts the lesion center on the outermost pixel
    row/column along the ray (``end_fraction`` scales that distance), so the
    lesion is cut by the frame edge.  ``max_offset`` caps the travel in pixels
    (used to keep a valid-padding model's lesion inside its footprint).
    """
    if n_steps < 2:
        raise UsageError("translation_sweep needs n_steps >= 2")
    lesion = sample_lesion(scene_spec, np.random.default_rng(seed))
    size = scene_spec.size
    mid = (size - 1) / 2
    ux, uy = math.cos(angle), math.sin(angle)
    reach = mid / max(abs(ux), abs(uy))
    end = reach * end_fraction if max_offset is None else min(reach * end_fraction, max_offset)
    offsets = list(np.linspace(0.0, end, n_steps))
    images, masks, centers = [], [], []
    for off in offsets:
        c = (mid + off * ux, mid + off * uy)
        img, m = render(scene_spec, lesion, c)
        images.append(img)
        masks.append(m)
        centers.append((float(c[0]), float(c[1])))
    preds = predict_masks(model, np.stack(images))
    rec = [recall(p, m) for p, m in zip(preds, masks)]
    dcs = [dice(p, m) for p, m in zip(preds, masks)]
    return SweepReport([float(o) for o in offsets], centers, rec, dcs)


def lesion_extent(scene_spec: SceneSpec, seed: int) -> tuple[float, float]:
    lesion = sample_lesion(scene_spec, np.random.default_rng(seed))
    return ellipse_extent(lesion.semi_axes, lesion.angle)


# ----------------------------------------------------------------------------
# saliency


def saliency_map(model: SegModel, image, method: str = "gradient") -> np.ndarray:
    """Nonnegative per-pixel attribution for one [C,H,W] image.

    ``gradient``: L2 norm over channels of d(sum of logits on predicted
    foreground)/d(input); if nothing is predicted, all logits are summed.
    ``gradcam``: channel-weighted bottleneck activations (weights = spatially
    averaged gradients), rectified and nearest-upsampled to the input size.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise UsageError(f"saliency_map expects one [C,H,W] image, got {image.shape}")
    x = Tensor(image[None], requires_grad=True, name="input")
    taps: dict[str, Tensor] = {}
    logits = forward_logits(model, x, taps=taps)
    fg = (logits.data >= 0).astype(logits.data.dtype)
    if not fg.any():
        fg = np.ones_like(logits.data)
    score = tsum(mul(logits, fg))
    if method == "gradient":
        backward(score)
        g = x.grad if x.grad is not None else np.zeros_like(x.data)
        return np.sqrt((g[0].astype(np.float64) ** 2).sum(axis=0)).astype(np.float32)
    if method == "gradcam":
        if model.config.padding_mode is PaddingMode.VALID:
            raise UsageError("gradcam saliency is only defined for same-size (padded) models")
        act = taps["bottleneck"]
        backward(score)
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
        weights = grad[0].mean(axis=(1, 2))
        cam = np.maximum(np.tensordot(weights, act.data[0], axes=1), 0)
        f = 2 ** model.config.depth
        return np.repeat(np.repeat(cam, f, axis=0), f, axis=1).astype(np.float32)
    raise UsageError(f"unknown saliency method {method!r}")


def marker_saliency_ratio(saliency: np.ndarray, marker_mask: np.ndarray, lesion_mask: np.ndarray,
                          rng: np.random.Generator) -> float:
    """Mean saliency on marker pixels over the mean on an equal-size random background sample."""
    marker_mask = np.asarray(marker_mask, dtype=bool)
    background = ~(marker_mask | np.asarray(lesion_mask, dtype=bool))
    n = int(marker_mask.sum())
    if n == 0:
        raise UsageError("marker mask is empty")
    pool = np.flatnonzero(background)
    pick = rng.choice(pool, size=min(n, len(pool)), replace=False)
    bg = float(saliency.reshape(-1)[pick].mean())
    fg = float(saliency[marker_mask].mean())
    return fg / bg if bg > 0 else (math.inf if fg > 0 else float("nan"))


def covered(model, height: int, width: int) -> np.ndarray:
    if isinstance(model, SegModel):
        return coverage_mask(model.config, height, width)
    return np.ones((height, width), dtype=bool)
