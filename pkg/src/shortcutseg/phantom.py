"""Synthetic lesion scenes with controllable shortcut cues.

A scene is a textured gray background with one brighter elliptical lesion.
Two knobs create shortcuts:

* placement - ``centered`` lesions (Gaussian around the frame center, never
  clipped), ``uniform`` lesion centers, or ``quarter_crop``: a centered scene
  cut into quadrants, one kept at random and resized back to full size.
* markers - yellow "x" calipers beyond both ends of the lesion's major axis
  plus a checkered text block in the nearest corner, stamped with
  probability ``rho``.  Markers never change the mask.

Pixel centers sit on integer coordinates; the frame center of a size-``n``
frame is ``((n-1)/2, (n-1)/2)``.  Images are quantized to the 8-bit grid as
soon as they are produced, so PNG round trips are exact.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, UsageError
from .imaging import quantize, resize_image, resize_mask, write_mask_png, write_png

MARKER_STREAM = 5
MANIFEST_COLUMNS = ["index", "image_path", "mask_path", "seed", "placement", "markers_present",
                    "centroid_x", "centroid_y", "split"]


class Placement(str, Enum):
    CENTERED = "centered"
    UNIFORM = "uniform"
    QUARTER_CROP = "quarter_crop"


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    channels: int = 1
    axis_range: tuple[float, float] = (0.1, 0.3)       # semi-axes, fraction of size
    contrast_range: tuple[float, float] = (0.3, 0.6)
    base_range: tuple[float, float] = (0.2, 0.5)
    noise_amplitude: float = 0.1
    noise_cell: int = 8
    placement: Placement = Placement.CENTERED
    sigma_frac: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "placement", Placement(self.placement))
        for name in ("axis_range", "contrast_range", "base_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if hi < lo:
                raise UsageError(f"{name}: upper bound below lower bound")
        if self.size < 4 or self.size % 2:
            raise UsageError(f"size must be even and >= 4, got {self.size}")
        if self.channels not in (1, 3):
            raise UsageError(f"channels must be 1 or 3, got {self.channels}")
        if self.sigma_frac < 0:
            raise UsageError("sigma_frac must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placement"] = self.placement.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("axis_range", "contrast_range", "base_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Lesion:
    """Position-independent appearance of one scene."""

    semi_axes: tuple[float, float]
    angle: float
    contrast: float
    base: float
    texture: np.ndarray = field(repr=False)


@dataclass
class Scene:
    image: np.ndarray            # [C,H,W] float32 on the 8-bit grid
    mask: np.ndarray             # [H,W] bool
    center: tuple[float, float]  # lesion center (x, y) in this frame's pixel coordinates
    centroid: tuple[float, float] | None
    quadrant: int | None = None


# ----------------------------------------------------------------------------
# rendering


def value_noise(size: int, cell: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth noise in [-1, 1]: random lattice values, smoothstep-interpolated (two octaves)."""
    def octave(c):
        n = -(-size // c) + 1
        lattice = rng.uniform(-1.0, 1.0, size=(n, n))
        pos = np.arange(size) / c
        i0 = np.floor(pos).astype(int)
        f = pos - i0
        f = f * f * (3 - 2 * f)
        rows = lattice[i0] * (1 - f)[:, None] + lattice[i0 + 1] * f[:, None]
        return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]

    fine = max(cell // 2, 1)
    return (octave(cell) + 0.5 * octave(fine)) / 1.5


def ellipse_extent(semi_axes: tuple[float, float], angle: float) -> tuple[float, float]:
    """Half-width and half-height of the rotated ellipse's bounding box."""
    a, b = semi_axes
    c, s = math.cos(angle), math.sin(angle)
    return math.sqrt((a * c) ** 2 + (b * s) ** 2), math.sqrt((a * s) ** 2 + (b * c) ** 2)


def rasterize_ellipse(size: int, center: tuple[float, float], semi_axes: tuple[float, float],
                      angle: float) -> np.ndarray:
    """Foreground iff the pixel center lies inside the ellipse."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = x - center[0], y - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = (dx * c + dy * s) / semi_axes[0]
    v = (-dx * s + dy * c) / semi_axes[1]
    return u * u + v * v <= 1.0


def mask_centroid(mask: np.ndarray) -> tuple[float, float] | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return float(xs.mean()), float(ys.mean())


def sample_lesion(spec: SceneSpec, rng: np.random.Generator) -> Lesion:
    a = rng.uniform(*spec.axis_range) * spec.size
    b = rng.uniform(*spec.axis_range) * spec.size
    angle = rng.uniform(0.0, math.pi)
    contrast = rng.uniform(*spec.contrast_range)
    base = rng.uniform(*spec.base_range)
    texture = value_noise(spec.size, spec.noise_cell, rng)
    return Lesion((a, b), angle, contrast, base, texture)


def render(spec: SceneSpec, lesion: Lesion, center: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    mask = rasterize_ellipse(spec.size, center, lesion.semi_axes, lesion.angle)
    gray = lesion.base + spec.noise_amplitude * lesion.texture + lesion.contrast * mask
    image = quantize(np.repeat(gray[None], spec.channels, axis=0))
    return image, mask


def _centered_center(spec: SceneSpec, lesion: Lesion, rng: np.random.Generator) -> tuple[float, float]:
    mid = (spec.size - 1) / 2
    hx, hy = ellipse_extent(lesion.semi_axes, lesion.angle)
    sigma = spec.sigma_frac * spec.size
    for _ in range(1000):
        cx = mid + sigma * rng.standard_normal()
        cy = mid + sigma * rng.standard_normal()
        if cx - hx >= 0 and cx + hx <= spec.size - 1 and cy - hy >= 0 and cy + hy <= spec.size - 1:
            return cx, cy
    raise DomainError(f"lesion extent ({hx:.1f}, {hy:.1f}) px never fits the frame with sigma {sigma:.1f} px")


def place_lesion(spec: SceneSpec, lesion: Lesion, rng: np.random.Generator) -> tuple[float, float]:
    if spec.placement is Placement.UNIFORM:
        lo, hi = -0.5, spec.size - 0.5
        return rng.uniform(lo, hi), rng.uniform(lo, hi)
    return _centered_center(spec, lesion, rng)


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Render one scene; the same ``(spec, seed)`` always gives identical bytes."""
    rng = np.random.default_rng(seed)
    lesion = sample_lesion(spec, rng)
    center = place_lesion(spec, lesion, rng)
    image, mask = render(spec, lesion, center)
    if spec.placement is not Placement.QUARTER_CROP:
        return Scene(image, mask, center, mask_centroid(mask))
    image, mask, q = quarter_crop(image, mask, rng, return_quadrant=True)
    image = quantize(image)
    half = spec.size // 2
    ox, oy = (q % 2) * half, (q // 2) * half
    # bilinear 2x resize maps source x to 2*(x - offset) + 0.5
    moved = (2 * (center[0] - ox) + 0.5, 2 * (center[1] - oy) + 0.5)
    return Scene(image, mask, moved, mask_centroid(mask), q)


def quarter_crop(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                 quadrant: int | None = None, return_quadrant: bool = False):
    """Keep one of the four quadrants (0 TL, 1 TR, 2 BL, 3 BR) and resize it back to full size."""
    h, w = mask.shape
    if h % 2 or w % 2:
        raise DomainError(f"quarter_crop needs even dims, got {h}x{w}")
    q = int(rng.integers(4)) if quadrant is None else int(quadrant)
    if not 0 <= q < 4:
        raise DomainError(f"quadrant must be in 0..3, got {q}")
    top, left = (q // 2) * (h // 2), (q % 2) * (w // 2)
    img = np.asarray(image)[..., top:top + h // 2, left:left + w // 2]
    msk = np.asarray(mask)[top:top + h // 2, left:left + w // 2]
    out_img = resize_image(img if img.ndim == 3 else img[None], h, w)
    if np.asarray(image).ndim == 2:
        out_img = out_img[0]
    out_msk = resize_mask(msk, h, w)
    return (out_img, out_msk, q) if return_quadrant else (out_img, out_msk)


# ----------------------------------------------------------------------------
# markers


@dataclass(frozen=True)
class MarkerSpec:
    rho: float = 1.0
    arm: int = 4
    thickness: int = 1
    text_shape: tuple[int, int] = (6, 10)
    color_rgb: tuple[float, float, float] = (1.0, 0.85, 0.1)
    gray_value: float = 1.0
    margin: int = 2
    max_lesion_overlap: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise UsageError(f"rho must be in [0, 1], got {self.rho}")
        if self.arm < 1 or self.thickness < 1:
            raise UsageError("arm and thickness must be >= 1")


def _cross(shape: tuple[int, int], center: tuple[float, float], arm: int, thickness: int) -> np.ndarray:
    h, w = shape
    cx, cy = int(round(center[0])), int(round(center[1]))
    out = np.zeros(shape, dtype=bool)
    lo = -(thickness // 2)
    for d in range(-arm, arm + 1):
        for sy in (d, -d):
            for ty in range(lo, lo + thickness):
                for tx in range(lo, lo + thickness):
                    x, y = cx + d + tx, cy + sy + ty
                    if 0 <= x < w and 0 <= y < h:
                        out[y, x] = True
    return out


def _text_block(shape: tuple[int, int], corner: int, spec: MarkerSpec) -> np.ndarray:
    h, w = shape
    th, tw = spec.text_shape
    top = spec.margin if corner in (0, 1) else h - spec.margin - th
    left = spec.margin if corner in (0, 2) else w - spec.margin - tw
    out = np.zeros(shape, dtype=bool)
    yy, xx = np.mgrid[0:th, 0:tw]
    checker = (yy + xx) % 2 == 0
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + th, h), min(left + tw, w)
    out[y0:y1, x0:x1] = checker[y0 - top:y1 - top, x0 - left:x1 - left]
    return out


def major_axis(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(centroid, unit direction, (t_min, t_max)) of the mask's principal axis."""
    ys, xs = np.nonzero(mask)
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    c = pts.mean(axis=0)
    d = pts - c
    if len(pts) > 1:
        _, vecs = np.linalg.eigh(d.T @ d)
        u = vecs[:, -1]
    else:
        u = np.array([1.0, 0.0])
    if u[0] < 0 or (u[0] == 0 and u[1] < 0):
        u = -u
    proj = d @ u
    return c, u, np.array([proj.min(), proj.max()])


def marker_elements(mask: np.ndarray, spec: MarkerSpec) -> list[np.ndarray]:
    """Footprints ``[caliper_1, caliper_2, text_block]`` for a lesion mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DomainError("marker placement needs a nonempty lesion mask")
    shape = mask.shape
    c, u, (t0, t1) = major_axis(mask)
    calipers = []
    for t, sign in ((t0, -1.0), (t1, 1.0)):
        best = None
        for push in range(3 * spec.arm + 1):
            pos = c + (t + sign * (spec.arm + 1 + push)) * u
            glyph = _cross(shape, (pos[0], pos[1]), spec.arm, spec.thickness)
            overlap = int((glyph & mask).sum())
            if best is None or overlap < best[0]:
                best = (overlap, glyph)
            if overlap == 0:
                break
        calipers.append(best[1])
    h, w = shape
    corners = [(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)]
    order = sorted(range(4), key=lambda i: (corners[i][0] - c[0]) ** 2 + (corners[i][1] - c[1]) ** 2)
    text = None
    for corner in order:
        block = _text_block(shape, corner, spec)
        overlap = int((block & mask).sum())
        if text is None or overlap < text[0]:
            text = (overlap, block)
        if overlap == 0:
            break
    elements = calipers + [text[1]]
    budget = int(math.floor(spec.max_lesion_overlap * mask.sum()))
    if sum(int((e & mask).sum()) for e in elements) > budget:
        elements = [e & ~mask for e in elements]
    return elements


def stamp(image: np.ndarray, footprint: np.ndarray, spec: MarkerSpec) -> np.ndarray:
    out = np.array(image, dtype=np.float32, copy=True)
    if out.shape[0] == 3:
        for ch, v in enumerate(spec.color_rgb):
            out[ch][footprint] = v
    else:
        out[:, footprint] = spec.gray_value
    return quantize(out)


def inject_markers(image: np.ndarray, mask: np.ndarray, spec: MarkerSpec, rng: np.random.Generator,
                   return_footprint: bool = False):
    """Stamp calipers and a text block with probability ``spec.rho``; the mask is never touched."""
    present = bool(rng.random() < spec.rho)
    footprint = np.zeros(np.asarray(mask).shape, dtype=bool)
    out = np.array(image, dtype=np.float32, copy=True)
    if present:
        for element in marker_elements(mask, spec):
            footprint |= element
        out = stamp(out, footprint, spec)
    return (out, present, footprint) if return_footprint else (out, present)


def make_frozen_sequence(image: np.ndarray, mask: np.ndarray, spec: MarkerSpec, length: int) -> list[np.ndarray]:
    """Frames of one frozen scene being annotated: clean first, then caliper 1, caliper 2, text."""
    if length < 2:
        raise UsageError("a frozen sequence needs at least 2 frames")
    elements = marker_elements(mask, spec)
    arrive = [math.ceil(j * (length - 1) / len(elements)) for j in range(1, len(elements) + 1)]
    frames = []
    current = np.array(image, dtype=np.float32, copy=True)
    for t in range(length):
        for element, when in zip(elements, arrive):
            if when == t:
                current = stamp(current, element, spec)
        frames.append(current.copy())
    return frames


# ----------------------------------------------------------------------------
# datasets on disk


def split_assignment(n: int, base_seed: int, ratios=(0.8, 0.1, 0.1)) -> list[str]:
    """Exact 80/10/10 split; order within the split is fixed by hashing (base_seed, index)."""
    def key(i):
        return hashlib.sha256(f"{base_seed}:{i}".encode()).hexdigest()

    order = sorted(range(n), key=key)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    tags = [""] * n
    for rank, i in enumerate(order):
        tags[i] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return tags


@dataclass
class DatasetManifest:
    root: Path
    records: list[dict]
    scene_spec: SceneSpec | None = None
    marker_spec: MarkerSpec | None = None

    def __len__(self):
        return len(self.records)

    def write(self) -> Path:
        path = self.root / "manifest.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for rec in self.records:
                writer.writerow(rec)
        return path

    @classmethod
    def read(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.csv"
        try:
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != MANIFEST_COLUMNS:
                    raise FormatError(f"{path}: unexpected columns {reader.fieldnames}")
                records = [_parse_record(r) for r in reader]
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: malformed manifest ({exc})") from exc
        scene_spec = marker_spec = None
        gen = root / "generator.json"
        if gen.exists():
            meta = json.loads(gen.read_text())
            scene_spec = SceneSpec.from_dict(meta["scene"])
            if meta.get("markers"):
                m = meta["markers"]
                marker_spec = MarkerSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in m.items()})
        return cls(root, records, scene_spec, marker_spec)


def _parse_record(r: dict) -> dict:
    return {
        "index": int(r["index"]),
        "image_path": r["image_path"],
        "mask_path": r["mask_path"],
        "seed": int(r["seed"]),
        "placement": r["placement"],
        "markers_present": r["markers_present"] in ("1", "True", "true"),
        "centroid_x": float(r["centroid_x"]) if r["centroid_x"] else float("nan"),
        "centroid_y": float(r["centroid_y"]) if r["centroid_y"] else float("nan"),
        "split": r["split"],
    }


def render_sample(spec: SceneSpec, marker_spec: MarkerSpec | None, seed: int):
    """(image, mask, markers_present, scene) for one dataset sample seed."""
    scene = generate_scene(spec, seed)
    image, present = scene.image, False
    if marker_spec is not None and scene.mask.any():
        image, present = inject_markers(scene.image, scene.mask, marker_spec,
                                        np.random.default_rng([seed, MARKER_STREAM]))
    return image, scene.mask, present, scene


def generate_dataset(out_dir, n: int, spec: SceneSpec, marker_spec: MarkerSpec | None = None,
                     base_seed: int = 0) -> DatasetManifest:
    """Write ``images/NNNN.png``, ``masks/NNNN.png`` and ``manifest.csv`` under ``out_dir``."""
    if n < 0:
        raise UsageError("n must be >= 0")
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{root}: cannot create dataset directory ({exc})") from exc
    width = max(4, len(str(max(n - 1, 0))))
    splits = split_assignment(n, base_seed)
    records = []
    for i in range(n):
        seed = base_seed + i
        image, mask, present, _ = render_sample(spec, marker_spec, seed)
        stem = f"{i:0{width}d}"
        image_rel, mask_rel = f"images/{stem}.png", f"masks/{stem}.png"
        write_png(root / image_rel, image)
        write_mask_png(root / mask_rel, mask)
        cen = mask_centroid(mask)
        records.append({
            "index": i, "image_path": image_rel, "mask_path": mask_rel, "seed": seed,
            "placement": spec.placement.value, "markers_present": int(present),
            "centroid_x": f"{cen[0]:.4f}" if cen else "", "centroid_y": f"{cen[1]:.4f}" if cen else "",
            "split": splits[i],
        })
    meta = {"scene": spec.to_dict(), "markers": asdict(marker_spec) if marker_spec else None}
    (root / "generator.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    manifest = DatasetManifest(root, records, spec, marker_spec)
    manifest.write()
    return manifest
