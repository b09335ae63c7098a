"""A small configurable U-Net with soft-Dice loss, Adam and checkpointing.

The network follows the usual encoder/decoder layout: ``depth`` encoder
levels of two 3x3 convolutions (channels ``base * 2**level``) each followed
by 2x max pooling, a bottleneck with ``base * 2**depth`` channels, and a
mirrored decoder that upsamples (nearest), concatenates the skip features
and applies two more convolutions.  A 1x1 head produces one logit per pixel.

With ``PaddingMode.VALID`` no padding is applied anywhere; feature maps
shrink, skip features are cropped to the decoder footprint and, before each
pooling, a leading row/column is dropped when needed so the pooling grid
stays aligned with the padded model.  The valid model therefore computes
exactly the padded model's values on pixels whose receptive field never
touches the border.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DomainError, FormatError, NumericError, UsageError, VersionError
from .metrics import dice
from .tensor import (
    PaddingMode,
    Tensor,
    backward,
    concat_channels,
    conv2d,
    crop2d,
    maxpool2d,
    no_grad,
    relu,
    reshape,
    sigmoid,
    tsum,
    upsample_nearest,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    depth: int = 3
    base_channels: int = 16
    padding_mode: PaddingMode = PaddingMode.ZEROS
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "padding_mode", PaddingMode.parse(self.padding_mode))
        if self.in_channels < 1:
            raise UsageError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.depth < 1:
            raise UsageError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise UsageError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise UsageError(f"kernel_size must be odd, got {self.kernel_size}")

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2 ** level for level in range(self.depth)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** self.depth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["padding_mode"] = self.padding_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


@dataclass
class SegModel:
    config: UNetConfig
    params: dict[str, Tensor]

    def copy(self) -> "SegModel":
        return SegModel(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                      for k, v in self.params.items()})

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _layer_shapes(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    k = cfg.kernel_size
    shapes = []

    def block(prefix, cin, cout):
        shapes.append((f"{prefix}.conv1.weight", (cout, cin, k, k)))
        shapes.append((f"{prefix}.conv1.bias", (cout,)))
        shapes.append((f"{prefix}.conv2.weight", (cout, cout, k, k)))
        shapes.append((f"{prefix}.conv2.bias", (cout,)))

    cin = cfg.in_channels
    for level, c in enumerate(cfg.encoder_channels):
        block(f"enc{level}", cin, c)
        cin = c
    block("bottleneck", cin, cfg.bottleneck_channels)
    below = cfg.bottleneck_channels
    for level in reversed(range(cfg.depth)):
        c = cfg.encoder_channels[level]
        block(f"dec{level}", below + c, c)
        below = c
    shapes.append(("head.weight", (1, below, 1, 1)))
    shapes.append(("head.bias", (1,)))
    return shapes


def init_unet(config: UNetConfig, seed: int = 0) -> SegModel:
    """Kaiming-uniform weights (bound sqrt(6/fan_in)), zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _layer_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return SegModel(config, params)


# ----------------------------------------------------------------------------
# geometry of the valid (padding-free) network


@dataclass(frozen=True)
class _AxisPlan:
    pool_crops: tuple[tuple[int, int], ...]   # per encoder level: (start, length) kept before pooling
    skip_crops: tuple[tuple[int, int], ...]   # per level: (start, length) of the skip used by the decoder
    out_len: int
    offset: int


def _axis_plan(n: int, depth: int, k: int) -> _AxisPlan:
    r = (k - 1) // 2
    off, length = 0, n
    enc_geo, pool_crops = [], []

    def shrink(off, length):
        off, length = off + 2 * r, length - 4 * r
        if length <= 0:
            raise UsageError(f"input size {n} too small for a valid-padding U-Net of depth {depth}")
        return off, length

    for _ in range(depth):
        off, length = shrink(off, length)
        enc_geo.append((off, length))
        lead = off % 2
        keep = (length - lead) // 2 * 2
        if keep <= 0:
            raise UsageError(f"input size {n} too small for a valid-padding U-Net of depth {depth}")
        pool_crops.append((lead, keep))
        off, length = (off + lead) // 2, keep // 2
    off, length = shrink(off, length)
    skip_crops = [None] * depth
    for level in reversed(range(depth)):
        off, length = off * 2, length * 2
        s_off, s_len = enc_geo[level]
        start = off - s_off
        if start < 0 or start + length > s_len:
            raise UsageError(f"input size {n}: decoder footprint escapes skip features")
        skip_crops[level] = (start, length)
        off, length = shrink(off, length)
    return _AxisPlan(tuple(pool_crops), tuple(skip_crops), length, off)


def output_geometry(config: UNetConfig, height: int, width: int) -> tuple[int, int, int, int]:
    """(out_height, out_width, top, left) of the prediction inside the input frame."""
    _check_divisible(config, height, width)
    if config.padding_mode is not PaddingMode.VALID:
        return height, width, 0, 0
    ph = _axis_plan(height, config.depth, config.kernel_size)
    pw = _axis_plan(width, config.depth, config.kernel_size)
    return ph.out_len, pw.out_len, ph.offset, pw.offset


def coverage_mask(config: UNetConfig, height: int, width: int) -> np.ndarray:
    """Boolean map of input pixels that receive a prediction."""
    oh, ow, top, left = output_geometry(config, height, width)
    cover = np.zeros((height, width), dtype=bool)
    cover[top:top + oh, left:left + ow] = True
    return cover


def _check_divisible(config: UNetConfig, height: int, width: int) -> None:
    step = 2 ** config.depth
    if height % step or width % step:
        raise UsageError(f"input {height}x{width} must be divisible by 2**depth = {step}")


# ----------------------------------------------------------------------------
# forward


def _block(x: Tensor, params: dict[str, Tensor], prefix: str, mode: PaddingMode) -> Tensor:
    x = relu(conv2d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], mode=mode))
    return relu(conv2d(x, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], mode=mode))


def forward_logits(model: SegModel, batch, taps: dict | None = None) -> Tensor:
    """Per-pixel logits, shape [B,1,H',W'].

    ``taps``, if given, receives the bottleneck activation under key
    ``"bottleneck"`` (used for class-activation saliency).
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise UsageError(f"forward expects [B,C,H,W], got {x.shape}")
    cfg, p = model.config, model.params
    if x.shape[1] != cfg.in_channels:
        raise UsageError(f"model expects {cfg.in_channels} channels, got {x.shape[1]}")
    h, w = x.shape[-2:]
    _check_divisible(cfg, h, w)
    mode = cfg.padding_mode
    valid = mode is PaddingMode.VALID
    if valid:
        ph = _axis_plan(h, cfg.depth, cfg.kernel_size)
        pw = _axis_plan(w, cfg.depth, cfg.kernel_size)

    skips = []
    for level in range(cfg.depth):
        x = _block(x, p, f"enc{level}", mode)
        skips.append(x)
        if valid:
            (t0, th), (l0, tw) = ph.pool_crops[level], pw.pool_crops[level]
            if (t0, th, l0, tw) != (0, x.shape[-2], 0, x.shape[-1]):
                x = crop2d(x, t0, l0, th, tw)
        x = maxpool2d(x)
    x = _block(x, p, "bottleneck", mode)
    if taps is not None:
        taps["bottleneck"] = x
    for level in reversed(range(cfg.depth)):
        x = upsample_nearest(x)
        skip = skips[level]
        if valid:
            (t0, th), (l0, tw) = ph.skip_crops[level], pw.skip_crops[level]
            skip = crop2d(skip, t0, l0, th, tw)
        x = concat_channels([x, skip])
        x = _block(x, p, f"dec{level}", mode)
    return conv2d(x, p["head.weight"], p["head.bias"], mode=PaddingMode.VALID)


def forward(model: SegModel, batch) -> Tensor:
    """Foreground probabilities, shape [B,1,H',W'] (H'=H unless valid padding)."""
    return sigmoid(forward_logits(model, batch))


def predict_proba(model: SegModel, images, batch_size: int = 32) -> np.ndarray:
    """Probabilities embedded in the full frame, shape [N,H,W]; uncovered pixels are 0."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    n, _, h, w = images.shape
    oh, ow, top, left = output_geometry(model.config, h, w)
    out = np.zeros((n, h, w), dtype=np.float32)
    with no_grad():
        for start in range(0, n, batch_size):
            probs = forward(model, images[start:start + batch_size]).data
            out[start:start + batch_size, top:top + oh, left:left + ow] = probs[:, 0]
    return out


def predict_mask(model: SegModel, image, threshold: float = 0.5, return_coverage: bool = False):
    """Binary mask ``probs >= threshold``.

    Accepts one image [C,H,W] (returns [H,W]) or a batch [N,C,H,W] (returns
    [N,H,W]).  Pixels outside the valid-padding footprint are background;
    ``return_coverage=True`` also returns the boolean footprint.
    """
    arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    probs = predict_proba(model, arr)
    cover = coverage_mask(model.config, arr.shape[-2], arr.shape[-1])
    masks = (probs >= threshold) & cover
    if single:
        masks = masks[0]
    return (masks, cover) if return_coverage else masks


# ----------------------------------------------------------------------------
# loss and optimizer


DICE_SMOOTH = 1.0


def dice_loss(probs: Tensor, targets, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss ``1 - (2·Σpt + s) / (Σp + Σt + s)`` pooled over the whole batch."""
    t = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=probs.data.dtype))
    if probs.shape != t.shape:
        raise DomainError(f"dice_loss: shape mismatch {probs.shape} vs {t.shape}")
    inter = tsum(probs * t)
    denom = tsum(probs) + float(t.data.sum(dtype=np.float64)) + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0):
    """One bias-corrected Adam update, in place; ``weight_decay`` is decoupled (AdamW)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
        if weight_decay:
            p.data = p.data - (lr * weight_decay) * p.data - step
        else:
            p.data = p.data - step
    return params, state


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainSchedule:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    augmentation: str = "none"          # none | random_crop | quarter_crop
    crop_scale: tuple[float, float] = (0.5, 1.0)
    augment_seed: int | None = None     # defaults to seed + 1
    optimizer: str = "adam"             # adam | adamw
    weight_decay: float = 0.0
    lr_schedule: str = "constant"       # constant | cosine
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.augmentation not in ("none", "random_crop", "quarter_crop"):
            raise UsageError(f"unknown augmentation {self.augmentation!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise UsageError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.crop_scale = tuple(float(s) for s in self.crop_scale)

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine" and self.epochs > 0:
            return 0.5 * self.learning_rate * (1 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.loss)


def _arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "images") and hasattr(data, "masks"):
        images, masks = data.images, data.masks
    else:
        images, masks = data
    images = np.asarray(images, dtype=np.float32)
    masks = np.asarray(masks)
    if masks.ndim == 4:
        masks = masks[:, 0]
    if images.ndim != 4 or masks.shape != (images.shape[0],) + images.shape[2:]:
        raise UsageError(f"images {images.shape} and masks {masks.shape} do not pair up")
    return images, masks.astype(bool)


def _augmenter(schedule: TrainSchedule) -> Callable | None:
    if schedule.augmentation == "none":
        return None
    if schedule.augmentation == "random_crop":
        from .dataio import CropSpec, random_crop_augment

        spec = CropSpec(scale=schedule.crop_scale)
        return lambda img, msk, rng: random_crop_augment(img, msk, spec, rng)
    from .phantom import quarter_crop

    return quarter_crop


def evaluate_dice(model: SegModel, images, masks) -> list[float]:
    """Per-image Dice on the model's covered footprint."""
    preds, cover = predict_mask(model, images, return_coverage=True)
    masks = np.asarray(masks, dtype=bool)
    return [dice(p[cover], m[cover]) for p, m in zip(preds, masks)]


def train(model: SegModel, train_set, val_set, schedule: TrainSchedule,
          progress: Callable[[int, float, float], None] | None = None):
    """Train a copy of ``model``; return ``(trained_model, history)``.

    Each epoch visits a seeded permutation of ``train_set`` in mini-batches;
    augmentation is drawn per sample from its own seeded stream.
    """
    images, masks = _arrays(train_set)
    if len(images) == 0:
        raise UsageError("training set is empty")
    val_images, val_masks = _arrays(val_set) if val_set is not None else (None, None)
    model = model.copy()
    history = TrainHistory()
    if schedule.epochs == 0:
        return model, history
    cfg = model.config
    n, _, h, w = images.shape
    oh, ow, top, left = output_geometry(cfg, h, w)
    shuffle_rng = np.random.default_rng(schedule.seed)
    aug_seed = schedule.seed + 1 if schedule.augment_seed is None else schedule.augment_seed
    aug_rng = np.random.default_rng(aug_seed)
    augment = _augmenter(schedule)
    state = AdamState()
    decay = schedule.weight_decay if schedule.optimizer == "adamw" else 0.0

    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            xb, yb = images[idx], masks[idx]
            if augment is not None:
                pairs = [augment(xb[i], yb[i], aug_rng) for i in range(len(idx))]
                xb = np.stack([a for a, _ in pairs]).astype(np.float32)
                yb = np.stack([b for _, b in pairs])
            target = yb[:, None, top:top + oh, left:left + ow].astype(np.float32)
            loss = dice_loss(forward(model, xb), target)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            grads = backward(loss, model.params)
            adam_step(model.params, grads, state, lr, schedule.beta1, schedule.beta2,
                      schedule.eps, weight_decay=decay)
            losses.append(value)
        history.loss.append(float(np.mean(losses)))
        if val_images is not None and len(val_images):
            history.val_dice.append(float(np.mean(evaluate_dice(model, val_images, val_masks))))
        else:
            history.val_dice.append(float("nan"))
        log.debug("epoch %d loss %.4f val_dice %.4f", epoch, history.loss[-1], history.val_dice[-1])
        if progress is not None:
            progress(epoch, history.loss[-1], history.val_dice[-1])
    return model, history


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: SegModel, path) -> Path:
    """Write ``model`` in the SSCK binary format (little-endian throughout)."""
    path = Path(path)
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> SegModel:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not an SSCK checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this loader reads {CHECKPOINT_VERSION}")
    try:
        config = UNetConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable config block ({exc})") from exc
    params = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    expected = [n for n, _ in _layer_shapes(config)]
    if list(params) != expected:
        raise FormatError(f"{path}: parameter names do not match the stored config")
    return SegModel(config, params)
