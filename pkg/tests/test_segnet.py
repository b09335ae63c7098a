import struct

import numpy as np
import pytest

from shortcutseg.errors import DomainError, FormatError, NumericError, UsageError, VersionError
from shortcutseg.segnet import (
    AdamState,
    PaddingMode,
    SegModel,
    TrainSchedule,
    UNetConfig,
    adam_step,
    coverage_mask,
    dice_loss,
    forward,
    forward_logits,
    init_unet,
    load_checkpoint,
    output_geometry,
    predict_mask,
    predict_proba,
    save_checkpoint,
    train,
)
from shortcutseg.tensor import Tensor, backward, finite_diff_grad


def valid_geometry_oracle(n, depth, k=3):
    """Independent (offset, size) tracker in input-pixel units for the valid U-Net.

    Pooling pairs pixels (2i, 2i+1) of the padded model's grid, so a level's
    footprint must start on an even index (in that level's units) before
    pooling; otherwise the leading row is dropped.
    """
    shrink = 2 * (k - 1)          # two convs per block, each losing (k-1) pixels
    off, size, scale = 0, n, 1    # off/size in current level units; scale = level stride
    for _ in range(depth):
        off, size = off + shrink // 2, size - shrink
        if off % 2:
            off, size = off + 1, size - 1
        off, size, scale = off // 2, size // 2, scale * 2
    off, size = off + shrink // 2, size - shrink
    for _ in range(depth):
        off, size, scale = off * 2, size * 2, scale // 2
        off, size = off + shrink // 2, size - shrink
    return off, size


def tiny_model(padding="zeros", depth=1, base=2, channels=1, seed=0):
    return init_unet(UNetConfig(channels, depth, base, PaddingMode.parse(padding)), seed)


# ------------------------------------------------------------------- init

def test_init_deterministic():
    a, b = tiny_model(seed=3), tiny_model(seed=3)
    assert list(a.params) == list(b.params)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_init_biases_zero_and_kaiming_bound():
    m = init_unet(UNetConfig(1, 2, 4), 0)
    for name, t in m.params.items():
        if name.endswith("bias"):
            assert not t.data.any()
        else:
            fan_in = int(np.prod(t.shape[1:]))
            assert np.abs(t.data).max() <= np.sqrt(6 / fan_in) + 1e-7


def test_channel_plan_doubles():
    cfg = UNetConfig(1, 3, 16)
    assert cfg.encoder_channels == [16, 32, 64]
    assert cfg.bottleneck_channels == 128


def test_zero_weights_give_half():
    m = tiny_model()
    for t in m.params.values():
        t.data[...] = 0
    out = forward(m, np.zeros((1, 1, 8, 8), np.float32)).data
    assert np.all(out == 0.5)


# ---------------------------------------------------------------- forward

def test_forward_shape_and_range():
    m = tiny_model(depth=2)
    x = np.random.default_rng(0).random((3, 1, 16, 16)).astype(np.float32)
    out = forward(m, x).data
    assert out.shape == (3, 1, 16, 16)
    assert np.all((out > 0) & (out < 1))


def test_indivisible_input():
    with pytest.raises(UsageError):
        forward(tiny_model(depth=2), np.zeros((1, 1, 10, 12), np.float32))


def test_wrong_channel_count():
    with pytest.raises(UsageError):
        forward(tiny_model(channels=3), np.zeros((1, 1, 8, 8), np.float32))


@pytest.mark.parametrize("n,depth", [(64, 1), (64, 2), (96, 2), (128, 3), (192, 3), (40, 1)])
def test_valid_geometry_matches_oracle(n, depth):
    off, size = valid_geometry_oracle(n, depth)
    oh, ow, top, left = output_geometry(UNetConfig(1, depth, 2, PaddingMode.VALID), n, n)
    assert (oh, top) == (size, off) and (ow, left) == (size, off)
    m = init_unet(UNetConfig(1, depth, 2, PaddingMode.VALID), 0)
    assert forward_logits(m, np.zeros((1, 1, n, n), np.float32)).shape == (1, 1, size, size)


def test_valid_64_known_sizes():
    assert output_geometry(UNetConfig(1, 1, 2, "valid"), 64, 64) == (48, 48, 8, 8)
    assert output_geometry(UNetConfig(1, 2, 2, "valid"), 64, 64) == (20, 20, 22, 22)


def test_valid_depth3_at_64_collapses():
    with pytest.raises(UsageError):
        output_geometry(UNetConfig(1, 3, 2, "valid"), 64, 64)


def test_valid_matches_zeros_on_interior():
    zeros = tiny_model("zeros", depth=2, seed=4)
    valid = SegModel(UNetConfig(1, 2, 2, PaddingMode.VALID), zeros.params)
    x = np.random.default_rng(1).random((2, 1, 64, 64)).astype(np.float32)
    pz = forward_logits(zeros, x).data[:, 0]
    pv = forward_logits(valid, x).data[:, 0]
    oh, ow, top, left = output_geometry(valid.config, 64, 64)
    # same arithmetic up to GEMM accumulation order
    np.testing.assert_allclose(pz[:, top:top + oh, left:left + ow], pv, atol=1e-6)


def test_coverage_mask_counts():
    cover = coverage_mask(UNetConfig(1, 1, 2, "valid"), 64, 64)
    assert cover.sum() == 48 * 48
    assert coverage_mask(UNetConfig(1, 1, 2), 64, 64).all()


# ------------------------------------------------------------------- loss

def test_dice_loss_perfect_match():
    t = np.zeros((1, 1, 4, 4), np.float32)
    t[0, 0, 1:3, 1:3] = 1
    loss = float(dice_loss(Tensor(t), t).data)
    assert 0 <= loss <= 1.0 / (2 * 4 + 1) + 1e-7


def test_dice_loss_empty_empty_is_zero():
    z = np.zeros((2, 1, 3, 3), np.float32)
    assert float(dice_loss(Tensor(z), z).data) == 0.0


def test_dice_loss_all_ones_vs_empty():
    n = 2 * 3 * 3
    loss = float(dice_loss(Tensor(np.ones((2, 1, 3, 3))), np.zeros((2, 1, 3, 3))).data)
    assert loss == pytest.approx(1 - 1.0 / (n + 1.0), abs=1e-7)


def test_dice_loss_shape_mismatch():
    with pytest.raises(DomainError):
        dice_loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))


def test_dice_loss_bounds_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.random((2, 1, 5, 5)).astype(np.float32)
        t = (rng.random((2, 1, 5, 5)) > 0.5).astype(np.float32)
        assert 0 <= float(dice_loss(Tensor(p), t).data) <= 1


# ------------------------------------------------------------------- adam

def test_adam_first_step():
    p = {"w": Tensor(np.zeros(3, np.float32))}
    adam_step(p, {"w": np.ones(3, np.float32)}, AdamState(), lr=1e-3)
    np.testing.assert_allclose(p["w"].data, -1e-3, rtol=1e-4)


def test_adam_zero_grad_no_change():
    p = {"w": Tensor(np.full(3, 2.0, np.float32))}
    adam_step(p, {"w": np.zeros(3, np.float32)}, AdamState(), lr=1e-3)
    np.testing.assert_array_equal(p["w"].data, np.full(3, 2.0))


def test_adam_nan_names_parameter():
    p = {"enc0.conv1.weight": Tensor(np.zeros(2, np.float32))}
    with pytest.raises(NumericError, match="enc0.conv1.weight"):
        adam_step(p, {"enc0.conv1.weight": np.array([np.nan, 0], np.float32)}, AdamState(), lr=1e-3)


def test_adamw_decay_shrinks_weights():
    p = {"w": Tensor(np.full(2, 1.0, np.float32))}
    adam_step(p, {"w": np.zeros(2, np.float32)}, AdamState(), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(p["w"].data, 0.95, rtol=1e-6)


def test_cosine_schedule():
    s = TrainSchedule(learning_rate=1.0, epochs=4, lr_schedule="cosine")
    assert s.lr_at(0) == 1.0
    assert s.lr_at(2) == pytest.approx(0.5)


def test_schedule_validation():
    with pytest.raises(UsageError):
        TrainSchedule(epochs=-1)
    with pytest.raises(UsageError):
        TrainSchedule(batch_size=0)
    with pytest.raises(UsageError):
        TrainSchedule(augmentation="flip")


# -------------------------------------------------------------- gradients

def test_unet_gradient_check_small():
    cfg = UNetConfig(1, 1, 2)
    m = init_unet(cfg, 1)
    for k, t in m.params.items():
        m.params[k] = Tensor(t.data.astype(np.float64), requires_grad=True, name=k)
        if k.endswith("bias"):
            m.params[k].data[...] = np.random.default_rng(hash(k) % 2**32).standard_normal(t.shape) * 0.1
    rng = np.random.default_rng(2)
    x = rng.random((2, 1, 8, 8))
    y = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64)
    loss = lambda: dice_loss(forward(m, Tensor(x, dtype=np.float64)), y)
    grads = backward(loss(), m.params)
    for name in ("enc0.conv1.weight", "head.bias", "dec0.conv2.bias"):
        num = finite_diff_grad(lambda _: loss(), m.params[name], eps=1e-6)
        err = np.abs(num - grads[name]) / np.maximum(np.maximum(np.abs(num), np.abs(grads[name])), 1e-6)
        assert err.max() < 1e-3, name


# ------------------------------------------------------------------ train

def disk_set(n=8, size=16, r=4):
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (xx - (size - 1) / 2) ** 2 + (yy - (size - 1) / 2) ** 2 <= r * r
    rng = np.random.default_rng(0)
    images = np.stack([(0.1 + 0.8 * mask + 0.05 * rng.random((size, size)))[None] for _ in range(n)])
    return images.astype(np.float32), np.repeat(mask[None], n, axis=0)


def test_train_zero_epochs_is_noop():
    m = tiny_model()
    out, hist = train(m, disk_set(), None, TrainSchedule(epochs=0))
    assert len(hist) == 0
    for k in m.params:
        np.testing.assert_array_equal(out.params[k].data, m.params[k].data)


def test_train_tiny_separable_task():
    x, y = disk_set()
    m = init_unet(UNetConfig(1, 2, 4), 0)
    out, hist = train(m, (x, y), (x, y), TrainSchedule(epochs=30, batch_size=4, learning_rate=1e-2, seed=1))
    assert len(hist.loss) == 30 and len(hist.val_dice) == 30
    assert hist.val_dice[-1] > 0.9


def test_train_is_deterministic_and_seed_dependent():
    x, y = disk_set()
    m = tiny_model()
    run = lambda seed: train(m, (x, y), None, TrainSchedule(epochs=2, batch_size=3, seed=seed))[0]
    a, b, c = run(5), run(5), run(6)
    for k in m.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in m.params)


def test_train_does_not_mutate_input_model():
    x, y = disk_set()
    m = tiny_model()
    before = {k: v.data.copy() for k, v in m.params.items()}
    train(m, (x, y), None, TrainSchedule(epochs=1))
    for k in m.params:
        np.testing.assert_array_equal(m.params[k].data, before[k])


def test_train_nan_aborts():
    x, y = disk_set()
    m = tiny_model()
    m.params["head.bias"].data[...] = np.nan
    with pytest.raises(NumericError):
        train(m, (x, y), None, TrainSchedule(epochs=1))


def test_train_valid_mode_runs():
    x, y = disk_set(size=64, r=6)
    m = init_unet(UNetConfig(1, 1, 2, PaddingMode.VALID), 0)
    _, hist = train(m, (x[:2], y[:2]), (x[:2], y[:2]), TrainSchedule(epochs=1, batch_size=2))
    assert np.isfinite(hist.loss[0])


# ---------------------------------------------------------------- predict

def test_predict_half_is_foreground():
    m = tiny_model()
    for t in m.params.values():
        t.data[...] = 0
    assert predict_mask(m, np.zeros((1, 8, 8), np.float32)).all()


def test_predict_threshold_monotone():
    m = tiny_model(seed=2)
    x = np.random.default_rng(0).random((2, 1, 8, 8)).astype(np.float32)
    prev = None
    for thr in (0.1, 0.3, 0.5, 0.7, 0.9):
        cur = predict_mask(m, x, threshold=thr)
        if prev is not None:
            assert not (cur & ~prev).any()
        prev = cur


def test_predict_valid_embeds_footprint():
    m = init_unet(UNetConfig(1, 1, 2, PaddingMode.VALID), 0)
    for t in m.params.values():
        t.data[...] = 0
    mask, cover = predict_mask(m, np.zeros((1, 64, 64), np.float32), return_coverage=True)
    assert mask.shape == (64, 64)
    assert mask[cover].all() and not mask[~cover].any()
    assert predict_proba(m, np.zeros((1, 1, 64, 64), np.float32))[0][~cover].max() == 0


# ------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    m = init_unet(UNetConfig(3, 2, 4, PaddingMode.REFLECT), 7)
    path = save_checkpoint(m, tmp_path / "m.ssck")
    back = load_checkpoint(path)
    assert back.config == m.config
    assert list(back.params) == list(m.params)
    for k in m.params:
        assert back.params[k].data.tobytes() == m.params[k].data.tobytes()
    assert save_checkpoint(back, tmp_path / "again.ssck").read_bytes() == path.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    raw = save_checkpoint(tiny_model(), tmp_path / "m.ssck").read_bytes()
    assert raw[:4] == b"SSCK"
    assert struct.unpack("<I", raw[4:8])[0] == 1


def test_checkpoint_bad_magic(tmp_path):
    path = save_checkpoint(tiny_model(), tmp_path / "m.ssck")
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_version_bump(tmp_path):
    path = save_checkpoint(tiny_model(), tmp_path / "m.ssck")
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [3, 10, 40, -1])
def test_checkpoint_truncated(tmp_path, cut):
    path = save_checkpoint(tiny_model(), tmp_path / "m.ssck")
    raw = path.read_bytes()
    path.write_bytes(raw[:cut] if cut > 0 else raw[:-1])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path):
    path = save_checkpoint(tiny_model(), tmp_path / "m.ssck")
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(path)
