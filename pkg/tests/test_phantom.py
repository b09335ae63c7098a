import math

import numpy as np
import pytest

from shortcutseg.dataio import MarkerColorSpec, detect_markers
from shortcutseg.errors import DomainError, UsageError
from shortcutseg.phantom import (
    MANIFEST_COLUMNS,
    DatasetManifest,
    MarkerSpec,
    Placement,
    SceneSpec,
    generate_dataset,
    generate_scene,
    inject_markers,
    make_frozen_sequence,
    marker_elements,
    quarter_crop,
    render_sample,
    split_assignment,
)


def test_centered_zero_sigma_hits_frame_center():
    for seed in range(5):
        s = generate_scene(SceneSpec(sigma_frac=0.0), seed)
        assert s.center == (31.5, 31.5)


def test_same_seed_same_bytes():
    spec = SceneSpec(channels=3, placement="uniform")
    a, b = generate_scene(spec, 11), generate_scene(spec, 11)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()


def test_image_on_8bit_grid():
    im = generate_scene(SceneSpec(), 0).image
    np.testing.assert_array_equal(np.round(im * 255) / 255, im.astype(np.float64).astype(np.float32))
    assert im.min() >= 0 and im.max() <= 1


def test_centered_lesion_fully_inside():
    for seed in range(50):
        m = generate_scene(SceneSpec(), seed).mask
        assert m.any()
        assert not (m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())


def test_rejection_failure_is_domain_error():
    with pytest.raises(DomainError):
        generate_scene(SceneSpec(axis_range=(0.55, 0.6), sigma_frac=0.0), 0)


def test_spec_validation():
    with pytest.raises(UsageError):
        SceneSpec(size=63)
    with pytest.raises(UsageError):
        SceneSpec(channels=2)
    with pytest.raises(ValueError):
        SceneSpec(placement="diagonal")


def test_uniform_placement_moments():
    n, size = 10_000, 64
    spec = SceneSpec(size=size, placement=Placement.UNIFORM, noise_cell=16)
    centers = np.array([generate_scene(spec, i).center for i in range(n)])
    # center ~ U[-0.5, size-0.5]: mean (size-1)/2, variance size^2/12
    np.testing.assert_allclose(centers.mean(axis=0), (size - 1) / 2, atol=2.0)
    np.testing.assert_allclose(centers.var(axis=0), size ** 2 / 12, rtol=0.05)


def test_centroid_central_fractions():
    def frac(placement, n):
        spec = SceneSpec(placement=placement)
        inside = 0
        for i in range(n):
            cx, cy = generate_scene(spec, i).centroid
            inside += 16 <= cx + 0.5 < 48 and 16 <= cy + 0.5 < 48
        return inside / n

    assert frac("centered", 400) >= 0.95
    assert abs(frac("uniform", 2000) - 0.25) <= 0.10


# ---------------------------------------------------------------- markers

def lesion(seed=0, channels=3):
    s = generate_scene(SceneSpec(channels=channels), seed)
    return s.image, s.mask


def test_rho_one_always_marks():
    im, m = lesion()
    rng = np.random.default_rng(0)
    for _ in range(20):
        out, present = inject_markers(im, m, MarkerSpec(rho=1.0), rng)
        assert present and not np.array_equal(out, im)


def test_rho_zero_is_identity():
    im, m = lesion()
    out, present = inject_markers(im, m, MarkerSpec(rho=0.0), np.random.default_rng(0))
    assert not present
    assert out.tobytes() == im.tobytes()


def test_rho_half_presence_rate():
    im = np.zeros((1, 16, 16), np.float32)
    m = np.zeros((16, 16), bool)
    m[6:10, 5:11] = True
    rng = np.random.default_rng(3)
    hits = sum(inject_markers(im, m, MarkerSpec(rho=0.5), rng)[1] for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) <= 0.02


def test_markers_leave_mask_untouched_and_lesion_mostly_uncovered():
    spec = MarkerSpec()
    for seed in range(30):
        im, m = lesion(seed)
        before = m.copy()
        _, _, fp = inject_markers(im, m, spec, np.random.default_rng(seed), return_footprint=True)
        assert np.array_equal(m, before)
        assert (fp & m).sum() <= 0.02 * m.sum()


def test_marker_color_rgb_and_gray():
    for channels, expect in ((3, (1.0, 0.85, 0.1)), (1, (1.0,))):
        im, m = lesion(channels=channels)
        out, _, fp = inject_markers(im, m, MarkerSpec(), np.random.default_rng(0), return_footprint=True)
        for ch, v in enumerate(expect):
            np.testing.assert_allclose(out[ch][fp], round(v * 255) / 255, atol=1e-6)
        np.testing.assert_array_equal(out[:, ~fp], im[:, ~fp])


def test_marker_elements_layout():
    m = np.zeros((64, 64), bool)
    m[28:36, 20:44] = True  # horizontal major axis
    cal1, cal2, text = marker_elements(m, MarkerSpec())
    xs1, xs2 = np.nonzero(cal1)[1], np.nonzero(cal2)[1]
    assert xs1.max() < 20 and xs2.min() > 43
    assert text.sum() == 30  # checkered 6x10 block
    # lesion centroid (31.5, 31.5) ties all corners; first one wins
    assert text[2:8, 2:12].sum() == 30


def test_detect_recovers_stamped_pixels():
    for seed in range(20):
        im, m = lesion(seed)
        out, _, fp = inject_markers(im, m, MarkerSpec(), np.random.default_rng(seed), return_footprint=True)
        hit = detect_markers(out)
        assert (hit & fp).sum() >= 0.99 * fp.sum()


def test_empty_mask_markers_is_domain_error():
    with pytest.raises(DomainError):
        marker_elements(np.zeros((8, 8), bool), MarkerSpec())


# ------------------------------------------------------------ quarter crop

def test_quarter_crop_quadrant0_is_top_left():
    im = np.arange(64, dtype=np.float32).reshape(1, 8, 8) / 64
    m = np.zeros((8, 8), bool)
    m[:4, :4] = True
    class Fixed:
        def integers(self, n):
            return 0
    out_im, out_m = quarter_crop(im, m, Fixed())
    assert out_m.all()
    big = np.repeat(np.repeat(im[0, :4, :4], 2, axis=0), 2, axis=1)
    assert abs(out_im[0].mean() - big.mean()) < 1e-6


def test_quarter_crop_centered_lesion_corner():
    size = 32
    y, x = np.mgrid[0:size, 0:size]
    m = (x - 15.5) ** 2 + (y - 15.5) ** 2 <= 36
    im = m[None].astype(np.float32)
    corners = {0: (-1, -1), 1: (-1, 0), 2: (0, -1), 3: (0, 0)}
    for q, (r, c) in corners.items():
        _, out = quarter_crop(im, m, None, quadrant=q)
        ys, xs = np.nonzero(out)
        assert out[r, c]
        # exactly one blob, anchored at that corner
        assert out.sum() < size * size / 4


def test_quarter_crop_uniform_choice():
    rng = np.random.default_rng(0)
    im = np.zeros((1, 4, 4), np.float32)
    m = np.zeros((4, 4), bool)
    counts = np.zeros(4)
    for _ in range(10_000):
        counts[quarter_crop(im, m, rng, return_quadrant=True)[2]] += 1
    assert np.all(np.abs(counts / 10_000 - 0.25) <= 0.02)


def test_quarter_crop_odd_dims():
    with pytest.raises(DomainError):
        quarter_crop(np.zeros((1, 5, 4)), np.zeros((5, 4), bool), np.random.default_rng(0))


# ---------------------------------------------------------------- dataset

def test_generate_dataset_layout_and_determinism(tmp_path):
    spec, mspec = SceneSpec(size=32, channels=3), MarkerSpec(rho=0.5)
    a = generate_dataset(tmp_path / "a", 10, spec, mspec, base_seed=7)
    b = generate_dataset(tmp_path / "b", 10, spec, mspec, base_seed=7)
    assert len(list((tmp_path / "a" / "images").glob("*.png"))) == 10
    assert len(list((tmp_path / "a" / "masks").glob("*.png"))) == 10
    for name in ["manifest.csv", "generator.json"] + [r["image_path"] for r in a.records] + \
            [r["mask_path"] for r in a.records]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back = DatasetManifest.read(tmp_path / "a")
    assert len(back) == 10 and back.scene_spec == spec and back.marker_spec == mspec
    assert [r["seed"] for r in back.records] == list(range(7, 17))
    header = (tmp_path / "a" / "manifest.csv").read_text().splitlines()[0]
    assert header.split(",") == MANIFEST_COLUMNS


def test_manifest_seed_regenerates_sample(tmp_path):
    from shortcutseg.imaging import read_image, read_mask

    spec, mspec = SceneSpec(size=32, channels=3), MarkerSpec(rho=0.5)
    man = generate_dataset(tmp_path, 6, spec, mspec, base_seed=100)
    for rec in man.records:
        image, mask, present, _ = render_sample(spec, mspec, rec["seed"])
        assert present == rec["markers_present"]
        np.testing.assert_array_equal(read_image(tmp_path / rec["image_path"], 3), image)
        np.testing.assert_array_equal(read_mask(tmp_path / rec["mask_path"]), mask)


def test_split_assignment_exact():
    tags = split_assignment(1000, 0)
    assert (tags.count("train"), tags.count("val"), tags.count("test")) == (800, 100, 100)
    assert split_assignment(1000, 0) == tags


# --------------------------------------------------------- frozen frames

def test_frozen_sequence_two_frames():
    im, m = lesion()
    frames = make_frozen_sequence(im, m, MarkerSpec(), 2)
    assert len(frames) == 2
    assert frames[0].tobytes() == im.tobytes()
    full, _ = inject_markers(im, m, MarkerSpec(rho=1.0), np.random.default_rng(0))
    assert frames[1].tobytes() == full.tobytes()


def test_frozen_sequence_diffs_only_at_new_glyphs():
    im, m = lesion(3)
    spec = MarkerSpec()
    elements = marker_elements(m, spec)
    frames = make_frozen_sequence(im, m, spec, 8)
    arrive = [math.ceil(j * 7 / 3) for j in (1, 2, 3)]
    assert arrive == [3, 5, 7]
    for t in range(1, 8):
        changed = np.any(frames[t] != frames[t - 1], axis=0)
        allowed = np.zeros_like(m)
        for e, when in zip(elements, arrive):
            if when == t:
                allowed |= e
        assert not (changed & ~allowed).any()
        assert changed.any() == allowed.any()


def test_frozen_sequence_too_short():
    im, m = lesion()
    with pytest.raises(UsageError):
        make_frozen_sequence(im, m, MarkerSpec(), 1)
