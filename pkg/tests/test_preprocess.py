import numpy as np
import pytest

from myoquant.emc import SequenceParams, build_dictionary, fit_map
from myoquant.metrics import dice
from myoquant.phantom import BONE, MUSCLE, SAT, PhantomSpec, generate_phantom, simulate_acquisition, \
    smooth_bias_field
from myoquant.preprocess import (
    CropTransform,
    PreprocessConfig,
    PreprocessError,
    clip_percentile,
    correct_bias_field,
    crop_and_resize,
    crop_transform,
    detect_outer_edge,
    preprocess_maps,
    zscore_normalize,
)


def disk(shape, cy, cx, r):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2


def band_agrees(mask, truth, width=2):
    from scipy import ndimage
    grown = ndimage.binary_dilation(truth, iterations=width)
    shrunk = ndimage.binary_erosion(truth, iterations=width)
    return np.all(mask[shrunk]) and not np.any(mask & ~grown)


def test_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(canny_low=0.4, canny_high=0.3)
    with pytest.raises(ValueError):
        PreprocessConfig(clip_percentile=0.4)
    c = PreprocessConfig(clip_pd=True)
    assert PreprocessConfig.from_dict(c.to_dict()) == c
    assert c.target_size == (128, 128) and c.clip_percentile == 0.98


def test_edge_disk():
    truth = disk((128, 128), 60, 70, 35)
    img = truth.astype(float) * 0.9 + 0.05
    mask = detect_outer_edge(img)
    assert band_agrees(mask, truth)


def test_edge_two_disks():
    a, b = disk((128, 160), 64, 40, 28), disk((128, 160), 64, 118, 26)
    img = (a | b) * 1.0
    mask = detect_outer_edge(img)
    assert band_agrees(mask, a | b)
    assert mask[64, 40] and mask[64, 118]


def test_edge_constant_rejected():
    with pytest.raises(PreprocessError, match="edges"):
        detect_outer_edge(np.full((32, 32), 3.0))


def test_edge_on_phantom():
    ph = generate_phantom(PhantomSpec(legs=2))
    e1 = simulate_acquisition(ph, snr=30).echoes[..., 0]
    assert dice(detect_outer_edge(e1), ph.foreground) > 0.97


def test_crop_whole_image_is_resize_only():
    rng = np.random.default_rng(0)
    img = rng.random((64, 64))
    out, tf = crop_and_resize(img, np.ones((64, 64), bool), (64, 64))
    assert (tf.y0, tf.y1, tf.x0, tf.x1) == (0, 64, 0, 64)
    assert np.allclose(out, img, atol=1e-6)


def test_crop_centered_object():
    img = np.zeros((128, 128))
    img[32:96, 32:96] = np.add.outer(np.arange(64), np.arange(64))
    mask = np.zeros((128, 128), bool)
    mask[32:96, 32:96] = True
    out, tf = crop_and_resize(img, mask, (136, 136), margin=2)
    assert (tf.y0, tf.y1) == (30, 98)
    # crop of 68 px upsampled by exactly 2: output pixel i samples source (i + 0.5) / 2 - 0.5
    src = (np.arange(136) + 0.5) / 2 - 0.5 - 2
    ramp = np.add.outer(src, src)
    inner = slice(6, 128)
    assert np.allclose(out[inner, inner], ramp[inner, inner], atol=1e-4)


def test_crop_empty_mask_rejected():
    with pytest.raises(PreprocessError):
        crop_and_resize(np.ones((8, 8)), np.zeros((8, 8), bool))


def test_map_back_round_trip():
    ph = generate_phantom(PhantomSpec(seed=3))
    tf = crop_transform(ph.foreground, (128, 128))
    back = tf.map_back(tf.apply_mask(ph.region))
    assert dice(back, ph.region) >= 0.95
    assert CropTransform.from_dict(tf.to_dict()) == tf


def test_bias_free_is_unit():
    ph = generate_phantom(PhantomSpec(seed=1))
    img = simulate_acquisition(ph).echoes[..., 0]
    _, bias = correct_bias_field(img, ph.foreground)
    assert np.max(np.abs(bias - 1)) <= 0.05


def test_flat_image_unchanged():
    img = np.full((48, 48), 2.5)
    corrected, bias = correct_bias_field(img, np.ones_like(img, bool))
    assert np.allclose(bias, 1.0, atol=1e-6)
    assert np.allclose(corrected, img, atol=1e-5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_known_bias_recovery(seed):
    ph = generate_phantom(PhantomSpec(seed=seed))
    truth = simulate_acquisition(ph).echoes[..., 0].astype(np.float64)
    fg = ph.foreground
    field = smooth_bias_field(truth.shape, 0.2, np.random.default_rng(seed + 10))
    assert 0.79 <= field.min() and field.max() <= 1.21
    corrected, bias = correct_bias_field(truth * field, fg)
    ratio = corrected[fg] / truth[fg]
    # the field is only defined up to a global scale
    rel = np.abs(ratio / np.median(ratio) - 1)
    assert rel.max() <= 0.08
    order = lambda im: np.argsort([im[ph.tissue == t].mean() for t in (SAT, MUSCLE, BONE)])
    assert np.array_equal(order(corrected), order(truth))
    assert bias[fg].mean() == pytest.approx(1.0, abs=1e-5)


def test_bias_rejects_non_positive():
    img = np.ones((16, 16))
    img[3, 3] = 0
    with pytest.raises(PreprocessError, match="positive"):
        correct_bias_field(img, np.ones_like(img, bool))


def test_clip_examples():
    v = np.arange(1, 101, dtype=np.float64).reshape(10, 10)
    out = clip_percentile(v, 0.98)
    assert out.max() == pytest.approx(98.02)
    assert np.array_equal(out[v <= 98], v[v <= 98])
    assert np.array_equal(clip_percentile(v, 1.0), v)
    c = np.full((5, 5), 4.0)
    assert np.array_equal(clip_percentile(c, 0.98), c)


def test_zscore_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(5, 3, (32, 32))
    z = zscore_normalize(x)
    assert abs(z.astype(np.float64).mean()) <= 1e-6
    assert abs(z.astype(np.float64).std() - 1) <= 1e-6
    assert np.allclose(zscore_normalize(2.5 * x - 7), z, atol=1e-5)
    x[4, 4] = 1e8
    assert np.all(np.isfinite(zscore_normalize(x)))
    with pytest.raises(PreprocessError):
        zscore_normalize(np.ones((4, 4)))


def test_zscore_background_zero():
    x = np.arange(16.0).reshape(4, 4)
    m = x > 5
    z = zscore_normalize(x, m)
    assert np.all(z[~m] == 0)


def test_clip_normalize_idempotent_on_fitted_map():
    ph = generate_phantom(PhantomSpec(seed=1, imat_fraction=0.2))
    acq = simulate_acquisition(ph, snr=30)
    t2, _, _ = fit_map(acq.echoes, build_dictionary(SequenceParams()))
    m = ph.foreground
    once = zscore_normalize(clip_percentile(t2, 0.98, m), m)
    twice = zscore_normalize(clip_percentile(once, 0.98, m), m)
    assert np.max(np.abs(twice - once)) <= 1e-6


def test_preprocess_chain_geometry():
    ph = generate_phantom(PhantomSpec(seed=2, legs=2, size=128))
    acq = simulate_acquisition(ph, bias_amplitude=0.2, snr=30)
    t2, pd, _ = fit_map(acq.echoes, build_dictionary(SequenceParams()))
    out = preprocess_maps(t2, pd, PreprocessConfig(target_size=(96, 96)))
    assert out.t2.shape == out.pd.shape == out.mask.shape == (96, 96)
    for img in (out.t2, out.pd):
        v = img[out.mask].astype(np.float64)
        assert abs(v.mean()) < 1e-5 and abs(v.std() - 1) < 1e-5
        assert np.all(img[~out.mask] == 0)
    raw = preprocess_maps(t2, pd, raw=True)
    assert raw.bias is None and raw.t2.shape == (128, 128)
