import numpy as np
import pytest
from scipy import ndimage

from myoquant.engine import Tensor
from myoquant.segmentation import (
    AugmentConfig,
    AugmentParams,
    Case,
    TrainConfig,
    UNetConfig,
    VariantResult,
    apply_augment,
    augment,
    build_unet,
    format_table1,
    load_unet,
    predict_mask,
    predict_proba,
    VARIANTS,
    run_input_variant_harness,
    sample_augment,
    save_unet,
    table1_csv,
    train_unet,
    unet_parameter_count,
)


def manual_count(depth, base, cin, out=1):
    """Layer-by-layer tally written out independently of the model code."""
    layers = []
    ch = [base * 2 ** i for i in range(depth)]
    prev = cin
    for c in ch:
        layers += [(3, prev, c), (3, c, c)]
        prev = c
    for i in reversed(range(depth - 1)):
        layers += [(2, ch[i + 1], ch[i]), (3, 2 * ch[i], ch[i]), (3, ch[i], ch[i])]
    layers.append((1, ch[0], out))
    return sum(k * k * a * b + b for k, a, b in layers)


def test_parameter_count_base64():
    cfg = UNetConfig(depth=5, base_channels=64, in_channels=2)
    assert unet_parameter_count(cfg) == manual_count(5, 64, 2)
    assert build_unet(cfg).n_parameters() == manual_count(5, 64, 2)


@pytest.mark.parametrize("depth,base,cin", [(2, 4, 1), (3, 8, 2), (5, 16, 2)])
def test_parameter_count_small(depth, base, cin):
    cfg = UNetConfig(depth=depth, base_channels=base, in_channels=cin)
    assert build_unet(cfg).n_parameters() == unet_parameter_count(cfg) == manual_count(depth, base, cin)


def test_output_shape_and_range():
    m = build_unet(UNetConfig(depth=3, base_channels=4, in_channels=2))
    x = Tensor(np.random.default_rng(0).standard_normal((2, 32, 32, 2)).astype(np.float32))
    y = m(x).data
    assert y.shape == (2, 32, 32, 1)
    assert np.all((y > 0) & (y < 1))


def test_softmax_head():
    m = build_unet(UNetConfig(depth=2, base_channels=4, in_channels=1, activation="softmax"))
    y = m(Tensor(np.ones((1, 8, 8, 1), np.float32))).data
    assert y.shape == (1, 8, 8, 1) and np.all((y > 0) & (y < 1))


def test_valid_padding_shrinks():
    m = build_unet(UNetConfig(depth=2, base_channels=4, in_channels=1, padding="valid"))
    # 28 -> 24 -> pool 12 -> 8 -> up 16 -> 12
    assert m.output_shape(28, 28) == (12, 12)
    y = m(Tensor(np.ones((1, 28, 28, 1), np.float32))).data
    assert y.shape == (1, 12, 12, 1)


def test_indivisible_rejected():
    m = build_unet(UNetConfig(depth=5, base_channels=2, in_channels=1))
    with pytest.raises(ValueError, match="poolings"):
        m(Tensor(np.ones((1, 24, 24, 1), np.float32)))


def test_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(depth=1)
    with pytest.raises(ValueError):
        UNetConfig(in_channels=3)
    with pytest.raises(ValueError):
        AugmentConfig(zoom=(1.1, 1.3))
    with pytest.raises(ValueError):
        AugmentConfig(multiplier=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    a = AugmentConfig()
    assert (a.shift, a.zoom, a.rotation, a.multiplier) == (0.2, (0.9, 1.3), 30.0, 10)
    t = TrainConfig()
    assert (t.batch_size, t.epochs, t.lr, t.beta1, t.beta2, t.epsilon) == (8, 100, 1e-3, 0.9, 0.999, 1e-8)


def _disk(n=48, r=12, cy=24, cx=20):
    yy, xx = np.mgrid[0:n, 0:n]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float32)


def test_augment_identity():
    rng = np.random.default_rng(0)
    img = rng.random((16, 16, 2)).astype(np.float32)
    msk = _disk(16, 5, 8, 8)
    a, b = apply_augment(img, msk, AugmentParams())
    assert np.array_equal(a, img) and np.array_equal(b, msk)


def test_hflip_involution():
    rng = np.random.default_rng(1)
    img = rng.random((16, 16, 2)).astype(np.float32)
    msk = _disk(16, 5, 8, 6)
    p = AugmentParams(hflip=True)
    a, b = apply_augment(*apply_augment(img, msk, p), p)
    assert np.array_equal(a, img) and np.array_equal(b, msk)


def test_rotation_mask_image_consistency():
    msk = _disk()
    img = np.stack([msk, msk], axis=-1)
    p = AugmentParams(angle=30.0, zoom=1.1, shift_x=3.0)
    a, b = apply_augment(img, msk, p)
    thr = a[..., 0] > 0.5
    diff = thr != b.astype(bool)
    band = ndimage.binary_dilation(b.astype(bool)) & ~ndimage.binary_erosion(b.astype(bool))
    assert np.all(band[diff])


def test_rotation_direction_and_zero_fill():
    img = np.zeros((21, 21), np.float32)
    img[10, 15] = 1.0
    a, _ = apply_augment(img, img, AugmentParams(angle=90.0))
    assert np.unravel_index(a.argmax(), a.shape) in [(15, 10), (5, 10)]
    a, _ = apply_augment(np.ones((10, 10), np.float32), np.ones((10, 10)), AugmentParams(shift_x=4.0))
    assert np.all(a[:, :3] == 0)


def test_augment_preserves_convex_component():
    rng = np.random.default_rng(2)
    msk = _disk(48, 10, 24, 24)
    img = msk[..., None]
    cfg = AugmentConfig()
    for s in range(30):
        _, b = apply_augment(img, msk, sample_augment(cfg, msk.shape, rng))
        # digital convex sets are 8-connected; nearest sampling can leave a diagonal-only tip
        n = ndimage.label(b, structure=np.ones((3, 3)))[1]
        assert n == 1


def test_augment_seeded():
    msk = _disk()
    a1, b1 = augment(msk, msk, seed=3)
    a2, b2 = augment(msk, msk, seed=3)
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def _toy_pairs(n=4, size=16):
    rng = np.random.default_rng(0)
    imgs, masks = [], []
    for i in range(n):
        m = _disk(size, rng.integers(3, 6), rng.integers(5, 11), rng.integers(5, 11))
        imgs.append((m + 0.1 * rng.standard_normal(m.shape)).astype(np.float32))
        masks.append(m)
    return imgs, masks


def test_training_deterministic_and_improves():
    imgs, masks = _toy_pairs()
    cfg = UNetConfig(depth=2, base_channels=4, in_channels=1)
    tc = TrainConfig(epochs=15, batch_size=8, lr=1e-2)
    r1 = train_unet(imgs, masks, cfg, tc, seed=5)
    r2 = train_unet(imgs, masks, cfg, tc, seed=5)
    assert r1.losses == r2.losses
    assert r1.losses[-1] < r1.losses[0]
    for p, q in zip(r1.model.parameters(), r2.model.parameters()):
        assert np.array_equal(p.data, q.data)


def test_training_with_augmentation_runs():
    imgs, masks = _toy_pairs()
    cfg = UNetConfig(depth=2, base_channels=2, in_channels=1)
    r = train_unet(imgs, masks, cfg, TrainConfig(epochs=2, augment=True), AugmentConfig(multiplier=2), seed=0)
    assert len(r.losses) == 2 and all(np.isfinite(r.losses))


def test_training_input_validation():
    imgs, masks = _toy_pairs()
    with pytest.raises(ValueError):
        train_unet([], [], UNetConfig(depth=2, base_channels=2, in_channels=1))
    with pytest.raises(ValueError):
        train_unet(imgs[:1] + [np.zeros((8, 8))], masks[:1] + [np.zeros((8, 8))],
                   UNetConfig(depth=2, base_channels=2, in_channels=1))


def test_predict_and_checkpoint_round_trip(tmp_path):
    imgs, masks = _toy_pairs()
    r = train_unet(imgs, masks, UNetConfig(depth=2, base_channels=2, in_channels=1), TrainConfig(epochs=1))
    path = save_unet(tmp_path / "unet", r)
    m = load_unet(path)
    x = np.stack(imgs)
    assert np.array_equal(predict_proba(m, x), predict_proba(r.model, x))
    assert np.array_equal(predict_mask(m, x[0]), predict_proba(r.model, x[0]) > 0.5)
    assert predict_mask(m, x[0]).dtype == bool
    with pytest.raises(FileNotFoundError, match="nope"):
        load_unet(tmp_path / "nope.json")


def test_table1_layout():
    r = [VariantResult("T2+PD with pp", {"a": 0.9}, {"mild": 0.97, "moderate": 0.93, "severe": 0.96}, 0.953, 0.955),
         VariantResult("PD w/o pp", {"a": 0.9}, {"mild": 0.9, "moderate": 0.8}, 0.85, 0.86)]
    text = format_table1(r)
    lines = text.splitlines()
    assert "| Input" in lines[1] and "Mild" in lines[1] and "Combined (pooled)" in lines[1]
    assert "0.970" in lines[3] and "-" in lines[4]
    csv = table1_csv(r).splitlines()
    assert csv[0] == "input,mild,moderate,severe,combined_case_mean,combined_pooled"
    assert csv[2].split(",")[3] == ""


def test_harness_runs_all_variants_in_order():
    from myoquant.phantom import PhantomSpec, generate_phantom
    from myoquant.preprocess import PreprocessConfig

    def case(seed, sev):
        ph = generate_phantom(PhantomSpec(size=48, seed=seed, imat_fraction=0.2))
        return Case(f"c{seed}", ph.t2, ph.pd, ph.region, sev)

    res = run_input_variant_harness([case(1, "mild")], [case(2, "mild"), case(3, "severe")],
                                    UNetConfig(depth=2, base_channels=2), TrainConfig(epochs=1, batch_size=1),
                                    None, PreprocessConfig(target_size=(32, 32)), seed=0)
    assert [r.label for r in res] == ["T2+PD with pp", "T2+PD w/o pp", "T2 with pp", "T2 w/o pp",
                                      "PD with pp", "PD w/o pp"]
    assert len(res) == len(VARIANTS)
    for r in res:
        assert set(r.per_case) == {"c2", "c3"} and set(r.by_severity) == {"mild", "severe"}
        assert 0.0 <= r.combined_pooled <= 1.0 and r.model is not None
