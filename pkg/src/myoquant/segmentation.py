"""U-Net muscle-region segmentation: model, augmentation, training, inference
and the input-variant comparison harness."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import checkpoint
from .engine import AdamState, Conv2D, ConvTranspose2D, Layer, NumericalError, Tape, Tensor, adam_step, ops
from .metrics import dice
from .preprocess import PreprocessConfig, preprocess_maps

log = logging.getLogger(__name__)


# -- model --------------------------------------------------------------------

@dataclass
class UNetConfig:
    depth: int = 5
    base_channels: int = 16
    in_channels: int = 2
    padding: str = "same"
    activation: str = "sigmoid"      # or "softmax" (two-class output, foreground channel returned)

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"U-Net depth must be >= 2, got {self.depth}")
        if self.in_channels not in (1, 2):
            raise ValueError(f"in_channels must be 1 or 2, got {self.in_channels}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.activation not in ("sigmoid", "softmax"):
            raise ValueError(f"activation must be 'sigmoid' or 'softmax', got {self.activation!r}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def out_channels(self) -> int:
        return 1 if self.activation == "sigmoid" else 2


class _DoubleConv(Layer):
    def __init__(self, cin, cout, rng, padding):
        self.c1 = Conv2D(cin, cout, 3, rng, padding)
        self.c2 = Conv2D(cout, cout, 3, rng, padding)

    def __call__(self, x):
        return ops.relu(self.c2(ops.relu(self.c1(x))))


class _Up(Layer):
    def __init__(self, cin, cout, rng, padding):
        self.up = ConvTranspose2D(cin, cout, 2, rng)
        self.conv = _DoubleConv(2 * cout, cout, rng, padding)


class UNet(Layer):
    """Encoder of ``depth`` levels (two 3x3 conv + ReLU each, 2x2 max pool
    between levels), mirrored decoder with 2x2 stride-2 transposed convs and
    skip concatenation, and a final 1x1 conv."""

    def __init__(self, cfg: UNetConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.down = []
        cin = cfg.in_channels
        for level in range(cfg.depth):
            self.down.append(_DoubleConv(cin, cfg.channels(level), rng, cfg.padding))
            cin = cfg.channels(level)
        self.up = [_Up(cfg.channels(level + 1), cfg.channels(level), rng, cfg.padding)
                   for level in reversed(range(cfg.depth - 1))]
        self.head = Conv2D(cfg.channels(0), cfg.out_channels, 1, rng, "valid")

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        """Spatial output size for an ``h`` x ``w`` input; raises if the input
        does not survive the pooling ladder."""
        sizes = []
        shrink = 0 if self.cfg.padding == "same" else 4
        for level in range(self.cfg.depth):
            h, w = h - shrink, w - shrink
            if h < 1 or w < 1:
                raise ValueError(f"input too small for a depth-{self.cfg.depth} U-Net")
            sizes.append((h, w))
            if level < self.cfg.depth - 1:
                if h % 2 or w % 2:
                    raise ValueError(f"spatial dims {sizes[0][0] + shrink}x{sizes[0][1] + shrink} do not survive "
                                     f"{self.cfg.depth - 1} poolings (odd size {h}x{w} at level {level})")
                h, w = h // 2, w // 2
        for _ in range(self.cfg.depth - 1):
            h, w = 2 * h - shrink, 2 * w - shrink
        return h, w

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        self.output_shape(x.shape[1], x.shape[2])
        skips = []
        for level, block in enumerate(self.down):
            x = block(x)
            if level < self.cfg.depth - 1:
                skips.append(x)
                x = ops.maxpool2(x)
        for up, skip in zip(self.up, reversed(skips)):
            x = up.up(x)
            if skip.shape[1:3] != x.shape[1:3]:
                top = (skip.shape[1] - x.shape[1]) // 2
                left = (skip.shape[2] - x.shape[2]) // 2
                skip = ops.crop2d(skip, top, left, x.shape[1], x.shape[2])
            x = up.conv(ops.concat(skip, x))
        logits = self.head(x)
        if self.cfg.activation == "sigmoid":
            return ops.sigmoid(logits)
        return ops.take_channel(ops.softmax(logits), 1)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def build_unet(cfg: UNetConfig | None = None, seed: int = 0) -> UNet:
    return UNet(cfg or UNetConfig(), seed)


def unet_parameter_count(cfg: UNetConfig) -> int:
    """Closed-form parameter count of the layer list built by :class:`UNet`."""
    def conv(k, cin, cout):
        return k * k * cin * cout + cout

    total, cin = 0, cfg.in_channels
    for level in range(cfg.depth):
        c = cfg.channels(level)
        total += conv(3, cin, c) + conv(3, c, c)
        cin = c
    for level in range(cfg.depth - 1):
        c, c_up = cfg.channels(level), cfg.channels(level + 1)
        total += conv(2, c_up, c) + conv(3, 2 * c, c) + conv(3, c, c)
    return total + conv(1, cfg.channels(0), cfg.out_channels)


# -- augmentation -------------------------------------------------------------

@dataclass
class AugmentConfig:
    shift: float = 0.2                      # fraction of height / width
    zoom: tuple[float, float] = (0.9, 1.3)
    rotation: float = 30.0                  # degrees, sampled in [-rotation, rotation]
    hflip: bool = True
    vflip: bool = True
    multiplier: int = 10

    def __post_init__(self):
        self.zoom = tuple(float(z) for z in self.zoom)
        if not self.zoom[0] <= 1.0 <= self.zoom[1]:
            raise ValueError(f"zoom range {self.zoom} must contain 1")
        if self.multiplier < 1:
            raise ValueError(f"augmentation multiplier must be >= 1, got {self.multiplier}")


@dataclass(frozen=True)
class AugmentParams:
    shift_y: float = 0.0     # pixels
    shift_x: float = 0.0
    zoom: float = 1.0
    angle: float = 0.0       # degrees
    hflip: bool = False
    vflip: bool = False


def sample_augment(cfg: AugmentConfig, shape, rng: np.random.Generator) -> AugmentParams:
    h, w = shape[:2]
    return AugmentParams(
        shift_y=float(rng.uniform(-cfg.shift, cfg.shift) * h),
        shift_x=float(rng.uniform(-cfg.shift, cfg.shift) * w),
        zoom=float(rng.uniform(*cfg.zoom)),
        angle=float(rng.uniform(-cfg.rotation, cfg.rotation)),
        hflip=bool(cfg.hflip and rng.random() < 0.5),
        vflip=bool(cfg.vflip and rng.random() < 0.5),
    )


def _warp(channel: np.ndarray, p: AugmentParams, order: int) -> np.ndarray:
    h, w = channel.shape
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    t = np.deg2rad(p.angle)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    # content maps i -> c + zoom * R (i - c) + shift; sample the inverse
    m = rot.T / p.zoom
    offset = c - m @ (c + np.array([p.shift_y, p.shift_x]))
    return ndimage.affine_transform(channel, m, offset, output_shape=(h, w), order=order, mode="constant",
                                    cval=0.0)


def apply_augment(image: np.ndarray, mask: np.ndarray, p: AugmentParams):
    """Apply one geometric transform to an (H, W, C) image and (H, W) mask.

    Image: bilinear; mask: nearest neighbour; outside samples are 0.
    """
    image = np.asarray(image, dtype=np.float32)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in geometry")
    identity = p.zoom == 1.0 and p.angle == 0.0 and p.shift_x == 0.0 and p.shift_y == 0.0
    if identity:
        img, msk = image.copy(), mask.copy()
    else:
        img = np.stack([_warp(image[..., k].astype(np.float64), p, 1) for k in range(image.shape[-1])], axis=-1)
        msk = _warp(mask.astype(np.float64), p, 0) > 0.5
        img = img.astype(np.float32)
        msk = msk.astype(mask.dtype)
    if p.hflip:
        img, msk = img[:, ::-1], msk[:, ::-1]
    if p.vflip:
        img, msk = img[::-1], msk[::-1]
    img, msk = np.ascontiguousarray(img), np.ascontiguousarray(msk)
    return (img[..., 0] if squeeze else img), msk


def augment(image, mask, cfg: AugmentConfig | None = None, seed: int = 0):
    cfg = cfg or AugmentConfig()
    p = sample_augment(cfg, np.shape(mask), np.random.default_rng(seed))
    return apply_augment(image, mask, p)


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    augment: bool = False
    offline_augment: bool = False   # draw the x multiplier copies once instead of every epoch

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class TrainResult:
    model: UNet
    losses: list[float]
    unet_config: UNetConfig
    train_config: TrainConfig
    seed: int


def _augmented_pool(images, masks, aug: AugmentConfig, rng: np.random.Generator):
    xs, ys = [], []
    for _ in range(aug.multiplier):
        for img, msk in zip(images, masks):
            a, b = apply_augment(img, msk, sample_augment(aug, msk.shape, rng))
            xs.append(a)
            ys.append(b)
    return xs, ys


def train_unet(images, masks, unet_cfg: UNetConfig | None = None, train_cfg: TrainConfig | None = None,
               aug_cfg: AugmentConfig | None = None, seed: int = 0, progress=None) -> TrainResult:
    """Soft-Dice training with Adam. Deterministic given ``seed``.

    ``images`` are (H, W, C) arrays (or (H, W) for one channel), ``masks``
    binary (H, W). When the pool is smaller than a batch it is repeated to
    fill one. Returns the mean training loss per epoch.
    """
    unet_cfg = unet_cfg or UNetConfig()
    train_cfg = train_cfg or TrainConfig()
    images = [np.asarray(im, dtype=np.float32)[..., None] if np.ndim(im) == 2 else np.asarray(im, np.float32)
              for im in images]
    masks = [np.asarray(m, dtype=np.float32) for m in masks]
    if not images:
        raise ValueError("train_unet needs at least one training pair")
    shapes = {im.shape for im in images}
    if len(shapes) != 1 or any(m.shape != images[0].shape[:2] for m in masks) or len(masks) != len(images):
        raise ValueError(f"training pairs must share one shape, got images {sorted(shapes)}")
    if images[0].shape[-1] != unet_cfg.in_channels:
        raise ValueError(f"images have {images[0].shape[-1]} channels, model expects {unet_cfg.in_channels}")
    aug_cfg = aug_cfg or AugmentConfig()

    model = build_unet(unet_cfg, seed)
    h, w = images[0].shape[:2]
    oh, ow = model.output_shape(h, w)
    top, left = (h - oh) // 2, (w - ow) // 2
    params = model.parameters()
    state = AdamState(lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, epsilon=train_cfg.epsilon)
    seeds = np.random.SeedSequence(seed).spawn(2)
    order_rng, aug_rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])

    offline = None
    if train_cfg.augment and train_cfg.offline_augment:
        offline = _augmented_pool(images, masks, aug_cfg, aug_rng)

    losses = []
    for epoch in range(train_cfg.epochs):
        if offline is not None:
            xs, ys = offline
        elif train_cfg.augment:
            xs, ys = _augmented_pool(images, masks, aug_cfg, aug_rng)
        else:
            xs, ys = images, masks
        n = len(xs)
        reps = -(-train_cfg.batch_size // n)
        idx = np.tile(np.arange(n), reps) if reps > 1 else np.arange(n)
        idx = order_rng.permutation(idx)
        batch_losses = []
        for b, start in enumerate(range(0, len(idx), train_cfg.batch_size)):
            sel = idx[start:start + train_cfg.batch_size]
            x = Tensor(np.stack([xs[i] for i in sel]))
            y = np.stack([ys[i] for i in sel])[:, top:top + oh, left:left + ow, None]
            with Tape() as tape:
                loss = ops.soft_dice_loss(model(x, training=True), y)
            value = float(loss.item())
            if not np.isfinite(value):
                raise NumericalError(f"non-finite U-Net loss at epoch {epoch}, batch {b}")
            grads = tape.gradient(loss, params)
            adam_step(params, grads, state)
            batch_losses.append(value)
        losses.append(float(np.mean(batch_losses)))
        if progress is not None:
            progress(epoch, losses[-1])
        log.debug("unet epoch %d loss %.5f", epoch, losses[-1])
    return TrainResult(model, losses, unet_cfg, train_cfg, seed)


def predict_proba(model: UNet, images, batch_size: int = 8) -> np.ndarray:
    """Foreground probability for one (H, W[, C]) image or an (N, H, W[, C]) batch."""
    x = np.asarray(images, dtype=np.float32)
    cin = model.cfg.in_channels
    single = x.ndim == 2 or (x.ndim == 3 and x.shape[-1] == cin and cin > 1) or (x.ndim == 3 and cin == 1
                                                                                 and x.shape[-1] == 1)
    if x.ndim == 2:
        x = x[..., None]
    if single:
        x = x[None]
    if x.ndim == 3:
        x = x[..., None]
    out = [model(Tensor(x[i:i + batch_size])).data[..., 0] for i in range(0, len(x), batch_size)]
    prob = np.concatenate(out, axis=0)
    return prob[0] if single else prob


def predict_mask(model: UNet, image, threshold: float = 0.5) -> np.ndarray:
    """Binary mask(s) from the sigmoid output; no connected-component filtering."""
    return predict_proba(model, image) > threshold


def save_unet(path, result_or_model, seed: int | None = None, extra: dict | None = None):
    model = getattr(result_or_model, "model", result_or_model)
    seed = getattr(result_or_model, "seed", seed)
    cfg = {"unet": asdict(model.cfg)}
    if hasattr(result_or_model, "train_config"):
        cfg["train"] = asdict(result_or_model.train_config)
    layers = [{"name": n, "shape": list(p.shape)} for n, p in model.named_parameters()]
    return checkpoint.save_checkpoint(path, model.state(), "unet", cfg, seed, {"layers": layers, **(extra or {})})


def load_unet(path) -> UNet:
    manifest, state = checkpoint.load_checkpoint(path)
    if manifest.get("kind") != "unet":
        raise ValueError(f"{path}: checkpoint kind is {manifest.get('kind')!r}, expected 'unet'")
    model = build_unet(UNetConfig(**manifest["config"]["unet"]), manifest.get("seed") or 0)
    model.load_state(state)
    return model


# -- input-variant harness ----------------------------------------------------

SEVERITIES = ("mild", "moderate", "severe")
VARIANTS = (
    ("T2+PD", True), ("T2+PD", False), ("T2", True), ("T2", False), ("PD", True), ("PD", False),
)


@dataclass
class Case:
    """One slice: fitted maps, ground-truth muscle region and a severity tag."""

    name: str
    t2: np.ndarray
    pd: np.ndarray
    region: np.ndarray
    severity: str = ""


def variant_label(inputs: str, pp: bool) -> str:
    return f"{inputs} {'with' if pp else 'w/o'} pp"


def _prepare(case: Case, inputs: str, pp: bool, cfg: PreprocessConfig):
    out = preprocess_maps(case.t2, case.pd, cfg, raw=not pp)
    chans = {"T2+PD": [out.t2, out.pd], "T2": [out.t2], "PD": [out.pd]}[inputs]
    target = out.transform.apply_mask(case.region)
    return np.stack(chans, axis=-1), target, out.transform


@dataclass
class VariantResult:
    label: str
    per_case: dict[str, float]                 # case name -> DSC
    by_severity: dict[str, float]              # case-averaged per severity
    combined_mean: float                       # mean of per-case DSC
    combined_pooled: float                     # DSC of all pixels pooled
    losses: list[float] = field(default_factory=list)
    model: UNet | None = field(default=None, repr=False, compare=False)


def run_input_variant_harness(train_cases: list[Case], test_cases: list[Case], unet_cfg: UNetConfig | None = None,
                              train_cfg: TrainConfig | None = None, aug_cfg: AugmentConfig | None = None,
                              pp_cfg: PreprocessConfig | None = None, seed: int = 0,
                              variants=VARIANTS) -> list[VariantResult]:
    """Train and score one U-Net per input variant; DSC measured on the
    original image grid after mapping predictions back."""
    unet_cfg = unet_cfg or UNetConfig()
    pp_cfg = pp_cfg or PreprocessConfig()
    results = []
    for inputs, pp in variants:
        cfg = UNetConfig(**{**asdict(unet_cfg), "in_channels": 2 if inputs == "T2+PD" else 1})
        train = [_prepare(c, inputs, pp, pp_cfg) for c in train_cases]
        res = train_unet([t[0] for t in train], [t[1] for t in train], cfg, train_cfg, aug_cfg, seed)
        per_case, inter, total = {}, 0, 0
        sev_scores: dict[str, list[float]] = {}
        for case in test_cases:
            x, _, tf = _prepare(case, inputs, pp, pp_cfg)
            pred = tf.map_back(predict_mask(res.model, x))
            gt = np.asarray(case.region, bool)
            per_case[case.name] = dice(pred, gt)
            sev_scores.setdefault(case.severity, []).append(per_case[case.name])
            inter += int((pred & gt).sum())
            total += int(pred.sum() + gt.sum())
        results.append(VariantResult(
            variant_label(inputs, pp), per_case,
            {s: float(np.mean(v)) for s, v in sev_scores.items()},
            float(np.mean(list(per_case.values()))),
            1.0 if total == 0 else 2 * inter / total,
            res.losses,
            res.model,
        ))
        log.info("variant %s: %s", results[-1].label, per_case)
    return results


def format_table1(results: list[VariantResult], severities=SEVERITIES) -> str:
    """DSC table laid out as Input | Mild | Moderate | Severe | Combined.

    Combined is reported twice: case-averaged and pixel-pooled.
    """
    head = ["Input"] + [s.capitalize() for s in severities] + ["Combined (case mean)", "Combined (pooled)"]
    rows = [head]
    for r in results:
        cells = [r.label] + [f"{r.by_severity[s]:.3f}" if s in r.by_severity else "-" for s in severities]
        rows.append(cells + [f"{r.combined_mean:.3f}", f"{r.combined_pooled:.3f}"])
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    lines = [sep]
    for i, row in enumerate(rows):
        lines.append("| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |")
        if i == 0:
            lines.append(sep)
    lines.append(sep)
    return "\n".join(lines)


def table1_csv(results: list[VariantResult], severities=SEVERITIES) -> str:
    lines = ["input," + ",".join(severities) + ",combined_case_mean,combined_pooled"]
    for r in results:
        vals = [f"{r.by_severity[s]:.6f}" if s in r.by_severity else "" for s in severities]
        lines.append(",".join([r.label] + vals + [f"{r.combined_mean:.6f}", f"{r.combined_pooled:.6f}"]))
    return "\n".join(lines) + "\n"
