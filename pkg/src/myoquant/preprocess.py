"""Preprocessing of T2/PD maps before segmentation.

Leg/background separation with a Canny edge map, cropping around the legs and
resizing, multiplicative bias-field correction, upper-percentile clipping and
z-score normalization.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from skimage.feature import canny
from skimage.transform import resize


class PreprocessError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    canny_low: float = 0.1
    canny_high: float = 0.3
    canny_sigma: float = 1.4
    target_size: tuple[int, int] = (128, 128)
    clip_percentile: float = 0.98
    clip_pd: bool = False
    bias_correction: bool = True
    bias_correct_t2: bool = False
    bias_iterations: int = 50
    bias_smoothing: float = 0.25      # Gaussian width as a fraction of the image extent
    crop_margin: int = 2

    def __post_init__(self):
        self.target_size = tuple(int(v) for v in self.target_size)
        if not 0 < self.canny_low < self.canny_high < 1:
            raise ValueError(f"need 0 < canny_low < canny_high < 1, got {self.canny_low}, {self.canny_high}")
        if not 0.5 < self.clip_percentile <= 1:
            raise ValueError(f"clip percentile must lie in (0.5, 1], got {self.clip_percentile}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_size"] = list(self.target_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# -- leg mask -----------------------------------------------------------------

def detect_outer_edge(image: np.ndarray, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Foreground (leg) mask from the outer Canny edge.

    Hysteresis thresholds are fractions of the maximum smoothed-gradient
    magnitude. Edges are closed, holes filled, and every filled component at
    least a fifth the size of the largest is kept, so both legs survive.
    """
    cfg = cfg or PreprocessConfig()
    img = np.asarray(image, dtype=np.float64)
    if np.ptp(img) == 0:
        raise PreprocessError("constant image has no edges; nothing to separate from background")
    img = (img - img.min()) / np.ptp(img)
    smoothed = ndimage.gaussian_filter(img, cfg.canny_sigma, mode="constant")
    mag = np.hypot(ndimage.sobel(smoothed, 0), ndimage.sobel(smoothed, 1))
    top = mag.max()
    edges = canny(img, sigma=cfg.canny_sigma, low_threshold=cfg.canny_low * top,
                  high_threshold=cfg.canny_high * top)
    closed = ndimage.binary_closing(edges, structure=np.ones((3, 3)), iterations=2)
    filled = ndimage.binary_fill_holes(closed)
    labels, n = ndimage.label(filled)
    if n == 0:
        raise PreprocessError("no closed contour found; try lowering the Canny thresholds")
    sizes = ndimage.sum_labels(filled, labels, index=np.arange(1, n + 1))
    # a fill that adds nothing beyond the edge pixels is not a closed contour
    interior = filled & ~closed
    if not interior.any():
        raise PreprocessError("no closed contour found; try lowering the Canny thresholds")
    keep = np.flatnonzero(sizes >= 0.2 * sizes.max()) + 1
    return np.isin(labels, keep)


# -- crop / resize ------------------------------------------------------------

@dataclass(frozen=True)
class CropTransform:
    """Bounding box (inclusive start, exclusive stop) and sizes for mapping back."""

    y0: int
    y1: int
    x0: int
    x1: int
    source_shape: tuple[int, int]
    target_shape: tuple[int, int]

    def to_dict(self) -> dict:
        return {"y0": int(self.y0), "y1": int(self.y1), "x0": int(self.x0), "x1": int(self.x1),
                "source_shape": [int(v) for v in self.source_shape],
                "target_shape": [int(v) for v in self.target_shape]}

    @classmethod
    def from_dict(cls, d: dict) -> "CropTransform":
        return cls(d["y0"], d["y1"], d["x0"], d["x1"], tuple(d["source_shape"]), tuple(d["target_shape"]))

    def apply(self, image: np.ndarray, order: int = 1) -> np.ndarray:
        crop = np.asarray(image)[self.y0:self.y1, self.x0:self.x1]
        out = resize(crop.astype(np.float64), self.target_shape, order=order, mode="edge",
                     anti_aliasing=False, preserve_range=True)
        return out.astype(np.float32)

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        return self.apply(np.asarray(mask, dtype=np.float64), order=1) > 0.5

    def map_back(self, mask: np.ndarray) -> np.ndarray:
        """Resample a target-space mask onto the source grid."""
        size = (self.y1 - self.y0, self.x1 - self.x0)
        small = resize(np.asarray(mask, dtype=np.float64), size, order=1, mode="edge",
                       anti_aliasing=False, preserve_range=True) > 0.5
        out = np.zeros(self.source_shape, dtype=bool)
        out[self.y0:self.y1, self.x0:self.x1] = small
        return out


def crop_transform(mask: np.ndarray, target=(128, 128), margin: int = 2) -> CropTransform:
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise PreprocessError("cannot crop around an empty mask")
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    return CropTransform(max(ys.min() - margin, 0), min(ys.max() + margin + 1, h),
                         max(xs.min() - margin, 0), min(xs.max() + margin + 1, w),
                         (h, w), tuple(int(v) for v in target))


def crop_and_resize(image: np.ndarray, mask: np.ndarray, target=(128, 128), margin: int = 2):
    """Crop to the mask's bounding box (plus margin) and bilinearly resize.

    Returns the resized image and the transform needed to map results back.
    """
    tf = crop_transform(mask, target, margin)
    return tf.apply(image), tf


# -- bias field ---------------------------------------------------------------

def _masked_smooth(values: np.ndarray, mask: np.ndarray, sigma: float) -> np.ndarray:
    w = ndimage.gaussian_filter(mask.astype(np.float64), sigma, mode="constant")
    s = ndimage.gaussian_filter(np.where(mask, values, 0.0), sigma, mode="constant")
    return np.where(w > 1e-8, s / np.maximum(w, 1e-8), 0.0)


def _sharpened_expectation(logv: np.ndarray, bins: int = 200, fwhm: float = 0.15, wiener: float = 0.01):
    """Map each log intensity to E[true | observed] under a Gaussian blur model.

    The intensity histogram is deconvolved with a Gaussian of the given FWHM
    (Wiener filter), then the conditional mean is computed by re-blurring.
    """
    lo, hi = logv.min(), logv.max()
    if hi - lo < 1e-12:
        return logv.copy()
    hist, edges = np.histogram(logv, bins=bins, range=(lo, hi))
    centres = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    # centre the histogram in a zero-padded buffer so deconvolution side lobes
    # of the end bins do not wrap around
    n = 2 ** int(np.ceil(np.log2(4 * bins)))
    off = (n - bins) // 2
    h = np.zeros(n)
    h[off:off + bins] = hist
    sigma_bins = fwhm / (2 * np.sqrt(2 * np.log(2))) / width
    k = np.arange(n)
    k = np.minimum(k, n - k)
    g = np.exp(-0.5 * (k / max(sigma_bins, 1e-6)) ** 2)
    g /= g.sum()
    G = np.fft.rfft(g)
    F = np.fft.irfft(np.fft.rfft(h) * np.conj(G) / (np.abs(G) ** 2 + wiener), n)
    F = np.clip(F, 0, None)
    u = centres[0] + (np.arange(n) - off) * width
    num = np.fft.irfft(np.fft.rfft(F * u) * G, n)[off:off + bins]
    den = np.fft.irfft(np.fft.rfft(F) * G, n)[off:off + bins]
    expect = np.where(den > 1e-12, num / np.maximum(den, 1e-12), centres)
    return np.interp(logv, centres, expect)


def correct_bias_field(image: np.ndarray, mask: np.ndarray | None = None, cfg: PreprocessConfig | None = None):
    """Iterative histogram-sharpening estimate of a smooth multiplicative field.

    Each iteration sharpens the histogram of the current log-corrected image,
    smooths the residual (log image minus its sharpened expectation) with a
    wide mask-normalized Gaussian, and adds it to the cumulative log field.
    The returned bias has mean 1 over the mask and ``corrected = image / bias``.
    """
    cfg = cfg or PreprocessConfig()
    img = np.asarray(image, dtype=np.float64)
    mask = img > 0 if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise PreprocessError("bias correction needs a non-empty foreground")
    if np.any(img[mask] <= 0):
        raise PreprocessError("bias correction needs strictly positive foreground intensities")
    sigma = cfg.bias_smoothing * max(img.shape)
    logi = np.where(mask, np.log(np.where(mask, img, 1.0)), 0.0)
    logb = np.zeros_like(logi)
    for _ in range(cfg.bias_iterations):
        v = logi[mask] - logb[mask]
        residual = np.zeros_like(logi)
        residual[mask] = v - _sharpened_expectation(v)
        update = _masked_smooth(residual, mask, sigma)
        update -= update[mask].mean()
        logb += update
        if np.abs(update[mask]).max() < 1e-5:
            break
    # extend the smooth field outside the mask so the full image can be divided
    logb = np.where(mask, logb, _masked_smooth(logb, mask, sigma))
    bias = np.exp(logb)
    bias /= bias[mask].mean()
    corrected = np.where(mask, img / bias, img)
    return corrected.astype(np.float32), bias.astype(np.float32)


# -- intensity ----------------------------------------------------------------

def clip_percentile(image: np.ndarray, p: float = 0.98, mask: np.ndarray | None = None) -> np.ndarray:
    """Clip values above the p-quantile of foreground intensities.

    The quantile uses linear interpolation between order statistics.
    """
    if not 0.5 < p <= 1:
        raise ValueError(f"clip percentile must lie in (0.5, 1], got {p}")
    img = np.asarray(image)
    vals = img[mask] if mask is not None else img.reshape(-1)
    if vals.size == 0:
        return img.copy()
    q = np.quantile(vals.astype(np.float64), p)
    out = img.copy()
    sel = out > q if mask is None else (out > q) & np.asarray(mask, bool)
    out[sel] = q
    return out


def zscore_normalize(image: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """(x - mean) / std over the foreground; background set to 0."""
    img = np.asarray(image, dtype=np.float64)
    mask = np.ones(img.shape, bool) if mask is None else np.asarray(mask, bool)
    vals = img[mask]
    if vals.size == 0:
        raise PreprocessError("zscore normalization needs a non-empty foreground")
    mu, sd = vals.mean(), vals.std()
    if not sd > 0:
        raise PreprocessError("zero-variance image cannot be normalized")
    return np.where(mask, (img - mu) / sd, 0.0).astype(np.float32)


# -- chain --------------------------------------------------------------------

@dataclass
class Preprocessed:
    t2: np.ndarray
    pd: np.ndarray
    mask: np.ndarray
    transform: CropTransform
    bias: np.ndarray | None


def preprocess_maps(t2: np.ndarray, pd: np.ndarray, cfg: PreprocessConfig | None = None,
                    raw: bool = False) -> Preprocessed:
    """Full chain on a T2/PD pair: leg mask from PD, crop/resize both, then
    (unless ``raw``) bias-correct PD, clip T2, and z-score both."""
    cfg = cfg or PreprocessConfig()
    mask = detect_outer_edge(pd, cfg)
    tf = crop_transform(mask, cfg.target_size, cfg.crop_margin)
    t2c, pdc, mc = tf.apply(t2), tf.apply(pd), tf.apply_mask(mask)
    bias = None
    if not raw:
        if cfg.bias_correction:
            fg = mc & (pdc > 0)
            pdc, bias = correct_bias_field(pdc, fg, cfg)
            if cfg.bias_correct_t2:
                fg2 = mc & (t2c > 0)
                t2c, _ = correct_bias_field(t2c, fg2, cfg)
        t2c = clip_percentile(t2c, cfg.clip_percentile, mc)
        if cfg.clip_pd:
            pdc = clip_percentile(pdc, cfg.clip_percentile, mc)
    t2n = zscore_normalize(t2c, mc)
    pdn = zscore_normalize(pdc, mc)
    return Preprocessed(t2n, pdn, mc, tf, bias)


def preprocess_image(image: np.ndarray, kind: str, cfg: PreprocessConfig | None = None,
                     reference: np.ndarray | None = None, clip: bool | None = None):
    """Single-map version of the chain. The leg mask comes from ``reference``
    (default: the image itself); PD maps are bias-corrected, T2 maps clipped.
    Returns (normalized image, leg mask, crop transform)."""
    cfg = cfg or PreprocessConfig()
    image = np.asarray(image, dtype=np.float64)
    mask = detect_outer_edge(image if reference is None else reference, cfg)
    tf = crop_transform(mask, cfg.target_size, cfg.crop_margin)
    img, mc = tf.apply(image), tf.apply_mask(mask)
    if cfg.bias_correction and (kind == "pd" or cfg.bias_correct_t2):
        img, _ = correct_bias_field(img, mc & (img > 0), cfg)
    if clip if clip is not None else (kind == "t2" or cfg.clip_pd):
        img = clip_percentile(img, cfg.clip_percentile, mc)
    return zscore_normalize(img, mc), mc, tf
