"""Synthetic thigh/calf phantoms with known anatomy and tissue parameters.

Each leg is a set of nested regions: skin-side subcutaneous fat (SAT), a wobbly
fascia boundary, muscle with dispersed fat-infiltration blobs (IMAT), and an
off-centre bone with a fatty marrow core. The muscle region (muscle + IMAT)
is the segmentation ground truth; IMAT inside it is the fat label.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .emc import DEFAULT_T1, SequenceParams, _epg_cpmg, add_rician_noise

BACKGROUND, SAT, MUSCLE, IMAT, BONE, MARROW = range(6)
TISSUE_NAMES = ("background", "sat", "muscle", "imat", "bone", "marrow")


def default_tissues() -> dict[str, dict[str, float]]:
    return {
        "muscle": {"t2": 35.0, "pd": 0.7},
        "fat": {"t2": 150.0, "pd": 1.0},
        "bone": {"t2": 5.0, "pd": 0.15},
    }


@dataclass
class PhantomSpec:
    size: int = 128
    legs: int = 1
    leg_radius: float = 0.36          # fraction of the half-width available per leg
    sat_thickness: float = 6.0        # pixels
    bone_radius: float = 7.0          # pixels
    cortex_thickness: float = 2.5     # pixels
    imat_fraction: float = 0.2
    imat_blobs: int = 14
    imat_blob_size: float = 5.0       # mean ellipse semi-axis, pixels
    partial_volume: float = 0.1       # width (pixels) of the fat-fraction ramp at blob edges
    tissues: dict = field(default_factory=default_tissues)
    bias_amplitude: float = 0.0
    b1_amplitude: float = 0.0
    snr: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.legs not in (1, 2):
            raise ValueError(f"legs must be 1 or 2, got {self.legs}")
        if not 0 <= self.imat_fraction <= 1:
            raise ValueError(f"imat_fraction must lie in [0, 1], got {self.imat_fraction}")
        if self.size < 16:
            raise ValueError(f"image size {self.size} too small")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class Phantom:
    spec: PhantomSpec
    tissue: np.ndarray        # int label map (see module constants)
    region: np.ndarray        # muscle-region GT mask (muscle + IMAT)
    fat_label: np.ndarray     # 1 where IMAT inside the region
    ff: np.ndarray            # voxel fat fraction
    t2: np.ndarray            # truth T2 (dominant compartment), ms
    pd: np.ndarray            # truth PD, a.u.
    b1: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return self.tissue != BACKGROUND

    @property
    def imat_fraction(self) -> float:
        return float(self.fat_label[self.region].mean()) if self.region.any() else 0.0


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / (np.abs(f).max() + 1e-12)


def _leg_geometry(spec: PhantomSpec, rng: np.random.Generator):
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    tissue = np.zeros((n, n), dtype=np.int32)
    if spec.legs == 1:
        centres = [(n / 2, n / 2)]
        half = n / 2
    else:
        centres = [(n / 2, n / 4 + 1), (n / 2, 3 * n / 4 - 1)]
        half = n / 4
    for cy, cx in centres:
        cy += rng.uniform(-0.04, 0.04) * n
        cx += rng.uniform(-0.02, 0.02) * n
        r_out = spec.leg_radius * 2 * half * rng.uniform(0.92, 1.05)
        aspect = rng.uniform(0.85, 1.0)
        dy, dx = (yy - cy) / aspect, xx - cx
        rr = np.hypot(dy, dx)
        theta = np.arctan2(dy, dx)
        # low-order angular wobble makes the boundaries non-circular
        wobble = np.zeros_like(theta)
        for k in (2, 3, 4, 5):
            wobble += rng.normal(0, 0.03 / k) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
        leg = rr <= r_out * (1 + wobble)
        sat_t = spec.sat_thickness * rng.uniform(0.8, 1.25)
        fascia_w = np.zeros_like(theta)
        for k in (3, 5, 7):
            fascia_w += rng.normal(0, 0.35) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
        inner = rr <= r_out * (1 + wobble) - sat_t * (1 + 0.4 * fascia_w)
        tissue[leg] = SAT
        tissue[inner] = MUSCLE
        # bone sits off-centre inside the muscle
        ang = rng.uniform(0, 2 * np.pi)
        off = rng.uniform(0.05, 0.25) * r_out
        by, bx = cy + off * np.sin(ang) * aspect, cx + off * np.cos(ang)
        rb = np.hypot(yy - by, xx - bx)
        bone_r = spec.bone_radius * rng.uniform(0.9, 1.1)
        tissue[inner & (rb <= bone_r)] = BONE
        tissue[inner & (rb <= bone_r - spec.cortex_thickness)] = MARROW
    return tissue


def _imat_field(spec: PhantomSpec, region: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth random field over the region whose upper tail becomes IMAT."""
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    field_ = np.zeros((n, n))
    pts = np.argwhere(region)
    for _ in range(spec.imat_blobs):
        cy, cx = pts[rng.integers(len(pts))]
        a = spec.imat_blob_size * rng.uniform(0.5, 1.6)
        b = a * rng.uniform(0.3, 1.0)
        phi = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        field_ += np.exp(-0.5 * ((u / a) ** 2 + (v / b) ** 2))
    field_ = ndimage.gaussian_filter(field_, 1.0)
    # small-scale texture keeps the infiltration dispersed rather than blobby
    field_ += 0.25 * field_.max() * _smooth_noise(rng, (n, n), 1.5) if field_.max() > 0 else 0
    field_ += 1e-9 * rng.standard_normal((n, n))
    return field_


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Draw anatomy, IMAT and truth maps for ``spec`` (pure function of its seed)."""
    rng = np.random.default_rng(spec.seed)
    geo_rng, imat_rng, b1_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(3))
    tissue = _leg_geometry(spec, geo_rng)
    region = tissue == MUSCLE
    if not region.any():
        raise ValueError("phantom geometry left no muscle region; reduce sat_thickness or bone_radius")

    ff = np.zeros(tissue.shape)
    ff[(tissue == SAT) | (tissue == MARROW)] = 1.0
    if spec.imat_fraction > 0:
        field_ = _imat_field(spec, region, imat_rng)
        vals = field_[region]
        thr = np.quantile(vals, 1 - spec.imat_fraction) if spec.imat_fraction < 1 else -np.inf
        # convert the field excess into pixels via the local gradient scale
        grad = np.hypot(*np.gradient(field_))
        scale = np.median(grad[region]) * max(spec.partial_volume, 1e-6)
        ramp = np.clip(0.5 + (field_ - thr) / scale, 0.0, 1.0)
        ramp[field_ > thr] = np.maximum(ramp[field_ > thr], 0.5 + 1e-6)
        ramp[field_ <= thr] = np.minimum(ramp[field_ <= thr], 0.5)
        ff[region] = ramp[region]
    fat_label = np.zeros(tissue.shape, dtype=np.int32)
    fat_label[region & (ff > 0.5)] = 1
    tissue[region & (ff > 0.5)] = IMAT
    region_mask = (tissue == MUSCLE) | (tissue == IMAT)

    tis = spec.tissues
    t2 = np.zeros(tissue.shape)
    pd = np.zeros(tissue.shape)
    t2[(tissue == SAT) | (tissue == MARROW) | (tissue == IMAT)] = tis["fat"]["t2"]
    t2[tissue == MUSCLE] = tis["muscle"]["t2"]
    t2[tissue == BONE] = tis["bone"]["t2"]
    pd[tissue == BONE] = tis["bone"]["pd"]
    soft = (tissue != BACKGROUND) & (tissue != BONE)
    pd[soft] = ff[soft] * tis["fat"]["pd"] + (1 - ff[soft]) * tis["muscle"]["pd"]

    b1 = np.ones(tissue.shape)
    if spec.b1_amplitude:
        b1 = 1 + spec.b1_amplitude * _smooth_noise(b1_rng, tissue.shape, spec.size / 4)
    return Phantom(spec, tissue, region_mask, fat_label, ff.astype(np.float32), t2.astype(np.float32),
                   pd.astype(np.float32), b1.astype(np.float32))


def smooth_bias_field(shape, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative field in [1 - amplitude, 1 + amplitude] built from one
    broad Gaussian bump and a linear ramp with random orientation."""
    if amplitude == 0:
        return np.ones(shape, dtype=np.float32)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    bump = np.exp(-0.5 * (((yy - cy) / (0.45 * h)) ** 2 + ((xx - cx) / (0.45 * w)) ** 2))
    ang = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(ang) * (xx / w - 0.5) + np.sin(ang) * (yy / h - 0.5))
    f = bump + ramp
    f = (f - f.min()) / (f.max() - f.min()) * 2 - 1
    return (1 + amplitude * f).astype(np.float32)


@dataclass
class Acquisition:
    echoes: np.ndarray        # (H, W, n_echo)
    bias: np.ndarray
    noise_sigma: float


def simulate_acquisition(phantom: Phantom, seq: SequenceParams | None = None, bias_amplitude: float | None = None,
                         snr: float | None = None, seed: int | None = None, t1: float = DEFAULT_T1) -> Acquisition:
    """Forward-simulate the multi-echo magnitude images of a phantom.

    Each voxel's train is PD * (FF * fat curve + (1 - FF) * water curve) at the
    voxel's B1, times a smooth bias field, plus Rician noise whose std is the
    mean first-echo foreground intensity divided by ``snr``.
    """
    spec = phantom.spec
    seq = seq or SequenceParams()
    bias_amplitude = spec.bias_amplitude if bias_amplitude is None else bias_amplitude
    snr = spec.snr if snr is None else snr
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 7])

    fg = phantom.foreground
    tis = spec.tissues
    water_t2 = np.where(phantom.tissue == BONE, tis["bone"]["t2"], tis["muscle"]["t2"])
    b1 = np.clip(phantom.b1, 0.05, 2.0)
    idx = np.flatnonzero(fg)
    fat = _epg_cpmg(seq, tis["fat"]["t2"], max(t1, tis["fat"]["t2"]), b1.reshape(-1)[idx])
    water = _epg_cpmg(seq, water_t2.reshape(-1)[idx], t1, b1.reshape(-1)[idx])
    ff = phantom.ff.reshape(-1)[idx, None].astype(np.float64)
    sig = phantom.pd.reshape(-1)[idx, None] * (ff * fat + (1 - ff) * water)

    echoes = np.zeros((fg.size, seq.n_echo))
    echoes[idx] = sig
    echoes = echoes.reshape(*fg.shape, seq.n_echo)
    bias = smooth_bias_field(fg.shape, bias_amplitude, rng)
    echoes = echoes * bias[..., None]
    sigma = 0.0
    if snr is not None and np.isfinite(snr):
        sigma = float(echoes[..., 0][fg].mean() / snr)
        echoes = add_rician_noise(echoes, sigma, rng)
    return Acquisition(echoes.astype(np.float32), bias, sigma)


def texture_phantom(size: int = 64, seed: int = 0, imat_fraction: float = 0.4, overlap: float = 0.8):
    """T2/PD maps whose per-pixel values overlap between tissues while the
    local texture differs.

    Muscle is fine-grained (pixel-scale) noise; IMAT is coarse-grained noise
    with a slightly higher mean. ``overlap`` (0..1) controls how close the two
    means are. Returns (t2, pd, region, fat_label).
    """
    rng = np.random.default_rng(seed)
    spec = PhantomSpec(size=size, imat_fraction=imat_fraction, imat_blobs=max(4, size // 8),
                       imat_blob_size=size / 10, partial_volume=0.0, seed=seed, sat_thickness=size / 20,
                       bone_radius=size / 18, cortex_thickness=size / 50)
    ph = generate_phantom(spec)
    region, label = ph.region, ph.fat_label.astype(bool)
    fine = rng.standard_normal((size, size))
    coarse = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.5)
    coarse /= coarse.std()
    shift = (1 - overlap) * 2.0
    z = np.where(label, coarse + shift, fine)
    t2 = np.where(region, 45.0 + 12.0 * z, 0.0)
    fine_pd = rng.standard_normal((size, size))
    coarse_pd = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.5)
    coarse_pd /= coarse_pd.std()
    pd = np.where(region, 0.8 + 0.1 * np.where(label, coarse_pd + shift, fine_pd), 0.0)
    return t2.astype(np.float32), pd.astype(np.float32), region, label.astype(np.int32)
