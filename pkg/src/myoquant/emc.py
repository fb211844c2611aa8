"""Echo-modulation-curve simulation and dictionary-based T2 / PD / B1 fitting.

Multi-spin-echo trains are simulated with the extended phase graph (EPG)
formalism under the CPMG condition, which keeps all configuration states
real. A dictionary of unit-norm curves over a (T2, B1) grid is matched to each
voxel by normalized inner product; proton density falls out as the projection
onto the matched curve.

The two-compartment model mixes a fixed long-T2 fat curve with a water curve
searched over the dictionary's T2 grid. Mixing is done on raw (M0 = 1) echo
trains, so the fat fraction is a fraction of equilibrium magnetization.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DICT_VERSION = 1
DEFAULT_T1 = 1400.0
DEFAULT_T2_FAT = 150.0
FAT_THRESHOLD = 0.5
FF_STEP = 0.01
BACKGROUND = -1


def default_t2_grid() -> np.ndarray:
    return np.arange(10.0, 300.0 + 1e-9, 2.0)


def default_b1_grid() -> np.ndarray:
    return np.round(np.arange(0.70, 1.30 + 1e-9, 0.05), 10)


@dataclass(frozen=True)
class SequenceParams:
    """Multi-spin-echo timing (ms) and nominal flip angles (degrees)."""

    tr: float = 1479.0
    te: float = 8.7
    n_echo: int = 17
    excitation_flip: float = 90.0
    refocusing_flip: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.n_echo < 1:
            raise ValueError(f"n_echo must be >= 1, got {self.n_echo}")
        if self.te <= 0:
            raise ValueError(f"TE must be positive, got {self.te}")
        if self.tr <= self.n_echo * self.te:
            raise ValueError(f"TR ({self.tr} ms) must exceed n_echo * TE ({self.n_echo * self.te} ms)")
        if not self.refocusing_flip:
            object.__setattr__(self, "refocusing_flip", (180.0,) * self.n_echo)
        elif len(self.refocusing_flip) != self.n_echo:
            raise ValueError(f"refocusing train has {len(self.refocusing_flip)} flips for {self.n_echo} echoes")
        else:
            object.__setattr__(self, "refocusing_flip", tuple(float(f) for f in self.refocusing_flip))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["refocusing_flip"] = list(self.refocusing_flip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sequence parameters {sorted(unknown)}")
        return cls(**{**d, "refocusing_flip": tuple(d.get("refocusing_flip") or ())})


# -- EPG ----------------------------------------------------------------------

def _epg_cpmg(seq: SequenceParams, t2: np.ndarray, t1: np.ndarray, b1: np.ndarray) -> np.ndarray:
    """Vectorized CPMG EPG over broadcast parameter arrays -> (..., n_echo)."""
    t2, t1, b1 = np.broadcast_arrays(np.asarray(t2, float), np.asarray(t1, float), np.asarray(b1, float))
    shape = t2.shape
    t2, t1, b1 = t2.reshape(-1), t1.reshape(-1), b1.reshape(-1)
    p = t2.size
    nstates = 2 * seq.n_echo + 2
    fp = np.zeros((p, nstates))
    fm = np.zeros((p, nstates))
    z = np.zeros((p, nstates))
    z[:, 0] = 1.0

    # excitation about y (90 deg phase): all states real
    a = np.deg2rad(seq.excitation_flip) * b1
    fp[:, 0] = np.sin(a)
    fm[:, 0] = np.sin(a)
    z[:, 0] = np.cos(a)

    e2 = np.exp(-0.5 * seq.te / t2)[:, None]
    e1 = np.exp(-0.5 * seq.te / t1)[:, None]
    recovery = 1.0 - e1[:, 0]

    def relax_shift():
        nonlocal fp, fm, z
        fp *= e2
        fm *= e2
        z *= e1
        z[:, 0] += recovery
        new_fp = np.empty_like(fp)
        new_fp[:, 1:] = fp[:, :-1]
        new_fp[:, 0] = fm[:, 1]
        new_fm = np.empty_like(fm)
        new_fm[:, :-1] = fm[:, 1:]
        new_fm[:, -1] = 0.0
        new_fm[:, 0] = new_fp[:, 0]
        fp, fm = new_fp, new_fm

    echoes = np.empty((p, seq.n_echo))
    for k, flip in enumerate(seq.refocusing_flip):
        relax_shift()
        th = (np.deg2rad(flip) * b1)[:, None]
        c2 = np.cos(th / 2) ** 2
        s2 = np.sin(th / 2) ** 2
        s = np.sin(th)
        c = np.cos(th)
        fp, fm, z = (c2 * fp + s2 * fm + s * z,
                     s2 * fp + c2 * fm - s * z,
                     -0.5 * s * fp + 0.5 * s * fm + c * z)
        relax_shift()
        echoes[:, k] = fp[:, 0]
    # magnitude images: late stimulated-echo sums can flip sign at short T2
    return np.abs(echoes).reshape(*shape, seq.n_echo)


def simulate_echo_train(seq: SequenceParams, t2: float, t1: float = DEFAULT_T1, b1: float = 1.0) -> np.ndarray:
    """Echo magnitudes (M0 = 1) of a CPMG train for one tissue."""
    if not t2 > 0:
        raise ValueError(f"t2 must be positive, got {t2}")
    if t1 < t2:
        raise ValueError(f"t1 ({t1}) must be >= t2 ({t2})")
    if not 0 < b1 <= 2:
        raise ValueError(f"b1 must lie in (0, 2], got {b1}")
    return _epg_cpmg(seq, t2, t1, b1)


# -- dictionary ---------------------------------------------------------------

@dataclass
class EMCDictionary:
    """Unit-norm simulated echo trains over a (T2, B1) grid.

    ``curves`` has one row per entry in T2-major order (entry = i_t2 * n_b1 + i_b1);
    ``norms`` holds the raw L2 norm of each curve before normalization.
    """

    seq: SequenceParams
    t2_grid: np.ndarray
    b1_grid: np.ndarray
    curves: np.ndarray
    norms: np.ndarray
    t1: float = DEFAULT_T1

    @property
    def n_entries(self) -> int:
        return self.curves.shape[0]

    def index(self, i_t2: int, i_b1: int) -> int:
        return i_t2 * len(self.b1_grid) + i_b1

    def raw_curve(self, entry) -> np.ndarray:
        return self.curves[entry] * np.asarray(self.norms[entry])[..., None]

    def save(self, path, provenance: dict | None = None) -> None:
        header = {
            "version": DICT_VERSION,
            "dtype": "f32le",
            "seq": self.seq.to_dict(),
            "t1": self.t1,
            "t2_grid": self.t2_grid.tolist(),
            "b1_grid": self.b1_grid.tolist(),
            "n_entries": int(self.n_entries),
            "n_echo": int(self.seq.n_echo),
        }
        if provenance is not None:
            header["provenance"] = provenance
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(self.curves.astype("<f4").tobytes())
            f.write(self.norms.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EMCDictionary":
        raw = Path(path).read_bytes()
        if len(raw) < 4:
            raise ValueError(f"{path}: truncated dictionary file")
        (hlen,) = struct.unpack("<I", raw[:4])
        header = json.loads(raw[4:4 + hlen].decode())
        if header.get("version") != DICT_VERSION:
            raise ValueError(f"{path}: unsupported dictionary version {header.get('version')}")
        n, e = header["n_entries"], header["n_echo"]
        payload = np.frombuffer(raw[4 + hlen:], dtype="<f4")
        if payload.size != n * e + n:
            raise ValueError(f"{path}: payload has {payload.size} floats, header implies {n * e + n}")
        curves = payload[:n * e].reshape(n, e).astype(np.float64)
        norms = payload[n * e:].astype(np.float64)
        return cls(SequenceParams.from_dict(header["seq"]), np.array(header["t2_grid"]),
                   np.array(header["b1_grid"]), curves, norms, header["t1"])


def build_dictionary(seq: SequenceParams, t2_grid=None, b1_grid=None, t1: float = DEFAULT_T1) -> EMCDictionary:
    """Simulate and unit-normalize every (T2, B1) combination.

    PD is not a grid dimension: the normalized matching recovers it as a scale.
    """
    t2_grid = default_t2_grid() if t2_grid is None else np.asarray(t2_grid, dtype=float)
    b1_grid = default_b1_grid() if b1_grid is None else np.asarray(b1_grid, dtype=float)
    for name, g in (("t2", t2_grid), ("b1", b1_grid)):
        if g.size == 0:
            raise ValueError(f"{name} grid is empty")
        if np.any(np.diff(g) <= 0):
            raise ValueError(f"{name} grid must be strictly increasing")
    if t2_grid.max() > t1:
        t1 = float(t2_grid.max())
    tt, bb = np.meshgrid(t2_grid, b1_grid, indexing="ij")
    raw = _epg_cpmg(seq, tt, t1, bb).reshape(-1, seq.n_echo)
    norms = np.linalg.norm(raw, axis=1)
    return EMCDictionary(seq, t2_grid, b1_grid, raw / norms[:, None], norms, t1)


# -- single-compartment fit ---------------------------------------------------

@dataclass(frozen=True)
class VoxelFit:
    t2: float
    pd: float
    b1: float
    residual: float
    background: bool = False


def _first_max(scores: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Row-wise index of the first score within ``rtol`` of the maximum.

    Entries are ordered T2-major, so near-exact ties resolve toward smaller T2
    then smaller B1. B1 and 2 - B1 give identical curves, so the tolerance is
    needed for the rule to hold regardless of rounding.
    """
    top = scores.max(axis=1, keepdims=True)
    return (scores >= top - rtol * np.abs(top)).argmax(axis=1)


def _match(measured: np.ndarray, dictionary: EMCDictionary, chunk: int = 4096):
    """Best entry, projection and residual for each row of ``measured``."""
    m = np.asarray(measured, dtype=np.float64).reshape(-1, dictionary.seq.n_echo)
    norms = np.linalg.norm(m, axis=1)
    best = np.zeros(len(m), dtype=np.int64)
    proj = np.zeros(len(m))
    for start in range(0, len(m), chunk):
        scores = m[start:start + chunk] @ dictionary.curves.T
        idx = _first_max(scores)
        best[start:start + chunk] = idx
        proj[start:start + chunk] = scores[np.arange(len(idx)), idx]
    background = norms == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(background, 0.0, proj / np.where(background, 1.0, norms))
    residual = np.where(background, 1.0, 1.0 - corr ** 2)
    pd = np.where(background, 0.0, np.maximum(proj, 0.0))
    return best, pd, residual, background


def fit_voxel(measured, dictionary: EMCDictionary) -> VoxelFit:
    """Match one echo train against the dictionary.

    An all-zero voxel is reported as background with pd = 0.
    """
    m = np.asarray(measured, dtype=np.float64)
    if m.shape != (dictionary.seq.n_echo,):
        raise ValueError(f"measured train has shape {m.shape}, dictionary expects ({dictionary.seq.n_echo},)")
    best, pd, residual, background = _match(m, dictionary)
    i_t2, i_b1 = divmod(int(best[0]), len(dictionary.b1_grid))
    if background[0]:
        return VoxelFit(np.nan, 0.0, np.nan, 1.0, background=True)
    return VoxelFit(float(dictionary.t2_grid[i_t2]), float(pd[0]), float(dictionary.b1_grid[i_b1]),
                    float(residual[0]))


def fit_map(echoes: np.ndarray, dictionary: EMCDictionary):
    """Voxel-wise fit of an (H, W, n_echo) stack -> (t2, pd, b1) maps.

    Background voxels carry t2 = b1 = 0 and pd = 0.
    """
    echoes = np.asarray(echoes)
    if echoes.shape[-1] != dictionary.seq.n_echo:
        raise ValueError(f"echo stack has {echoes.shape[-1]} echoes, dictionary expects {dictionary.seq.n_echo}")
    spatial = echoes.shape[:-1]
    best, pd, _, background = _match(echoes, dictionary)
    i_t2, i_b1 = np.divmod(best, len(dictionary.b1_grid))
    t2 = np.where(background, 0.0, dictionary.t2_grid[i_t2])
    b1 = np.where(background, 0.0, dictionary.b1_grid[i_b1])
    return (t2.reshape(spatial).astype(np.float32), pd.reshape(spatial).astype(np.float32),
            b1.reshape(spatial).astype(np.float32))


# -- two-compartment decomposition -------------------------------------------

@dataclass(frozen=True)
class TwoCompartmentFit:
    fat_fraction: float
    t2_water: float
    t2_fat: float
    residual: float
    background: bool = False


class _MixtureBank:
    """Unit-norm mixture curves for every (FF, T2_water) pair at each B1."""

    def __init__(self, dictionary: EMCDictionary, t2_fat: float, ff_step: float = FF_STEP):
        water_idx = np.flatnonzero(dictionary.t2_grid < t2_fat)
        if water_idx.size == 0:
            raise ValueError(f"no dictionary T2 below the fat T2 {t2_fat} ms")
        self.t2_water = dictionary.t2_grid[water_idx]
        nsteps = int(round(1 / ff_step))
        self.ff = np.arange(nsteps + 1) / nsteps
        self.t2_fat = t2_fat
        n_b1 = len(dictionary.b1_grid)
        t1 = max(dictionary.t1, t2_fat)
        fat = _epg_cpmg(dictionary.seq, t2_fat, t1, dictionary.b1_grid)          # (n_b1, E)
        self.banks = []
        for j in range(n_b1):
            water = dictionary.raw_curve(water_idx * n_b1 + j)                    # (n_w, E)
            mix = self.ff[:, None, None] * fat[j] + (1 - self.ff)[:, None, None] * water[None]
            mix = mix.reshape(-1, dictionary.seq.n_echo)                          # FF-major
            self.banks.append(mix / np.linalg.norm(mix, axis=1, keepdims=True))

    def solve(self, unit: np.ndarray, b1_index: int):
        bank = self.banks[b1_index]
        scores = unit @ bank.T
        idx = _first_max(scores)
        best = scores[np.arange(len(idx)), idx]
        ff_i, w_i = np.divmod(idx, len(self.t2_water))
        residual = np.maximum(2.0 - 2.0 * best, 0.0)
        return self.ff[ff_i], self.t2_water[w_i], residual


def decompose_two_t2(measured, dictionary: EMCDictionary, t2_fat: float = DEFAULT_T2_FAT,
                     bank: _MixtureBank | None = None) -> TwoCompartmentFit:
    """Grid search over fat fraction (step 0.01) and water T2 for one voxel.

    B1 comes from the single-compartment fit. The residual is the squared
    distance between the unit-normalized measurement and mixture curve.
    """
    m = np.asarray(measured, dtype=np.float64)
    fit = fit_voxel(m, dictionary)
    if fit.background:
        return TwoCompartmentFit(np.nan, np.nan, t2_fat, np.nan, background=True)
    bank = bank or _MixtureBank(dictionary, t2_fat)
    j = int(np.searchsorted(dictionary.b1_grid, fit.b1))
    ff, t2w, res = bank.solve((m / np.linalg.norm(m))[None], j)
    return TwoCompartmentFit(float(ff[0]), float(t2w[0]), t2_fat, float(res[0]))


def decompose_map(echoes: np.ndarray, dictionary: EMCDictionary, t2_fat: float = DEFAULT_T2_FAT,
                  mask: np.ndarray | None = None):
    """Voxel-wise two-compartment fit -> (ff, t2_water, residual) maps.

    Voxels outside ``mask`` or with an all-zero train get FF = 0 and are
    reported in the returned background mask.
    """
    echoes = np.asarray(echoes, dtype=np.float64)
    spatial = echoes.shape[:-1]
    flat = echoes.reshape(-1, echoes.shape[-1])
    best, _, _, background = _match(flat, dictionary)
    if mask is not None:
        background = background | ~np.asarray(mask, bool).reshape(-1)
    b1_idx = best % len(dictionary.b1_grid)
    bank = _MixtureBank(dictionary, t2_fat)
    ff = np.zeros(len(flat))
    t2w = np.zeros(len(flat))
    res = np.zeros(len(flat))
    norms = np.linalg.norm(flat, axis=1)
    for j in np.unique(b1_idx[~background]):
        sel = np.flatnonzero((b1_idx == j) & ~background)
        f, w, r = bank.solve(flat[sel] / norms[sel, None], int(j))
        ff[sel], t2w[sel], res[sel] = f, w, r
    return (ff.reshape(spatial).astype(np.float32), t2w.reshape(spatial).astype(np.float32),
            res.reshape(spatial).astype(np.float32), background.reshape(spatial))


def label_fat(ff_map, threshold: float = FAT_THRESHOLD) -> np.ndarray:
    """1 where FF > threshold (strictly), 0 otherwise."""
    ff = np.asarray(ff_map)
    return (ff > threshold).astype(np.int32)


def add_rician_noise(signal: np.ndarray, sigma, rng: np.random.Generator) -> np.ndarray:
    """Magnitude of the signal plus complex Gaussian noise of std ``sigma``."""
    re = signal + rng.normal(0.0, 1.0, signal.shape) * sigma
    im = rng.normal(0.0, 1.0, signal.shape) * sigma
    return np.hypot(re, im)

