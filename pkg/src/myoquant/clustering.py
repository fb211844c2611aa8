"""Patch-based tissue classification inside the muscle region.

A convolutional autoencoder maps 16x16x2 (T2, PD) patches to unit-norm
embeddings; k-means with two clusters then separates healthy muscle from
IMAT. Training either uses reconstruction alone or reconstruction plus a
triplet margin on the embeddings.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .engine import (AdamState, BatchNorm, Conv2D, ConvTranspose2D, Dense, Layer, LossWeights, NumericalError,
                     Tape, Tensor, adam_step, combined_loss, ops)
from .metrics import tissue_scores

log = logging.getLogger(__name__)

PATCH = 16
Z_CLIP = 10.0
METHODS = ("kmeans_raw", "dcae_kmeans", "dcae_tl_kmeans")
METHOD_LABELS = {"kmeans_raw": "k-means", "dcae_kmeans": "DCAE + k-means", "dcae_tl_kmeans": "DCAE_TL + k-means"}


# -- patches ------------------------------------------------------------------

@dataclass
class PatchSet:
    values: np.ndarray            # (N, 16, 16, 2) float32
    coords: np.ndarray            # (N, 2) row, col of the centre pixel
    labels: np.ndarray | None     # (N,) 0 = muscle, 1 = IMAT

    def __len__(self) -> int:
        return len(self.values)

    def subset(self, idx) -> "PatchSet":
        return PatchSet(self.values[idx], self.coords[idx], None if self.labels is None else self.labels[idx])


def extract_patches(t2_map, pd_map, region_mask, labels=None, size: int = PATCH) -> PatchSet:
    """One size x size x 2 patch per in-mask pixel, reflect-padded at borders.

    The centre pixel sits at index (size // 2, size // 2) of its patch.
    """
    t2 = np.asarray(t2_map, dtype=np.float32)
    pd = np.asarray(pd_map, dtype=np.float32)
    mask = np.asarray(region_mask, bool)
    if not t2.shape == pd.shape == mask.shape:
        raise ValueError(f"maps and mask differ in geometry: {t2.shape}, {pd.shape}, {mask.shape}")
    if not mask.any():
        raise ValueError("extract_patches: empty region mask")
    half = size // 2
    stack = np.stack([t2, pd], axis=-1)
    padded = np.pad(stack, ((half, size - half - 1), (half, size - half - 1), (0, 0)), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(0, 1))   # (H, W, 2, s, s)
    coords = np.argwhere(mask)
    vals = windows[coords[:, 0], coords[:, 1]].transpose(0, 2, 3, 1)
    lab = None if labels is None else np.asarray(labels)[coords[:, 0], coords[:, 1]].astype(np.int32)
    return PatchSet(np.ascontiguousarray(vals, dtype=np.float32), coords, lab)


@dataclass
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


def sample_triplets(labels, n: int, rng) -> TripletBatch:
    """Index triplets: uniform anchors, a same-label positive other than the
    anchor, and a negative from the other label."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError(f"triplet sampling needs two classes, found only {classes.tolist()}")
    members = {c: np.flatnonzero(labels == c) for c in classes}
    for c, m in members.items():
        if len(m) < 2:
            raise ValueError(f"class {c} has {len(m)} patch; a positive needs at least two")
    anchor = rng.integers(0, len(labels), n)
    positive = np.empty(n, dtype=np.int64)
    negative = np.empty(n, dtype=np.int64)
    for c in classes:
        sel = np.flatnonzero(labels[anchor] == c)
        if sel.size == 0:
            continue
        same = members[c]
        # draw from the class minus the anchor: pick among len-1 slots and skip the anchor's slot
        pos_in_class = np.searchsorted(same, anchor[sel])
        k = rng.integers(0, len(same) - 1, sel.size)
        k = k + (k >= pos_in_class)
        positive[sel] = same[k]
        others = np.concatenate([members[o] for o in classes if o != c])
        negative[sel] = others[rng.integers(0, len(others), sel.size)]
    return TripletBatch(anchor, positive, negative)


# -- model --------------------------------------------------------------------

@dataclass
class DCAEConfig:
    channels: tuple[int, int] = (32, 64)
    embedding_dim: int = 32
    batch_size: int = 256
    epochs: int = 100
    lr: float = 1e-3
    beta: float = 0.5
    lam: float = 1.0 / 6.0
    alpha: float = 1.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.embedding_dim < 2:
            raise ValueError(f"embedding dim must be >= 2, got {self.embedding_dim}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be >= 1")

    @property
    def flatten_width(self) -> int:
        return 4 * 4 * self.channels[1]

    @property
    def weights(self) -> LossWeights:
        return LossWeights(beta=self.beta, lam=self.lam, alpha=self.alpha)


class DCAE(Layer):
    """conv(32)+ReLU, pool, BN, conv(64)+ReLU, pool, BN, flatten(1024), dense
    to the embedding and L2-normalize; decoder mirrors it with a dense layer
    and two stride-2 3x3 transposed convs."""

    def __init__(self, cfg: DCAEConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c1, c2 = cfg.channels
        self.conv1 = Conv2D(2, c1, 3, rng)
        self.bn1 = BatchNorm(c1)
        self.conv2 = Conv2D(c1, c2, 3, rng)
        self.bn2 = BatchNorm(c2)
        self.fc = Dense(cfg.flatten_width, cfg.embedding_dim, rng)
        self.dfc = Dense(cfg.embedding_dim, cfg.flatten_width, rng)
        self.up1 = ConvTranspose2D(c2, c1, 3, rng)
        self.up2 = ConvTranspose2D(c1, 2, 3, rng)

    def encode(self, x: Tensor, training: bool = False) -> Tensor:
        h = self.bn1(ops.maxpool2(ops.relu(self.conv1(x))), training)
        h = self.bn2(ops.maxpool2(ops.relu(self.conv2(h))), training)
        h = ops.reshape(h, (h.shape[0], -1))
        return ops.l2_normalize(self.fc(h))

    def decode(self, z: Tensor) -> Tensor:
        h = ops.relu(self.dfc(z))
        h = ops.reshape(h, (z.shape[0], 4, 4, self.cfg.channels[1]))
        h = ops.relu(self.up1(h))
        return self.up2(h)

    def __call__(self, x: Tensor, training: bool = False):
        z = self.encode(x, training)
        return z, self.decode(z)


@dataclass
class DCAEResult:
    model: DCAE
    mode: str
    losses: dict[str, list[float]] = field(default_factory=dict)
    seed: int = 0


def train_dcae(patches: PatchSet, cfg: DCAEConfig | None = None, mode: str = "tl", seed: int = 0,
               progress=None) -> DCAEResult:
    """Train on patches. ``mode="tl"`` optimizes beta * triplet + lam * (sum of
    the three MSEs); ``mode="mse"`` optimizes reconstruction alone.

    An epoch visits as many anchors (tl) or patches (mse) as there are
    patches, in batches of ``cfg.batch_size``.
    """
    cfg = cfg or DCAEConfig()
    if mode not in ("tl", "mse"):
        raise ValueError(f"mode must be 'tl' or 'mse', got {mode!r}")
    if mode == "tl" and patches.labels is None:
        raise ValueError("triplet training needs patch labels")
    model = DCAE(cfg, seed)
    params = model.parameters()
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    x_all = patches.values
    n = len(patches)
    keys = ("total", "triplet", "mse") if mode == "tl" else ("total", "mse")
    losses = {k: [] for k in keys}
    for epoch in range(cfg.epochs):
        acc = {k: [] for k in keys}
        if mode == "tl":
            trip = sample_triplets(patches.labels, n, rng)
        else:
            order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            stop = min(start + cfg.batch_size, n)
            with Tape() as tape:
                if mode == "tl":
                    xa, xp, xn = (Tensor(x_all[idx[start:stop]]) for idx in (trip.anchor, trip.positive, trip.negative))
                    za, ra = model(xa, training=True)
                    zp, rp = model(xp, training=True)
                    zn, rn = model(xn, training=True)
                    lt = ops.triplet_loss(za, zp, zn, cfg.alpha)
                    ma, mp, mn = ops.mse(ra, xa), ops.mse(rp, xp), ops.mse(rn, xn)
                    loss = combined_loss(lt, ma, mp, mn, cfg.weights)
                    parts = {"triplet": float(lt.item()), "mse": float(ma.item() + mp.item() + mn.item()) / 3}
                else:
                    x = Tensor(x_all[order[start:stop]])
                    _, r = model(x, training=True)
                    loss = ops.mse(r, x)
                    parts = {"mse": float(loss.item())}
            value = float(loss.item())
            if not np.isfinite(value):
                raise NumericalError(f"non-finite DCAE loss at epoch {epoch}, batch {b}")
            adam_step(params, tape.gradient(loss, params), state)
            acc["total"].append(value)
            for k, v in parts.items():
                acc[k].append(v)
        for k in keys:
            losses[k].append(float(np.mean(acc[k])))
        if progress is not None:
            progress(epoch, losses["total"][-1])
    return DCAEResult(model, mode, losses, seed)


def embed(model: DCAE, patches, batch_size: int = 1024) -> np.ndarray:
    """Unit-norm embeddings (inference-mode batch norm)."""
    x = patches.values if isinstance(patches, PatchSet) else np.asarray(patches, dtype=np.float32)
    out = [model.encode(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0).astype(np.float64)


def save_dcae(path, result: DCAEResult, extra: dict | None = None):
    cfg = {"dcae": asdict(result.model.cfg), "mode": result.mode}
    return checkpoint.save_checkpoint(path, result.model.state(), "dcae", cfg, result.seed,
                                      {"losses": result.losses, **(extra or {})})


def load_dcae(path) -> DCAE:
    manifest, state = checkpoint.load_checkpoint(path)
    if manifest.get("kind") != "dcae":
        raise ValueError(f"{path}: checkpoint kind is {manifest.get('kind')!r}, expected 'dcae'")
    model = DCAE(DCAEConfig(**manifest["config"]["dcae"]), manifest.get("seed") or 0)
    model.load_state(state)
    return model


# -- k-means ------------------------------------------------------------------

@dataclass
class KMeansState:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list[float]        # inertia after each Lloyd assignment of the winning run
    iterations: int


def _sq_dist(x, c):
    return np.maximum((x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None], 0.0)


def _kmeans_pp(x, k, rng):
    centres = [x[rng.integers(len(x))]]
    d2 = _sq_dist(x, np.array(centres))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centres.append(x[idx])
        d2 = np.minimum(d2, _sq_dist(x, x[idx][None])[:, 0])
    return np.array(centres)


def _lloyd(x, centres, max_iter):
    history = []
    assign = None
    for it in range(max_iter):
        d = _sq_dist(x, centres)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(len(centres)):
            members = x[assign == j]
            if len(members):
                centres[j] = members.mean(axis=0)
    d = _sq_dist(x, centres)
    assign = d.argmin(axis=1)
    return centres, assign, float(d[np.arange(len(x)), assign].sum()), history, it + 1


def kmeans(points, k: int = 2, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> KMeansState:
    """k-means++ seeding, Lloyd iterations to an assignment fixpoint (at most
    ``max_iter``), best of ``n_init`` restarts by inertia."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"kmeans expects an (N, D) matrix, got shape {x.shape}")
    if len(np.unique(x, axis=0)) < k:
        raise ValueError(f"kmeans needs at least {k} distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centres, assign, inertia, history, iters = _lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = KMeansState(k, centres, assign, inertia, history, iters)
    return best


# -- classification -----------------------------------------------------------

def _zscore_in(values, mask):
    v = values[mask].astype(np.float64)
    sd = v.std()
    return np.where(mask, (values - v.mean()) / (sd if sd > 0 else 1.0), 0.0).astype(np.float32)


def name_clusters(assign: np.ndarray, t2_values: np.ndarray) -> np.ndarray:
    """Map cluster ids to 0 = muscle, 1 = IMAT (the cluster with higher mean T2)."""
    means = [t2_values[assign == j].mean() if np.any(assign == j) else -np.inf for j in range(assign.max() + 1)]
    imat = int(np.argmax(means))
    return (assign == imat).astype(np.int32)


def classify_pixels(method: str, t2_map, pd_map, region, model: DCAE | None = None, seed: int = 0) -> np.ndarray:
    """Label map over ``region`` (0 muscle, 1 IMAT; -1 outside the region)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    region = np.asarray(region, bool)
    if not region.any():
        raise ValueError("classify_pixels: empty muscle region")
    t2 = np.asarray(t2_map, dtype=np.float64)
    pd = np.asarray(pd_map, dtype=np.float64)
    if method == "kmeans_raw":
        feats = np.stack([_zscore_in(t2, region)[region], _zscore_in(pd, region)[region]], axis=1)
    else:
        if model is None:
            raise ValueError(f"method {method} needs a trained DCAE model")
        feats = embed(model, normalized_patches(t2, pd, region))
    state = kmeans(feats, 2, seed)
    out = np.full(region.shape, -1, dtype=np.int32)
    out[region] = name_clusters(state.assignments, t2[region])
    return out


def _robust_z(values, region):
    v = values[region]
    med = np.median(v)
    mad = 1.4826 * np.median(np.abs(v - med))
    if not mad > 0:
        mad = v.std() if v.std() > 0 else 1.0
    z = np.clip((values - med) / mad, -Z_CLIP, Z_CLIP)
    return np.where(region, z, 0.0).astype(np.float32)


def dcae_maps(t2_map, pd_map, region):
    """DCAE input scaling: median/MAD z-scores inside the region, clipped.

    Median and MAD stay with the majority tissue while the minority tissue is
    below half the region, so the scaling does not drift with the IMAT
    fraction. Pixels outside the region are 0, the region median, so edge
    patches do not look like a separate texture.
    """
    region = np.asarray(region, bool)
    return (_robust_z(np.asarray(t2_map, np.float64), region),
            _robust_z(np.asarray(pd_map, np.float64), region))


def normalized_patches(t2_map, pd_map, region, labels=None) -> PatchSet:
    """Patches of the scaled maps (the representation the DCAE sees)."""
    t2n, pdn = dcae_maps(t2_map, pd_map, region)
    return extract_patches(t2n, pdn, region, labels)


# -- report -------------------------------------------------------------------

TABLE2_COLUMNS = ("Healthy Muscle Dice", "IMAT Dice", "ACC", "NMI", "ARI")
_TABLE2_KEYS = ("dice_muscle", "dice_imat", "acc", "nmi", "ari")


def format_table2(rows: dict[str, dict[str, float]]) -> str:
    """Method | Healthy Muscle Dice | IMAT Dice | ACC | NMI | ARI."""
    head = ["Method", *TABLE2_COLUMNS]
    body = [[METHOD_LABELS.get(m, m)] + [f"{s[k]:.3f}" for k in _TABLE2_KEYS] for m, s in rows.items()]
    table = [head] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(head))]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    lines = [sep, "| " + " | ".join(c.ljust(w) for c, w in zip(head, widths)) + " |", sep]
    lines += ["| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |" for r in body]
    return "\n".join(lines + [sep])


def table2_csv(rows: dict[str, dict[str, float]]) -> str:
    lines = ["method," + ",".join(_TABLE2_KEYS)]
    lines += [m + "," + ",".join(f"{s[k]:.6f}" for k in _TABLE2_KEYS) for m, s in rows.items()]
    return "\n".join(lines) + "\n"


def evaluate_methods(t2_map, pd_map, region, truth_labels, models: dict[str, DCAE], seed: int = 0):
    """Scores for each method; ``models`` maps dcae_kmeans / dcae_tl_kmeans to encoders."""
    rows = {}
    for method in METHODS:
        labels = classify_pixels(method, t2_map, pd_map, region, models.get(method), seed)
        rows[method] = tissue_scores(truth_labels, labels, region)
    return rows
