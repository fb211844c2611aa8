"""End-to-end orchestration on phantom cases.

Every stage reads its inputs from and writes its outputs to a per-case
directory, so any stage can be rerun on its own. Case directory layout:

    spec.json, case.json               phantom spec, name and severity
    truth_t2, truth_pd, truth_ff       phantom truth maps
    tissue, fat_gt, region             tissue labels, fat/muscle GT, muscle-region GT
    echoes                             multi-echo stack (H, W, n_echo)
    t2, pd, b1                         dictionary fit
    ff, t2w, fat                       two-compartment fit and its >50% fat labels
    region_pred                        segmentation output (U-Net or copied GT)
    labels                             tissue classes inside region_pred (-1 outside)
    metrics.csv                        scores against the phantom GT
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .clustering import (DCAEConfig, METHODS, classify_pixels, load_dcae, normalized_patches, save_dcae,
                         train_dcae)
from .emc import (DEFAULT_T2_FAT, FAT_THRESHOLD, EMCDictionary, SequenceParams, build_dictionary, decompose_map,
                  fit_map, label_fat)
from .metrics import dice, fat_fraction_index, tissue_scores
from .phantom import Phantom, PhantomSpec, generate_phantom, simulate_acquisition
from .preprocess import PreprocessConfig, preprocess_maps
from .segmentation import (AugmentConfig, Case, TrainConfig, UNetConfig, load_unet, predict_mask, save_unet,
                           train_unet)

log = logging.getLogger(__name__)

SEVERITY_FRACTIONS = {"mild": 0.05, "moderate": 0.20, "severe": 0.45}
METRIC_COLUMNS = ("dice_muscle", "dice_imat", "acc", "nmi", "ari", "fat_fraction_pred", "fat_fraction_truth")
FIG4_COLUMNS = ("case", "severity", "ff_pred", "ff_truth", "abs_error", "region_dice")
_INPUT_CHANNELS = {"T2+PD": ("t2", "pd"), "T2": ("t2",), "PD": ("pd",)}


# -- in-memory helpers ---------------------------------------------------------

@dataclass
class SimulatedCase:
    case: Case
    phantom: Phantom
    echoes: np.ndarray
    fat_label: np.ndarray     # decomposition-derived pixel ground truth inside the GT region


def simulate_case(spec: PhantomSpec, dictionary: EMCDictionary | None = None, severity: str = "",
                  name: str | None = None, seq: SequenceParams | None = None) -> SimulatedCase:
    """Phantom -> echo stack -> fitted T2/PD maps and decomposition labels."""
    seq = seq or (dictionary.seq if dictionary is not None else SequenceParams())
    dictionary = dictionary or build_dictionary(seq)
    ph = generate_phantom(spec)
    acq = simulate_acquisition(ph, seq)
    t2, pd, _ = fit_map(acq.echoes, dictionary)
    ff, _, _, _ = decompose_map(acq.echoes, dictionary, mask=ph.region)
    labels = label_fat(ff) * ph.region
    case = Case(name or f"seed{spec.seed}", t2, pd, ph.region, severity)
    return SimulatedCase(case, ph, acq.echoes, labels.astype(np.int32))


# -- file stages ---------------------------------------------------------------

def _f(case_dir, name) -> Path:
    return Path(case_dir) / name


def write_phantom_case(case_dir, spec: PhantomSpec, seq: SequenceParams | None = None, name: str | None = None,
                       severity: str = "", prov: dict | None = None) -> Path:
    """Generate a phantom, simulate its acquisition and write truth maps, GT masks and echoes."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    prov = prov or io.provenance("myoquant phantom", spec.to_dict(), spec.seed)
    ph = generate_phantom(spec)
    acq = simulate_acquisition(ph, seq)
    io.write_image(_f(case_dir, "truth_t2"), ph.t2, "t2", prov)
    io.write_image(_f(case_dir, "truth_pd"), ph.pd, "pd", prov)
    io.write_image(_f(case_dir, "truth_ff"), ph.ff, "ff", prov)
    io.write_image(_f(case_dir, "truth_b1"), ph.b1, "b1", prov)
    io.write_image(_f(case_dir, "tissue"), ph.tissue, "labels", prov)
    io.write_image(_f(case_dir, "fat_gt"), ph.fat_label, "labels", prov)
    io.write_image(_f(case_dir, "region"), ph.region, "mask", prov)
    io.write_image(_f(case_dir, "echoes"), acq.echoes, "echo-stack", prov,
                   channels=[f"echo{i + 1}" for i in range(acq.echoes.shape[-1])])
    _write_json(_f(case_dir, "spec.json"), {**spec.to_dict(), "provenance": prov})
    _write_json(_f(case_dir, "case.json"), {"name": name or case_dir.name, "severity": severity,
                                            "provenance": prov})
    return case_dir


def fit_case(case_dir, dictionary: EMCDictionary, prov: dict | None = None, t2_fat: float = DEFAULT_T2_FAT,
             threshold: float = FAT_THRESHOLD) -> None:
    """Dictionary fit (t2, pd, b1) and two-compartment fit (ff, t2w, fat) of a case's echoes."""
    prov = prov or io.provenance("myoquant fit-t2")
    echoes = io.read_image(_f(case_dir, "echoes")).data
    t2, pd, b1 = fit_map(echoes, dictionary)
    io.write_image(_f(case_dir, "t2"), t2, "t2", prov)
    io.write_image(_f(case_dir, "pd"), pd, "pd", prov)
    io.write_image(_f(case_dir, "b1"), b1, "b1", prov)
    region = io.read_image(_f(case_dir, "region")).data if _f(case_dir, "region.raw").exists() else None
    ff, t2w, _, _ = decompose_map(echoes, dictionary, t2_fat, mask=region)
    fat = label_fat(ff, threshold)
    if region is not None:
        fat = fat * region
    io.write_image(_f(case_dir, "ff"), ff, "ff", prov)
    io.write_image(_f(case_dir, "t2w"), t2w, "t2", prov)
    io.write_image(_f(case_dir, "fat"), fat, "labels", prov)


def load_case(case_dir, region_name: str = "region") -> Case:
    meta = _read_json(_f(case_dir, "case.json")) if _f(case_dir, "case.json").exists() else {}
    t2 = io.read_image(_f(case_dir, "t2")).data
    pd = io.read_image(_f(case_dir, "pd")).data
    region = io.read_image(_f(case_dir, region_name)).data
    return Case(meta.get("name", Path(case_dir).name), t2, pd, region, meta.get("severity", ""))


def case_dirs(root) -> list[Path]:
    """Case directories directly under ``root`` (those holding a case.json), sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"case directory not found: {root}")
    return sorted(p for p in root.iterdir() if (p / "case.json").exists())


def stack_inputs(t2, pd, inputs: str = "T2+PD", pp: bool = True, cfg: PreprocessConfig | None = None):
    """Preprocess a T2/PD pair and stack the channels a U-Net variant expects."""
    if inputs not in _INPUT_CHANNELS:
        raise ValueError(f"unknown input variant {inputs!r}; choose from {tuple(_INPUT_CHANNELS)}")
    out = preprocess_maps(t2, pd, cfg or PreprocessConfig(), raw=not pp)
    maps = {"t2": out.t2, "pd": out.pd}
    return np.stack([maps[c] for c in _INPUT_CHANNELS[inputs]], axis=-1), out.transform


def train_unet_on_cases(dirs, out_path, unet_cfg: UNetConfig | None = None, train_cfg: TrainConfig | None = None,
                        aug_cfg: AugmentConfig | None = None, inputs: str = "T2+PD", pp: bool = True,
                        pp_cfg: PreprocessConfig | None = None, seed: int = 0, prov: dict | None = None):
    pp_cfg = pp_cfg or PreprocessConfig()
    unet_cfg = unet_cfg or UNetConfig()
    unet_cfg = UNetConfig(**{**asdict(unet_cfg), "in_channels": len(_INPUT_CHANNELS[inputs])})
    xs, ys = [], []
    for d in dirs:
        c = load_case(d)
        x, tf = stack_inputs(c.t2, c.pd, inputs, pp, pp_cfg)
        xs.append(x)
        ys.append(tf.apply_mask(c.region))
    res = train_unet(xs, ys, unet_cfg, train_cfg, aug_cfg, seed)
    extra = {"inputs": inputs, "pp": pp, "preprocess": pp_cfg.to_dict(), "losses": res.losses,
             "provenance": prov or io.provenance("myoquant train-unet", None, seed)}
    save_unet(out_path, res, seed, extra)
    return res


def segment_maps(model_path, t2, pd) -> np.ndarray:
    """Muscle-region mask on the original grid from a saved U-Net and its recorded input variant."""
    from .checkpoint import load_checkpoint

    manifest, _ = load_checkpoint(model_path)
    model = load_unet(model_path)
    extra = manifest
    pp_cfg = PreprocessConfig.from_dict(extra.get("preprocess", {}))
    x, tf = stack_inputs(t2, pd, extra.get("inputs", "T2+PD"), extra.get("pp", True), pp_cfg)
    return tf.map_back(predict_mask(model, x))


def segment_case(case_dir, model_path=None, prov: dict | None = None) -> np.ndarray:
    """Write region_pred: the U-Net prediction, or a copy of the GT region without a model."""
    prov = prov or io.provenance("myoquant segment")
    if model_path is None:
        region = io.read_image(_f(case_dir, "region")).data
    else:
        c = load_case(case_dir)
        region = segment_maps(model_path, c.t2, c.pd)
    io.write_image(_f(case_dir, "region_pred"), region, "mask", prov)
    return region


def train_dcae_on_cases(dirs, out_path, cfg: DCAEConfig | None = None, mode: str = "tl", seed: int = 0,
                        label_name: str = "fat", prov: dict | None = None):
    """Train a DCAE on region patches of several cases; triplet labels come from ``label_name`` maps."""
    sets = []
    for d in dirs:
        c = load_case(d)
        labels = io.read_image(_f(d, label_name)).data if mode == "tl" else None
        sets.append(normalized_patches(c.t2, c.pd, c.region, labels))
    from .clustering import PatchSet

    patches = PatchSet(np.concatenate([s.values for s in sets]), np.concatenate([s.coords for s in sets]),
                       None if mode != "tl" else np.concatenate([s.labels for s in sets]))
    res = train_dcae(patches, cfg, mode, seed)
    save_dcae(out_path, res, {"provenance": prov or io.provenance("myoquant train-dcae", None, seed)})
    return res


def cluster_case(case_dir, method: str = "dcae_tl_kmeans", model_path=None, seed: int = 0,
                 prov: dict | None = None) -> np.ndarray:
    prov = prov or io.provenance("myoquant cluster")
    c = load_case(case_dir, "region_pred")
    model = load_dcae(model_path) if method != "kmeans_raw" else None
    labels = classify_pixels(method, c.t2, c.pd, c.region, model, seed)
    io.write_image(_f(case_dir, "labels"), labels, "labels", prov)
    return labels


def case_metrics(truth, pred, truth_region, pred_region) -> dict[str, float]:
    """Tissue scores on the overlap of the two regions; fat fractions on each own region."""
    truth_region, pred_region = np.asarray(truth_region, bool), np.asarray(pred_region, bool)
    both = truth_region & pred_region
    scores = tissue_scores(truth, pred, both)
    scores["fat_fraction_pred"] = fat_fraction_index(pred, pred_region)
    scores["fat_fraction_truth"] = fat_fraction_index(truth, truth_region)
    return scores


def write_metrics_csv(path, rows: dict[str, dict[str, float]]) -> None:
    lines = ["case," + ",".join(METRIC_COLUMNS)]
    lines += [name + "," + ",".join(f"{r[k]:.6f}" for k in METRIC_COLUMNS) for name, r in rows.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def evaluate_case(case_dir) -> dict[str, float]:
    truth = io.read_image(_f(case_dir, "fat_gt")).data
    pred = io.read_image(_f(case_dir, "labels")).data
    region = io.read_image(_f(case_dir, "region")).data
    region_pred = io.read_image(_f(case_dir, "region_pred")).data
    scores = case_metrics(truth, pred, region, region_pred)
    scores["region_dice"] = dice(region, region_pred)
    write_metrics_csv(_f(case_dir, "metrics.csv"), {Path(case_dir).name: scores})
    return scores


# -- report --------------------------------------------------------------------

@dataclass
class CaseReport:
    name: str
    severity: str
    scores: dict[str, float]

    @property
    def ff_pred(self) -> float:
        return self.scores["fat_fraction_pred"]

    @property
    def ff_truth(self) -> float:
        return self.scores["fat_fraction_truth"]


@dataclass
class PipelineReport:
    out_dir: Path
    cases: list[CaseReport]
    report_hash: str
    files: list[str] = field(default_factory=list)

    def ff_errors(self) -> dict[str, float]:
        return {c.name: abs(c.ff_pred - c.ff_truth) for c in self.cases}


def fig4_csv(cases: list[CaseReport]) -> str:
    lines = [",".join(FIG4_COLUMNS)]
    for c in cases:
        lines.append(f"{c.name},{c.severity},{c.ff_pred:.6f},{c.ff_truth:.6f},{abs(c.ff_pred - c.ff_truth):.6f},"
                     f"{c.scores['region_dice']:.6f}")
    return "\n".join(lines) + "\n"


def fig4_plot(path, cases: list[CaseReport]) -> None:
    """Grouped bars of predicted vs GT fat-infiltration index per case."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = np.arange(len(cases))
    fig, ax = plt.subplots(figsize=(1.6 * len(cases) + 2, 3.2))
    ax.bar(x - 0.18, [c.ff_pred for c in cases], 0.36, label="predicted")
    ax.bar(x + 0.18, [c.ff_truth for c in cases], 0.36, label="GT")
    ax.set_xticks(x, [f"{c.name}\n({c.severity})" if c.severity else c.name for c in cases])
    ax.set_ylabel("fat fraction")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def hash_files(root, exclude=("report.json",)) -> tuple[str, list[str]]:
    """SHA-256 over relative paths and contents of every file under ``root``."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name not in exclude)
    h = hashlib.sha256()
    for p in files:
        rel = p.relative_to(root).as_posix()
        h.update(rel.encode() + b"\0" + p.read_bytes())
    return h.hexdigest(), [p.relative_to(root).as_posix() for p in files]


# -- orchestration -------------------------------------------------------------

def default_config(out, seed: int = 0) -> dict:
    """Three severity phantoms, GT-free U-Net segmentation and DCAE_TL clustering trained in-run."""
    base = {"size": 128, "bias_amplitude": 0.2, "b1_amplitude": 0.1, "snr": 30.0}
    cases = [{"name": s, "severity": s, "spec": {**base, "imat_fraction": f, "seed": 900 + i}}
             for i, (s, f) in enumerate(SEVERITY_FRACTIONS.items())]
    train = [{**base, "imat_fraction": float(f), "seed": 100 + i, "legs": 2 if i % 3 == 2 else 1}
             for i, f in enumerate(np.linspace(0.05, 0.45, 12))]
    return {
        "out": str(out), "seed": seed, "cases": cases,
        "segmentation": {"mode": "unet", "train": {"specs": train, "epochs": 100}},
        "clustering": {"method": "dcae_tl_kmeans",
                       "train": {"specs": [{**base, "imat_fraction": 0.3, "seed": 300}], "epochs": 10}},
    }


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise io.DataError(f"{path}: not valid JSON ({exc})") from exc


@contextlib.contextmanager
def _stage(name: str, *paths):
    log.info("stage %s: %s", name, ", ".join(str(p) for p in paths))
    try:
        yield
    except Exception:
        log.error("stage %s failed; artifacts: %s", name, ", ".join(str(p) for p in paths))
        raise


def _check_config(config: dict) -> dict:
    if not isinstance(config, dict):
        raise io.ConfigError("pipeline config must be a JSON object")
    if "out" not in config:
        raise io.ConfigError("pipeline config needs an 'out' directory")
    cases = config.get("cases")
    if not cases:
        raise io.ConfigError("pipeline config needs a non-empty 'cases' list")
    names = [c.get("name") for c in cases]
    if None in names or len(set(names)) != len(names):
        raise io.ConfigError(f"case names must be present and unique, got {names}")
    seg = config.get("segmentation", {"mode": "gt"})
    if seg.get("mode", "gt") not in ("gt", "unet"):
        raise io.ConfigError(f"segmentation mode must be 'gt' or 'unet', got {seg.get('mode')!r}")
    if seg.get("mode") == "unet" and not seg.get("model") and not seg.get("train"):
        raise io.ConfigError("segmentation mode 'unet' needs a 'model' path or a 'train' section")
    cl = config.get("clustering", {"method": "kmeans_raw"})
    if cl.get("method", "kmeans_raw") not in METHODS:
        raise io.ConfigError(f"clustering method must be one of {METHODS}, got {cl.get('method')!r}")
    if cl.get("method", "kmeans_raw") != "kmeans_raw" and not cl.get("model") and not cl.get("train"):
        raise io.ConfigError(f"clustering method {cl['method']} needs a 'model' path or a 'train' section")
    for section in (seg, cl):
        model = section.get("model")
        if model and not Path(model).with_suffix(".json").exists():
            raise FileNotFoundError(f"model checkpoint not found: {model}")
    return config


def _hashable_config(config: dict) -> dict:
    # output location does not change results, so it stays out of provenance hashes
    return {k: v for k, v in config.items() if k != "out"}


def _simulate_specs(root, specs, seq, dictionary, prov, prefix):
    dirs = []
    for i, s in enumerate(specs):
        d = Path(root) / f"{prefix}{i:02d}"
        write_phantom_case(d, PhantomSpec.from_dict(s), seq, d.name, s.get("severity", ""), prov)
        fit_case(d, dictionary, prov)
        dirs.append(d)
    return dirs


def run_pipeline(config: dict) -> PipelineReport:
    """phantoms -> fitted maps -> segmentation -> clustering -> evaluation -> fat-fraction report."""
    config = _check_config(config)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed = int(config.get("seed", 0))
    prov = io.provenance("myoquant pipeline", _hashable_config(config), seed)
    seq = SequenceParams.from_dict(config["seq"]) if "seq" in config else SequenceParams()

    with _stage("dictionary", out / "dictionary.bin"):
        if config.get("dictionary"):
            dictionary = EMCDictionary.load(config["dictionary"])
        else:
            dictionary = build_dictionary(seq)
        dictionary.save(out / "dictionary.bin", prov)
        seq = dictionary.seq

    case_root = out / "cases"
    dirs = []
    for c in config["cases"]:
        d = case_root / c["name"]
        with _stage("phantom", d):
            write_phantom_case(d, PhantomSpec.from_dict(c.get("spec", {})), seq, c["name"],
                               c.get("severity", ""), prov)
        with _stage("fit", d / "echoes.raw"):
            fit_case(d, dictionary, prov, config.get("t2_fat", DEFAULT_T2_FAT))
        dirs.append(d)

    seg = config.get("segmentation", {"mode": "gt"})
    unet_path = None
    if seg.get("mode", "gt") == "unet":
        unet_path = seg.get("model")
        if not unet_path:
            unet_path = out / "models" / "unet"
            tr = seg["train"]
            with _stage("train-unet", unet_path):
                tdirs = _simulate_specs(out / "train" / "unet", tr["specs"], seq, dictionary, prov, "case")
                train_unet_on_cases(
                    tdirs, unet_path, UNetConfig(**tr.get("unet", {})),
                    TrainConfig(**{"epochs": tr.get("epochs", 100), **tr.get("train", {})}),
                    AugmentConfig(**tr["augment"]) if tr.get("augment") is not None else None,
                    tr.get("inputs", "T2+PD"), tr.get("pp", True),
                    PreprocessConfig.from_dict(config.get("preprocess", {})), seed, prov)
    for d in dirs:
        with _stage("segment", d, unet_path or "GT region"):
            segment_case(d, unet_path, prov)

    cl = config.get("clustering", {"method": "kmeans_raw"})
    method = cl.get("method", "kmeans_raw")
    dcae_path = None
    if method != "kmeans_raw":
        dcae_path = cl.get("model")
        if not dcae_path:
            dcae_path = out / "models" / "dcae"
            tr = cl["train"]
            with _stage("train-dcae", dcae_path):
                tdirs = _simulate_specs(out / "train" / "dcae", tr["specs"], seq, dictionary, prov, "case")
                dcfg = DCAEConfig(**{"epochs": tr.get("epochs", 20), **tr.get("dcae", {})})
                train_dcae_on_cases(tdirs, dcae_path, dcfg, "tl" if method == "dcae_tl_kmeans" else "mse", seed,
                                    prov=prov)
    for d in dirs:
        with _stage("cluster", d, dcae_path or method):
            cluster_case(d, method, dcae_path, seed, prov)

    reports = []
    for c, d in zip(config["cases"], dirs):
        with _stage("evaluate", d):
            reports.append(CaseReport(c["name"], c.get("severity", ""), evaluate_case(d)))
    with _stage("report", out / "fig4.csv", out / "fig4.png"):
        (out / "fig4.csv").write_text(fig4_csv(reports))
        write_metrics_csv(out / "metrics.csv", {r.name: r.scores for r in reports})
        fig4_plot(out / "fig4.png", reports)
        digest, files = hash_files(out)
        _write_json(out / "report.json", {
            "provenance": prov, "report_hash": digest, "files": files,
            "cases": [{"name": r.name, "severity": r.severity, **r.scores} for r in reports],
        })
    log.info("pipeline done: %s (hash %s)", out, digest)
    return PipelineReport(out, reports, digest, files)
