"""``myoquant`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .engine import NumericalError

log = logging.getLogger("myoquant")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
_CLUSTER_METHODS = {"kmeans": "kmeans_raw", "dcae": "dcae_kmeans", "dcae-tl": "dcae_tl_kmeans"}


# -- helpers -------------------------------------------------------------------

def _load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise io.ConfigError(f"{p}: invalid JSON ({exc})") from exc


def _build(cls, d: dict | None, **over):
    """Instantiate a config dataclass, turning bad values into ConfigError."""
    d = {**(d or {}), **{k: v for k, v in over.items() if v is not None}}
    try:
        if hasattr(cls, "from_dict"):
            return cls.from_dict(d)
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise io.ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _opt(args, name, config: dict, key: str | None = None, default=None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return config.get(key or name, default)


def _need(value, what: str):
    if value is None:
        raise io.ConfigError(f"missing required setting: {what}")
    return value


def _seed(args, config) -> int:
    return int(getattr(args, "seed", None) if getattr(args, "seed", None) is not None else config.get("seed", 0))


def _prov(args, config) -> dict:
    return io.provenance(args.command_line, config, _seed(args, config))


def _seq(config):
    from .emc import SequenceParams
    return _build(SequenceParams, config.get("seq"))


# -- commands ------------------------------------------------------------------

def cmd_phantom(args, config) -> None:
    from .phantom import PhantomSpec
    from .pipeline import write_phantom_case

    spec_d = _load_json(args.spec) if args.spec else config.get("spec", {})
    if getattr(args, "seed", None) is not None:
        spec_d = {**spec_d, "seed": args.seed}
    spec = _build(PhantomSpec, spec_d)
    out = _need(_opt(args, "out", config), "--out")
    write_phantom_case(out, spec, _seq(config), args.name, args.severity or "",
                       io.provenance(args.command_line, {**config, "spec": spec.to_dict()}, spec.seed))
    print(f"phantom written to {out}")


def cmd_simulate_dict(args, config) -> None:
    from .emc import build_dictionary, default_b1_grid, default_t2_grid

    t2 = default_t2_grid() if args.t2_min is None else np.arange(args.t2_min, args.t2_max + 1e-9, args.t2_step)
    b1 = default_b1_grid() if args.b1_min is None else np.round(
        np.arange(args.b1_min, args.b1_max + 1e-9, args.b1_step), 10)
    d = build_dictionary(_seq(config), t2, b1)
    out = Path(_need(_opt(args, "out", config), "--out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    d.save(out, _prov(args, config))
    print(f"dictionary with {d.n_entries} entries written to {out}")


def _dictionary(path):
    from .emc import EMCDictionary

    p = Path(_need(path, "--dict"))
    if not p.exists():
        raise FileNotFoundError(f"dictionary not found: {p}")
    return EMCDictionary.load(p)


def cmd_fit_t2(args, config) -> None:
    from .emc import fit_map

    d = _dictionary(_opt(args, "dict", config))
    echoes = io.read_image(_need(args.input, "--in")).data
    t2, pd, b1 = fit_map(echoes, d)
    out, prov = Path(_need(_opt(args, "out", config), "--out")), _prov(args, config)
    io.write_image(out / "t2", t2, "t2", prov)
    io.write_image(out / "pd", pd, "pd", prov)
    io.write_image(out / "b1", b1, "b1", prov)
    print(f"T2/PD/B1 maps written to {out}")


def cmd_decompose(args, config) -> None:
    from .emc import DEFAULT_T2_FAT, FAT_THRESHOLD, decompose_map, label_fat

    d = _dictionary(_opt(args, "dict", config))
    echoes = io.read_image(_need(args.input, "--in")).data
    mask = io.read_image(args.mask).data if args.mask else None
    t2_fat = float(_opt(args, "t2_fat", config, default=DEFAULT_T2_FAT))
    thr = float(_opt(args, "threshold", config, default=FAT_THRESHOLD))
    ff, t2w, _, _ = decompose_map(echoes, d, t2_fat, mask)
    fat = label_fat(ff, thr) if mask is None else label_fat(ff, thr) * mask
    out, prov = Path(_need(_opt(args, "out", config), "--out")), _prov(args, config)
    io.write_image(out / "ff", ff, "ff", prov)
    io.write_image(out / "t2w", t2w, "t2", prov)
    io.write_image(out / "fat", fat, "labels", prov)
    print(f"fat fraction maps written to {out}")


def cmd_preprocess(args, config) -> None:
    from .preprocess import PreprocessConfig, preprocess_image

    over = {"clip_percentile": args.clip}
    if args.no_bias_correction:
        over["bias_correction"] = False
    cfg = _build(PreprocessConfig, config.get("preprocess", {}), **over)
    img = io.read_image(_need(args.input, "--in"))
    ref = io.read_image(args.ref).data if args.ref else None
    out_img, mask, tf = preprocess_image(img.data, img.kind, cfg, ref, clip=True if args.clip else None)
    out = _need(_opt(args, "out", config), "--out")
    prov = _prov(args, {**config, "preprocess": cfg.to_dict()})
    io.write_image(out, out_img, img.kind if img.kind in ("t2", "pd") else "image", prov,
                   extra={"crop": tf.to_dict(), "preprocess": cfg.to_dict()})
    print(f"preprocessed image written to {out}")


def cmd_train_unet(args, config) -> None:
    from .pipeline import case_dirs, train_unet_on_cases
    from .preprocess import PreprocessConfig
    from .segmentation import AugmentConfig, TrainConfig, UNetConfig

    dirs = case_dirs(_need(_opt(args, "data", config), "--data"))
    if not dirs:
        raise io.DataError(f"no case directories under {_opt(args, 'data', config)}")
    unet = _build(UNetConfig, config.get("unet"))
    train = _build(TrainConfig, config.get("train"), epochs=args.epochs,
                   augment=True if args.augment else None)
    aug = _build(AugmentConfig, config.get("augment")) if train.augment else None
    pp = not args.no_pp and config.get("pp", True)
    out = _need(_opt(args, "out", config), "--out")
    res = train_unet_on_cases(dirs, out, unet, train, aug, _opt(args, "inputs", config, default="T2+PD"), pp,
                              _build(PreprocessConfig, config.get("preprocess")), _seed(args, config),
                              _prov(args, config))
    print(f"U-Net trained on {len(dirs)} cases, final loss {res.losses[-1]:.4f}; checkpoint {out}")


def _t2_pd(args):
    src = Path(_need(args.input if args.input else args.t2, "--in or --t2"))
    if src.is_dir():
        return io.read_image(src / "t2").data, io.read_image(src / "pd").data
    return io.read_image(src).data, io.read_image(_need(args.pd, "--pd")).data


def cmd_segment(args, config) -> None:
    from .pipeline import segment_maps

    model = _need(_opt(args, "model", config), "--model")
    t2, pd = _t2_pd(args)
    mask = segment_maps(model, t2, pd)
    out = _need(_opt(args, "out", config), "--out")
    io.write_image(out, mask, "mask", _prov(args, config))
    if args.export:
        io.export_mask(args.export, mask)
    print(f"mask with {int(mask.sum())} pixels written to {out}")


def cmd_train_dcae(args, config) -> None:
    from .clustering import DCAEConfig
    from .pipeline import case_dirs, train_dcae_on_cases

    dirs = case_dirs(_need(_opt(args, "data", config), "--data"))
    if not dirs:
        raise io.DataError(f"no case directories under {_opt(args, 'data', config)}")
    cfg = _build(DCAEConfig, config.get("dcae"), epochs=args.epochs)
    mode = _opt(args, "mode", config, default="tl")
    out = _need(_opt(args, "out", config), "--out")
    res = train_dcae_on_cases(dirs, out, cfg, mode, _seed(args, config), args.labels, _prov(args, config))
    print(f"DCAE ({mode}) trained, final loss {res.losses['total'][-1]:.4f}; checkpoint {out}")


def cmd_cluster(args, config) -> None:
    from .clustering import classify_pixels, load_dcae

    method = _CLUSTER_METHODS[_opt(args, "method", config, default="dcae-tl")]
    model = None
    if method != "kmeans_raw":
        model = load_dcae(_need(_opt(args, "model", config), "--model"))
    t2 = io.read_image(_need(args.t2, "--t2")).data
    pd = io.read_image(_need(args.pd, "--pd")).data
    region = io.read_image(_need(args.mask, "--mask")).data
    labels = classify_pixels(method, t2, pd, region, model, _seed(args, config))
    out = _need(_opt(args, "out", config), "--out")
    io.write_image(out, labels, "labels", _prov(args, config))
    print(f"labels written to {out}; IMAT fraction {float((labels == 1).sum()) / region.sum():.4f}")


def cmd_evaluate(args, config) -> None:
    from .pipeline import case_metrics, write_metrics_csv

    truth = io.read_image(_need(args.truth, "--truth")).data
    pred = io.read_image(_need(args.pred, "--pred")).data
    region = io.read_image(_need(args.region, "--region")).data
    pred_region = io.read_image(args.pred_region).data if args.pred_region else region
    scores = case_metrics(truth, pred, region, pred_region)
    out = Path(_need(_opt(args, "out", config), "--out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, {args.name: scores})
    print(out.read_text(), end="")


def cmd_table1(args, config) -> None:
    from .pipeline import case_dirs, load_case
    from .preprocess import PreprocessConfig
    from .segmentation import (VARIANTS, AugmentConfig, TrainConfig, UNetConfig, format_table1,
                               run_input_variant_harness, table1_csv)

    data = Path(_need(_opt(args, "data", config), "--data"))
    train = [load_case(d) for d in case_dirs(data / "train")]
    test = [load_case(d) for d in case_dirs(data / "test")]
    if not train or not test:
        raise io.DataError(f"{data} needs train/ and test/ case directories")
    tc = _build(TrainConfig, config.get("train"), epochs=args.epochs)
    aug = _build(AugmentConfig, config.get("augment")) if tc.augment else None
    variants = VARIANTS
    if args.variants:
        wanted = {v.strip() for v in args.variants.split(",")}
        variants = tuple(v for v in VARIANTS if f"{v[0]}{'+pp' if v[1] else ''}" in wanted)
        if not variants:
            raise io.ConfigError(f"no variant matches {args.variants!r}; use e.g. T2+PD+pp,T2,PD+pp")
    res = run_input_variant_harness(train, test, _build(UNetConfig, config.get("unet")), tc, aug,
                                    _build(PreprocessConfig, config.get("preprocess")), _seed(args, config),
                                    variants)
    out = Path(_need(_opt(args, "out", config), "--out"))
    out.mkdir(parents=True, exist_ok=True)
    text = format_table1(res)
    (out / "table1.md").write_text(text + "\n")
    (out / "table1.csv").write_text(table1_csv(res))
    print(text)


def cmd_pipeline(args, config) -> None:
    from .pipeline import default_config, fig4_csv, run_pipeline

    if not config:
        config = default_config(_need(args.out, "--out or --config"))
    if args.out:
        config = {**config, "out": args.out}
    if getattr(args, "seed", None) is not None:
        config = {**config, "seed": args.seed}
    rep = run_pipeline(config)
    print(fig4_csv(rep.cases), end="")
    print(f"report hash {rep.report_hash}")


# -- parser --------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS/OpenMP thread limit")
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON configuration file")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="myoquant", parents=[common],
                                     description="Muscle/fat quantification on multi-echo T2 phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "generate a phantom case directory")
    p.add_argument("--spec", help="phantom spec JSON")
    p.add_argument("--out")
    p.add_argument("--name")
    p.add_argument("--severity")

    p = add("simulate-dict", cmd_simulate_dict, "simulate an EMC dictionary")
    p.add_argument("--out")
    for k, (hi, st) in {"t2": (300.0, 2.0), "b1": (1.3, 0.05)}.items():
        p.add_argument(f"--{k}-min", type=float)
        p.add_argument(f"--{k}-max", type=float, default=hi)
        p.add_argument(f"--{k}-step", type=float, default=st)

    for name, func, help_ in (("fit-t2", cmd_fit_t2, "dictionary fit of an echo stack"),
                              ("decompose", cmd_decompose, "two-compartment fat fraction fit")):
        p = add(name, func, help_)
        p.add_argument("--dict")
        p.add_argument("--in", dest="input")
        p.add_argument("--out")
        if name == "decompose":
            p.add_argument("--mask")
            p.add_argument("--t2-fat", type=float)
            p.add_argument("--threshold", type=float)

    p = add("preprocess", cmd_preprocess, "crop, bias-correct, clip and normalize one map")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    p.add_argument("--ref", help="image used for the leg mask (default: the input)")
    p.add_argument("--no-bias-correction", action="store_true")
    p.add_argument("--clip", type=float)

    p = add("train-unet", cmd_train_unet, "train the segmentation U-Net on case directories")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--inputs", choices=("T2+PD", "T2", "PD"))
    p.add_argument("--no-pp", action="store_true")
    p.add_argument("--augment", action="store_true")

    p = add("segment", cmd_segment, "predict a muscle-region mask")
    p.add_argument("--model")
    p.add_argument("--in", dest="input", help="case directory or T2 image")
    p.add_argument("--t2")
    p.add_argument("--pd")
    p.add_argument("--out")
    p.add_argument("--export", help="also write an 8-bit .pgm/.png of the mask")

    p = add("train-dcae", cmd_train_dcae, "train the patch autoencoder")
    p.add_argument("--mode", choices=("tl", "mse"))
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--labels", default="fat", help="label map name used for triplets")

    p = add("cluster", cmd_cluster, "classify muscle-region pixels into muscle/IMAT")
    p.add_argument("--method", choices=tuple(_CLUSTER_METHODS))
    p.add_argument("--model")
    p.add_argument("--t2")
    p.add_argument("--pd")
    p.add_argument("--mask")
    p.add_argument("--out")

    p = add("evaluate", cmd_evaluate, "score predicted labels against GT")
    p.add_argument("--truth")
    p.add_argument("--pred")
    p.add_argument("--region")
    p.add_argument("--pred-region")
    p.add_argument("--name", default="case")
    p.add_argument("--out")

    p = add("table1", cmd_table1, "input-variant segmentation harness")
    p.add_argument("--data", help="directory with train/ and test/ case directories")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--variants", help="comma list such as T2+PD+pp,T2+PD,PD+pp (default: all six)")

    p = add("pipeline", cmd_pipeline, "end-to-end run producing the fat-fraction report")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.command_line = " ".join(["myoquant", *argv])
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load_json(args.config) if getattr(args, "config", None) else {}
        threads = getattr(args, "threads", None)
        if threads is not None:
            if threads < 1:
                raise io.ConfigError(f"--threads must be positive, got {threads}")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                args.func(args, config)
        else:
            args.func(args, config)
    except io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
