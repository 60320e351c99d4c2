"""Command-line pipeline: synthesize -> prepare -> train -> evaluate.

All commands read one JSON config (template from ``cardioscreen init``) and
are idempotent for a fixed config+seed. Exit codes: 0 success, 2 config
error, 3 data error, 4 model error, 5 evaluation error.
"""

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from . import dataset as ds
from . import dsp, evalx, models, synth
from .neuralnet import ShapeError
from .signal_io import FormatError

log = logging.getLogger("cardioscreen")


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 7,
    "data_dir": "data",
    "out_dir": "runs",
    "sampling": {"pcg_fs": 1000, "ecg_fs": 300},
    "scales": {
        "pcg": [7.0, 130.0],
        "ecg": [20.0, 500.0],
        "count": 96,
        "cmor_bandwidth": 1.5,
        "cmor_center": 1.0,
    },
    "windows": {"pcg_seconds": 3.5, "ecg_seconds": 3.3},
    "image": {"height": 64, "width": 128},
    "split_ratios": [0.7, 0.1, 0.2],
    "train": {
        "lr": 0.001,
        "batch_size": 20,
        "epochs": 15,
        "patience": 0,
        "dropout": 0.0,
        "dilation": 1,
    },
    "threshold_policy": "optimal_gmean",
    "synthesize": {
        "records": 40,
        "duration_seconds": 11.0,
        "abnormal_fraction": 0.5,
        "pcg_fs": 2000,
        "ecg_fs": 500,
    },
}


def _merge(defaults, override, path=""):
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    return _merge(DEFAULT_CONFIG, user)


def _build_config(cfg: dict, out_dir: Path) -> ds.BuildConfig:
    return ds.BuildConfig(
        out_dir=out_dir,
        seed=cfg["seed"],
        pcg_fs=cfg["sampling"]["pcg_fs"],
        ecg_fs=cfg["sampling"]["ecg_fs"],
        pcg_scale_range=tuple(cfg["scales"]["pcg"]),
        ecg_scale_range=tuple(cfg["scales"]["ecg"]),
        n_scales=cfg["scales"]["count"],
        cmor_bandwidth=cfg["scales"]["cmor_bandwidth"],
        cmor_center=cfg["scales"]["cmor_center"],
        pcg_window_s=cfg["windows"]["pcg_seconds"],
        ecg_window_s=cfg["windows"]["ecg_seconds"],
        image_height=cfg["image"]["height"],
        image_width=cfg["image"]["width"],
        ratios=tuple(cfg["split_ratios"]),
    )


def cmd_init(args) -> int:
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(DEFAULT_CONFIG, fh, indent=2)
        fh.write("\n")
    print(f"wrote default config to {out}")
    return 0


def cmd_synthesize(args) -> int:
    cfg = load_config(args.config)
    s = cfg["synthesize"]
    scfg = synth.SynthConfig(
        n_records=args.records or s["records"],
        seed=cfg["seed"],
        duration_s=s["duration_seconds"],
        abnormal_fraction=s["abnormal_fraction"],
        pcg_fs=s["pcg_fs"],
        ecg_fs=s["ecg_fs"],
    )
    out_dir = Path(args.out_dir or cfg["data_dir"])
    summary = synth.synthesize_corpus(scfg, out_dir)
    print(
        f"synthesized {summary['n_records']} records "
        f"({summary['n_normal']} normal / {summary['n_abnormal']} abnormal) "
        f"into {out_dir}"
    )
    print(f"abnormal phenotypes: {summary['phenotypes']}")
    return 0


def cmd_prepare(args) -> int:
    cfg = load_config(args.config)
    manifest = Path(args.manifest or Path(cfg["data_dir"]) / "manifest.csv")
    if not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    out_dir = Path(args.out or Path(cfg["out_dir"]) / f"setting{args.setting}")
    out_dir.mkdir(parents=True, exist_ok=True)
    build_cfg = _build_config(cfg, out_dir)
    builder = {1: ds.build_setting1, 2: ds.build_setting2, 3: ds.build_setting3}[args.setting]
    summary = builder(manifest, build_cfg)
    print(f"setting {args.setting}: {summary['n_samples']} samples "
          f"from {summary['n_records']} records -> {out_dir}")
    for split in ds.SPLITS:
        c = summary["counts"][split]
        print(f"  {split}: normal={c[0]} abnormal={c[1]}")
    if summary["skipped_records"]:
        print(f"  skipped (no landmarks): {', '.join(summary['skipped_records'])}")
    if summary["cache_hits"]:
        print(f"  cache hit: {summary['cache_hits']} scalograms reused")
    return 0


def _train_config(cfg: dict, epochs=None) -> models.TrainConfig:
    t = cfg["train"]
    return models.TrainConfig(
        lr=t["lr"],
        batch_size=t["batch_size"],
        epochs=t["epochs"] if epochs is None else epochs,
        seed=cfg["seed"],
        patience=t["patience"],
    )


def _dataset_entries(dataset_dir: Path):
    samples = dataset_dir / "samples.csv"
    if not samples.is_file():
        raise ConfigError(f"prepared dataset not found: {samples}")
    return ds.read_samples_csv(samples)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset_dir = Path(args.dataset)
    entries = _dataset_entries(dataset_dir)
    modalities = {"pcg": ["pcg"], "ecg": ["ecg"], "hybrid": ["pcg", "ecg"]}[args.model]
    train_entries = [e for e in entries if e.split == "train"]
    if args.balanced:
        train_entries = ds.balance(train_entries, cfg["seed"], unit="sample")
        log.info("balanced training split to %d samples", len(train_entries))
    train_data = ds.load_split(dataset_dir, "train", modalities, entries=train_entries)
    val_data = ds.load_split(dataset_dir, "val", modalities, entries=entries)
    shape = (1, cfg["image"]["height"], cfg["image"]["width"])
    t = cfg["train"]
    if args.model == "hybrid":
        model = models.build_hybrid(
            shape, shape, seed=cfg["seed"], dropout=t["dropout"], dilation=t["dilation"]
        )
        if args.from_pcg or args.from_ecg:
            if not (args.from_pcg and args.from_ecg):
                raise ConfigError("hybrid transplant needs both --from-pcg and --from-ecg")
            pcg_model = models.load_checkpoint(args.from_pcg)
            ecg_model = models.load_checkpoint(args.from_ecg)
            model = models.transplant(model, pcg_model, ecg_model)
            n_tensors = sum(1 for k in model.params if k.startswith("path."))
            log.info("transplanted %d path tensors from pretrained models", n_tensors)
        else:
            log.info("training hybrid from scratch (no transplant)")
    else:
        if args.from_pcg or args.from_ecg:
            raise ConfigError("--from-pcg/--from-ecg apply to the hybrid model only")
        model = models.build_single(
            args.model, shape, seed=cfg["seed"], dropout=t["dropout"], dilation=t["dilation"]
        )
    trained, history = models.train(model, train_data, val_data, _train_config(cfg, args.epochs))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    models.save_checkpoint(trained, out_dir / "model.cfck")
    with open(out_dir / "history.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    final = history[-1] if history else {}
    print(
        f"trained {args.model} for {len(history)} epochs "
        f"(final loss {final.get('train_loss', float('nan')):.4f}, "
        f"best val G-mean {max((h.get('val_gmean', 0.0) for h in history), default=0.0):.4f}) "
        f"-> {out_dir / 'model.cfck'}"
    )
    return 0


def _scored_split(model, dataset_dir, entries, split: str, balanced: bool, seed: int):
    chosen = [e for e in entries if e.split == split]
    if balanced:
        chosen = ds.balance(chosen, seed, unit="record")
    modalities = list(model.paths.keys())
    data = ds.load_split(dataset_dir, split, modalities, entries=chosen)
    if len(data) == 0:
        raise evalx.EvaluationError(f"split {split!r} is empty")
    scores = models.predict(model, data.inputs)
    return [
        evalx.ScoredSample(sid, rid, int(lbl), float(s))
        for sid, rid, lbl, s in zip(data.sample_ids, data.record_ids, data.labels, scores)
    ]


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    dataset_dir = Path(args.dataset)
    entries = _dataset_entries(dataset_dir)
    model = models.load_checkpoint(ckpt)
    policy = args.threshold_policy or cfg["threshold_policy"]
    if policy == "default_0.5":
        threshold = 0.5
    elif policy == "optimal_gmean":
        val_scored = _scored_split(model, dataset_dir, entries, "val", args.balanced, cfg["seed"])
        threshold = evalx.optimal_threshold(val_scored)
    else:
        raise ConfigError(f"unknown threshold policy {policy!r}")
    scored = _scored_split(model, dataset_dir, entries, args.split, args.balanced, cfg["seed"])
    mode = f"{args.mode}_wise"
    report = evalx.evaluate(scored, threshold, mode)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["threshold_policy"] = policy
    payload["split"] = args.split
    payload["n_scored"] = len(scored)
    with open(out_dir / "report.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    evalx.write_roc_csv(report.roc, out_dir / "roc.csv")
    evalx.write_roc_svg(report.roc, out_dir / "roc.svg")
    m = payload["metrics_percent"]
    print(
        f"{mode} @ threshold {report.threshold:.4f} ({policy}): "
        f"Sen={m['sensitivity']:.2f} Spe={m['specificity']:.2f} "
        f"Acc={m['accuracy']:.2f} AUC={m['auc']:.2f} G-mean={m['gmean']:.2f}"
    )
    print(f"report -> {out_dir / 'report.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardioscreen",
        description="Dual-modality (PCG+ECG) cardiac abnormality screening pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a default JSON config")
    p.add_argument("--out", default="config.json")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("synthesize", help="generate a synthetic labeled corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--records", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("prepare", help="build a dataset (scalogram cache + index)")
    p.add_argument("--config", required=True)
    p.add_argument("--setting", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--model", choices=("pcg", "ecg", "hybrid"), required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--from-pcg", default=None, help="PCG-only checkpoint to transplant")
    p.add_argument("--from-ecg", default=None, help="ECG-only checkpoint to transplant")
    p.add_argument("--balanced", action="store_true", help="undersample the train split")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("sample", "record"), default="record")
    p.add_argument("--split", choices=ds.SPLITS, default="test")
    p.add_argument("--threshold-policy", choices=("default_0.5", "optimal_gmean"), default=None)
    p.add_argument("--balanced", action="store_true",
                   help="record-level undersampling of the evaluated split")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="[%(asctime)s] %(levelname)s %(message)s", stream=sys.stderr
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ds.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (models.ModelError, ShapeError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 4
    except evalx.EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
