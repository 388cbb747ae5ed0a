"""Operator command line: dataset generation, training, evaluation,
prediction export, the training-fraction sweep, ensembling, and the
disparity probe.

Every command takes --config <json> plus individual flags (flags win), runs
deterministically from --seed, and writes its resolved configuration next to
its outputs. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import os

# honor the worker-count cap before numpy spins up its thread pools
if os.environ.get("SBEV_THREADS"):
    _cap = os.environ["SBEV_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

import argparse
import csv
import io as _stringio
import json
import sys
from dataclasses import asdict, fields

import numpy as np

from . import io as dio
from . import metrics as mt
from . import scenesim as sim
from .errors import DataError, NumericError
from .network import load_checkpoint
from .training import (RunConfig, evaluate, predict_probs,
                       pseudo_lidar_planes_for, scene_geometry_from, seed_for,
                       train, write_run_config)

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


_SCALARS = {"int": int, "float": float, "str": str}


def _add_config_flags(p: argparse.ArgumentParser, names) -> None:
    for name in names:
        t = _FIELD_TYPES[name]
        flag = "--" + name.replace("_", "-")
        if t == "bool":
            p.add_argument(flag, action="store_true", default=None)
        elif t in _SCALARS:
            p.add_argument(flag, type=_SCALARS[t], default=None)
        else:  # list-valued: accept space-separated values
            p.add_argument(flag, nargs="+", default=None)
    p.add_argument("--config", type=str, default=None,
                   help="JSON file of RunConfig fields; explicit flags override")


MODEL_FLAGS = ("channels", "feat_downsample", "planes", "max_disparity",
               "volume_channels", "reduced_channels", "distill_channels",
               "unet_width", "unet_depth")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stereobev",
                                 description="stereo bird's-eye-view layout estimation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic stereo dataset")
    _add_config_flags(p, ("seed", "out", "n_train", "n_test", "train_fraction", "force",
                          "image_w", "image_h", "focal", "baseline", "cam_height",
                          "bev_x_half", "bev_y_min", "bev_y_max", "grid_nx", "grid_ny"))

    p = sub.add_parser("train", help="train one model variant")
    _add_config_flags(p, ("seed", "out", "data", "variant", "epochs", "batch_size",
                          "lr", "train_fraction", "snapshot_every") + MODEL_FLAGS)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_config_flags(p, ("out", "data", "checkpoint", "variant", "thresholds",
                          "with_pixel_ap"))

    p = sub.add_parser("predict", help="export BEV prediction images")
    _add_config_flags(p, ("out", "data", "checkpoint", "n_predict"))

    p = sub.add_parser("sweep-fraction", help="train at several training-set fractions")
    _add_config_flags(p, ("seed", "out", "data", "variant", "epochs", "batch_size",
                          "lr", "fractions") + MODEL_FLAGS)

    p = sub.add_parser("ensemble", help="evaluate an averaged model ensemble")
    _add_config_flags(p, ("out", "data", "checkpoints", "thresholds"))

    p = sub.add_parser("probe", help="frozen-trunk disparity probe of checkpoints")
    _add_config_flags(p, ("seed", "out", "data", "checkpoints", "probe_epochs",
                          "probe_train_samples"))
    return ap


def resolve_config(args: argparse.Namespace) -> tuple[RunConfig, set]:
    cfg = RunConfig()
    explicit = set()
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read config {args.config}: {e}") from e
        for k, v in doc.items():
            if k == "command":
                continue
            if not hasattr(cfg, k):
                raise DataError(f"config {args.config}: unknown field {k!r}")
            setattr(cfg, k, v)
            explicit.add(k)
    for name in _FIELD_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            if _FIELD_TYPES[name].startswith("list") or name in ("thresholds", "fractions", "checkpoints"):
                conv = float if name in ("thresholds", "fractions") else str
                v = [conv(x) for x in v]
            setattr(cfg, name, v)
            explicit.add(name)
    return cfg, explicit


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: RunConfig, explicit: set) -> None:
    out = cfg.out
    if os.path.isdir(out) and os.listdir(out) and not cfg.force:
        raise DataError(f"output directory {out} is not empty; pass --force to overwrite")
    rig, plane, layout = scene_geometry_from(cfg)
    params = sim.SceneParams(x_range=(layout.x_min, layout.x_max),
                             y_range=(max(layout.y_min + 2.0, 6.0), layout.y_max - 1.0))
    n_train = max(1, int(round(cfg.n_train * cfg.train_fraction)))
    sim.make_dataset(n_train, cfg.seed, rig, plane, layout, out, split="train",
                     params=params)
    sim.make_dataset(cfg.n_test, cfg.seed + cfg.n_train, rig, plane, layout, out,
                     split="test", params=params)
    write_run_config(cfg, out, "gen-data")
    print(f"wrote {n_train} train + {cfg.n_test} test samples under {out}")


def cmd_train(cfg: RunConfig, explicit: set) -> None:
    os.makedirs(cfg.out, exist_ok=True)
    write_run_config(cfg, cfg.out, "train")
    res = train(cfg)
    print(f"checkpoint: {res.checkpoint}")
    print(f"final test mIoU: {res.final_miou:.4f}")


def _load_eval_inputs(cfg: RunConfig, explicit: set):
    model = load_checkpoint(cfg.checkpoint,
                            expect_variant=cfg.variant if "variant" in explicit else None)
    man = dio.read_manifest(os.path.join(cfg.data, "test.json"))
    if man.layout != model.layout:
        raise DataError("checkpoint layout disagrees with the dataset manifest")
    return model, man, dio.load_samples(man)


def cmd_eval(cfg: RunConfig, explicit: set) -> None:
    model, man, samples = _load_eval_inputs(cfg, explicit)
    res = evaluate(model, samples, thresholds=cfg.thresholds, with_ap=cfg.with_pixel_ap)
    os.makedirs(cfg.out, exist_ok=True)
    write_run_config(cfg, cfg.out, "eval")
    mt.report_to_csv(os.path.join(cfg.out, "report.csv"), res.report, man.classes)
    doc = json.loads(mt.report_to_json(res.report, man.classes))
    if res.per_class_ap is not None:
        doc["per_class_ap"] = {n: (None if np.isnan(v) else v)
                               for n, v in zip(man.classes, res.per_class_ap)}
    dio.atomic_write_text(os.path.join(cfg.out, "report.json"), json.dumps(doc, indent=1))
    print(f"test mIoU: {res.report.miou:.4f}  ({res.report.n_visible} visible cells)")
    for n, v in zip(man.classes, res.report.per_class_iou):
        print(f"  {n:<10s} {v:.4f}" if not np.isnan(v) else f"  {n:<10s} undefined")


def cmd_predict(cfg: RunConfig, explicit: set) -> None:
    model, man, samples = _load_eval_inputs(cfg, explicit)
    os.makedirs(cfg.out, exist_ok=True)
    write_run_config(cfg, cfg.out, "predict")
    palette = np.array(man.palette)
    pl = pseudo_lidar_planes_for(samples, model) if model.variant == "pseudo_lidar" else None

    def paint(classes, mask):
        img = palette[classes].transpose(2, 0, 1)
        img = np.where(mask[None].astype(bool), img, img * 0.25)  # invisible cells dark
        return np.flip(img, axis=1)  # far side up for viewing

    for s in samples[:cfg.n_predict]:
        pred = predict_probs(model, s, pl).argmax(axis=0)
        dio.write_ppm(os.path.join(cfg.out, f"{s.id}_pred.ppm"), paint(pred, s.visibility))
        dio.write_ppm(os.path.join(cfg.out, f"{s.id}_gt.ppm"), paint(s.gt, s.visibility))
        dio.write_pgm(os.path.join(cfg.out, f"{s.id}_mask.pgm"),
                      np.flip(s.visibility * np.uint8(255), axis=0))
    print(f"wrote {min(cfg.n_predict, len(samples))} prediction triplets under {cfg.out}")


def cmd_sweep_fraction(cfg: RunConfig, explicit: set) -> None:
    os.makedirs(cfg.out, exist_ok=True)
    write_run_config(cfg, cfg.out, "sweep-fraction")
    rows = [("fraction", "miou")]
    for frac in cfg.fractions:
        sub = RunConfig(**asdict(cfg))
        sub.train_fraction = float(frac)
        sub.out = os.path.join(cfg.out, f"frac_{frac}")
        os.makedirs(sub.out, exist_ok=True)
        write_run_config(sub, sub.out, "train")
        res = train(sub, log_fn=None)
        rows.append((frac, res.final_miou))
        print(f"fraction {frac}: mIoU {res.final_miou:.4f}")
    buf = _stringio.StringIO()
    csv.writer(buf).writerows(rows)
    dio.atomic_write_text(os.path.join(cfg.out, "sweep.csv"), buf.getvalue())


def cmd_ensemble(cfg: RunConfig, explicit: set) -> None:
    if len(cfg.checkpoints) < 2:
        raise DataError("ensemble needs at least 2 member checkpoints")
    models = [load_checkpoint(p) for p in cfg.checkpoints]
    base = models[0]
    for m, p in zip(models[1:], cfg.checkpoints[1:]):
        if m.config != base.config or m.layout != base.layout:
            raise DataError(f"ensemble member {p} has a different configuration")
    man = dio.read_manifest(os.path.join(cfg.data, "test.json"))
    if man.layout != base.layout:
        raise DataError("checkpoint layout disagrees with the dataset manifest")
    samples = dio.load_samples(man)

    accs = [mt.IouAccumulator(man.layout.n_classes) for _ in models]
    ens_acc = mt.IouAccumulator(man.layout.n_classes)
    for s in samples:
        probs = [predict_probs(m, s) for m in models]
        for acc, p in zip(accs, probs):
            acc.update(p.argmax(axis=0), s.gt, s.visibility)
        ens_acc.update(mt.ensemble_average(probs).argmax(axis=0), s.gt, s.visibility)
    member_mious = [a.report().miou for a in accs]
    ens = ens_acc.report()
    os.makedirs(cfg.out, exist_ok=True)
    write_run_config(cfg, cfg.out, "ensemble")
    doc = {
        "member_mious": member_mious,
        "member_miou_mean": float(np.mean(member_mious)),
        "member_miou_std": float(np.std(member_mious)),
        "ensemble_miou": ens.miou,
        "per_class_iou": {n: (None if np.isnan(v) else v)
                          for n, v in zip(man.classes, ens.per_class_iou)},
    }
    dio.atomic_write_text(os.path.join(cfg.out, "ensemble.json"), json.dumps(doc, indent=1))
    print(f"members: {[f'{v:.4f}' for v in member_mious]} (std {doc['member_miou_std']:.4f})")
    print(f"ensemble mIoU: {ens.miou:.4f}")


def cmd_probe(cfg: RunConfig, explicit: set) -> None:
    if not cfg.checkpoints:
        raise DataError("probe needs at least one checkpoint")
    train_man = dio.read_manifest(os.path.join(cfg.data, "train.json"))
    test_man = dio.read_manifest(os.path.join(cfg.data, "test.json"))
    n_train = min(cfg.probe_train_samples, len(train_man.samples))
    train_samples = dio.load_samples(train_man)[:n_train]
    test_samples = dio.load_samples(test_man)
    rows = [("checkpoint", "three_px_error", "constant_baseline_error")]
    for path in cfg.checkpoints:
        model = load_checkpoint(path)
        res = mt.disparity_probe(model, train_samples, test_samples,
                                 epochs=cfg.probe_epochs,
                                 seed=int(seed_for(cfg.seed, 3).integers(2 ** 31)))
        rows.append((path, res.error, res.baseline_error))
        print(f"{path}: 3px error {res.error:.4f} (constant baseline {res.baseline_error:.4f})")
    os.makedirs(cfg.out, exist_ok=True)
    write_run_config(cfg, cfg.out, "probe")
    buf = _stringio.StringIO()
    csv.writer(buf).writerows(rows)
    dio.atomic_write_text(os.path.join(cfg.out, "probe.csv"), buf.getvalue())


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "sweep-fraction": cmd_sweep_fraction,
    "ensemble": cmd_ensemble,
    "probe": cmd_probe,
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg, explicit = resolve_config(args)
        HANDLERS[args.command](cfg, explicit)
        return 0
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
