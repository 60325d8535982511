"""Command-line entry point: ``msgaze <command> [options]``.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
failures at run time. Failures print one line ``error: <category>: <message>``
on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .errors import ConfigError, MsgazeError, OutputExistsError

log = logging.getLogger("msgaze")


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({
            "ts": round(record.created, 3),
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
        })


def setup_logging(level: str = "INFO", as_json: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if as_json else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def _prepare_out(path, overwrite: bool, is_dir: bool) -> Path:
    """Refuse to clobber existing outputs unless ``--overwrite`` was given."""
    path = Path(path)
    exists = path.exists() and (not path.is_dir() or any(path.iterdir()))
    if exists and not overwrite:
        raise OutputExistsError(f"{path} exists; pass --overwrite to replace it")
    if exists and overwrite:
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _resolve(args, flags: dict) -> dict:
    flags = {sec: {k: v for k, v in vals.items() if v is not None} for sec, vals in flags.items()}
    flags.setdefault("global", {})
    if args.seed is not None:
        flags["global"]["seed"] = args.seed
    if args.deterministic is not None:
        flags["global"]["deterministic"] = args.deterministic
    cfg = cfgmod.resolve(flags, args.config)
    from .aeri import set_deterministic
    set_deterministic(cfg["global"]["deterministic"])
    return cfg


def _stamp(cfg, out, is_dir, command) -> str:
    digest = cfgmod.write_resolved(cfg, cfgmod.resolved_path(out, is_dir), command)
    log.info("config hash %s", digest)
    print(f"config_hash {digest}")
    return digest


# ---------------------------------------------------------------- commands


def cmd_synth_gen(args) -> int:
    from .synth import SceneRanges, generate_dataset

    cfg = _resolve(args, {"synth": {"n": args.n, "n_subjects": args.subjects, "val_fraction": args.val_fraction,
                                    "write_masks": False if args.no_masks else None}})
    out = _prepare_out(args.out, args.overwrite, is_dir=True)
    s = cfg["synth"]
    manifest = generate_dataset(s["n"], SceneRanges.from_dict(s["ranges"]), cfg["global"]["seed"], out,
                                n_subjects=s["n_subjects"], val_fraction=s["val_fraction"],
                                write_masks=s["write_masks"])
    _stamp(cfg, out, True, "synth-gen")
    print(json.dumps(manifest.counts))
    return 0


def cmd_train_aeri(args) -> int:
    from . import aeri

    cfg = _resolve(args, {"aeri": {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
                                   "width_multiplier": args.width_multiplier}})
    out = _prepare_out(args.out, args.overwrite, is_dir=False)
    acfg = cfgmod.aeri_cfg(cfg)
    ckpt = aeri.train_aeri(args.data, acfg)
    digest = _stamp(cfg, out, False, "train-aeri")
    ckpt.provenance.update({"config_hash": digest, "data": str(args.data), "version": __version__})
    ckpt.save(out)
    last = ckpt.log[-1] if ckpt.log else {}
    print(json.dumps({"checkpoint": str(out), "weights_sha256": ckpt.checksum, **last}))
    return 0


def cmd_export_masks(args) -> int:
    from . import aeri, maskgen
    from .checkpoint import Checkpoint
    from .data import load_image_dir

    cfg = _resolve(args, {"aeri": {"threshold": args.threshold}})
    out = _prepare_out(args.out, args.overwrite, is_dir=True)
    ckpt = Checkpoint.load(args.ckpt, kind=aeri.KIND)
    data = load_image_dir(args.images)
    masks = aeri.export_masks(ckpt, data.images, cfg["aeri"]["threshold"])
    for sid, m in zip(data.ids, masks):
        maskgen.save_mask_pair(maskgen.MaskPair(m[0], m[1]), out, sid)
    (out / "masks.json").write_text(json.dumps({
        "aeri_checksum": ckpt.checksum, "threshold": cfg["aeri"]["threshold"], "count": len(data.ids),
    }, indent=1))
    _stamp(cfg, out, True, "export-masks")
    print(json.dumps({"masks": len(data.ids), "out": str(out)}))
    return 0


def _split_or_all(data_dir, split, mask_dir=None):
    from .data import load_dataset
    from .synth import DatasetManifest

    manifest = DatasetManifest.load(data_dir)
    if split and manifest.split(split):
        return load_dataset(manifest, split=split, mask_dir=mask_dir)
    return load_dataset(manifest, mask_dir=mask_dir)


def cmd_train_gaze(args) -> int:
    from . import aeri, gazenet
    from .data import load_dataset
    from .synth import DatasetManifest

    cfg = _resolve(args, {"gaze": {"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
                                   "widen_factor": args.widen_factor, "kind": args.kind,
                                   "max_steps": args.max_steps}})
    out = _prepare_out(args.out, args.overwrite, is_dir=False)
    gcfg = cfgmod.gaze_cfg(cfg)
    manifest = DatasetManifest.load(args.data)
    has_split = bool(manifest.split("train"))
    train = load_dataset(manifest, split="train" if has_split else None, mask_dir=args.masks)
    val = load_dataset(manifest, split="val", mask_dir=args.masks) if has_split and manifest.split("val") else None
    net = aeri.load_aeri(args.aeri_ckpt)
    ckpt = gazenet.train_gaze(train, gcfg, aeri=net, val=val)
    digest = _stamp(cfg, out, False, "train-gaze")
    ckpt.provenance.update({"config_hash": digest, "data": str(args.data), "masks": str(args.masks),
                            "version": __version__})
    ckpt.save(out)
    print(json.dumps({"checkpoint": str(out), **(ckpt.log[-1] if ckpt.log else {})}))
    return 0


def cmd_predict(args) -> int:
    from . import gazenet
    from .data import load_image_dir

    cfg = _resolve(args, {})
    out = _prepare_out(args.out, args.overwrite, is_dir=False)
    data = load_image_dir(args.images)
    masks = None
    if args.masks:
        from . import maskgen
        masks = np.stack([maskgen.load_mask_pair(args.masks, i).stack() for i in data.ids])
    pred = gazenet.predict_gaze(args.ckpt, data.images, masks)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["id", "pitch_pred", "yaw_pred"] + (["pitch_gt", "yaw_gt"] if data.gaze is not None else [])
        w.writerow(header)
        for i, sid in enumerate(data.ids):
            row = [sid, repr(float(pred[i, 0])), repr(float(pred[i, 1]))]
            if data.gaze is not None:
                row += [repr(float(data.gaze[i, 0])), repr(float(data.gaze[i, 1]))]
            w.writerow(row)
    _stamp(cfg, out, False, "predict")
    print(json.dumps({"predictions": len(data.ids), "out": str(out)}))
    return 0


def cmd_eval(args) -> int:
    from . import harness

    cfg = _resolve(args, {})
    out = _prepare_out(args.out, args.overwrite, is_dir=False)
    data = _split_or_all(args.data, args.split, args.masks)
    digest = _stamp(cfg, out, False, "eval")
    report = harness.evaluate(args.ckpt, data, config_hash=digest)
    report.to_csv(out)
    agg = report.aggregates()
    print(json.dumps({"mean_error_deg": agg["mean_error"], "fold_std": agg["fold_std"], "n": agg["n_rows"]}))
    return 0


def cmd_robustness(args) -> int:
    from . import harness

    cfg = _resolve(args, {"harness": {"bins": args.bins}})
    out = _prepare_out(args.out, args.overwrite, is_dir=False)
    report = harness.EvalReport.from_csv(args.report)
    png = out.with_suffix(".png") if not args.no_plot else None
    table = harness.robustness_curve(report, cfg["harness"]["bins"], out_csv=out, out_png=png)
    _stamp(cfg, out, False, "robustness")
    print(json.dumps({"bins": len(table), "out": str(out)}))
    return 0


def cmd_heatmap(args) -> int:
    from . import harness

    cfg = _resolve(args, {})
    out = Path(args.out)
    for axis in ("pitch", "yaw"):
        _prepare_out(out.with_name(f"{out.stem}_{axis}.png"), args.overwrite, is_dir=False)
    report = harness.EvalReport.from_csv(args.report)
    res = harness.heatmap_export(report, out, bins=args.bins)
    _stamp(cfg, out, False, "heatmap")
    print(json.dumps({k: str(v) for k, v in res["paths"].items()}))
    return 0


def cmd_ablate(args) -> int:
    from . import harness

    kinds = [k for k in args.kinds.split(",") if k] if args.kinds else None
    cfg = _resolve(args, {"harness": {"kinds": kinds, "protocol": args.protocol, "k": args.k,
                                      "augment_ablation": True if args.augment_ablation else None},
                          "gaze": {"epochs": args.epochs, "widen_factor": args.widen_factor,
                                   "max_steps": args.max_steps}})
    out = _prepare_out(args.out, args.overwrite, is_dir=False)
    h = cfg["harness"]
    index = harness.DatasetIndex.from_manifest(args.data)
    if h["protocol"] == "loso":
        plan = harness.split_loso(index)
    else:
        plan = harness.split_kfold_subjects(index, h["k"], cfg["global"]["seed"])
    aeri_data = args.aeri_data or args.data
    table = harness.ablation_suite(index, plan, h["kinds"], cfgmod.gaze_cfg(cfg), args.aeri_ckpt,
                                   augment_ablation=h["augment_ablation"], aeri_data=aeri_data,
                                   aeri_cfg=cfgmod.aeri_cfg(cfg), out_csv=out)
    _stamp(cfg, out, False, "ablate")
    print(json.dumps(table))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msgaze", description="Synthetic eye data, mask isolation and gaze estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-json", action="store_true", help="line-delimited JSON logs on stderr")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--config", type=Path, help="TOML file; its values override flags")
        sp.add_argument("--seed", type=int)
        det = sp.add_mutually_exclusive_group()
        det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
        det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
        sp.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        return sp

    sp = add("synth-gen", cmd_synth_gen, "render a synthetic dataset")
    sp.add_argument("--n", type=int)
    sp.add_argument("--subjects", type=int)
    sp.add_argument("--val-fraction", type=float)
    sp.add_argument("--no-masks", action="store_true")
    sp.add_argument("--out", required=True, type=Path)

    sp = add("train-aeri", cmd_train_aeri, "train the mask network on a synthetic dataset")
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--width-multiplier", type=float)

    sp = add("export-masks", cmd_export_masks, "binarized masks from a trained mask network")
    sp.add_argument("--ckpt", required=True, type=Path)
    sp.add_argument("--images", required=True, type=Path)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out", required=True, type=Path)

    sp = add("train-gaze", cmd_train_gaze, "train the gaze network behind a frozen mask network")
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--masks", required=True, type=Path)
    sp.add_argument("--aeri-ckpt", required=True, type=Path)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--widen-factor", type=int)
    sp.add_argument("--kind")
    sp.add_argument("--max-steps", type=int)

    sp = add("predict", cmd_predict, "predict gaze for a directory of images")
    sp.add_argument("--ckpt", required=True, type=Path)
    sp.add_argument("--images", required=True, type=Path)
    sp.add_argument("--masks", type=Path, help="exported masks; default computes them with the embedded network")
    sp.add_argument("--out", required=True, type=Path)

    sp = add("eval", cmd_eval, "evaluate a gaze checkpoint and write a per-sample report")
    sp.add_argument("--ckpt", required=True, type=Path)
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--masks", type=Path)
    sp.add_argument("--split", default="val", help="manifest split to evaluate (falls back to all samples)")
    sp.add_argument("--out", required=True, type=Path)

    sp = add("robustness", cmd_robustness, "mean error per noise-variance bin")
    sp.add_argument("--report", required=True, type=Path)
    sp.add_argument("--bins", type=int)
    sp.add_argument("--no-plot", action="store_true")
    sp.add_argument("--out", required=True, type=Path)

    sp = add("ablate", cmd_ablate, "run the protocol for several network variants")
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--aeri-ckpt", required=True, type=Path)
    sp.add_argument("--aeri-data", type=Path, help="synthetic data for augmentation-ablation retraining")
    sp.add_argument("--kinds", help="comma-separated variant kinds")
    sp.add_argument("--protocol", choices=["loso", "kfold"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--augment-ablation", action="store_true")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--widen-factor", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--out", required=True, type=Path)

    sp = add("heatmap", cmd_heatmap, "prediction-vs-truth heatmaps for pitch and yaw")
    sp.add_argument("--report", required=True, type=Path)
    sp.add_argument("--bins", type=int, default=30)
    sp.add_argument("--out", required=True, type=Path)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(args.log_level, args.log_json)
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except MsgazeError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("error: interrupted: stopped by user", file=sys.stderr)
        return 1
    except Exception as exc:  # last-resort guard so scripts always get one parsable line
        log.debug("unhandled", exc_info=True)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: runtime: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
