"""Command-line surface.

Commands: gen-data, train, eval, infer, bench, export-maps. Exit code 0 on
success, 1 on runtime failure (message on stderr), 2 on usage errors.
Dataset directories hold train/ val/ test/ subdirectories of cube files;
prediction dumps mirror a split directory with one .cmap file per cube.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .bench import run_benchmark
from .data import (extract_patches, generate_synthetic_scene, load_cube,
                   load_prediction_maps, save_cube, save_prediction_maps,
                   split_dataset)
from .errors import CaimError, ConfigError
from .losses import compute_class_ratios
from .metrics import compute_metrics
from .refine import argmax_maps, init_model_params, predict
from .render import export_maps
from .tensor import ParamStore
from .training import evaluate, train

SPLITS = ("train", "val", "test")


def _load_split(data_dir, split):
    split_dir = Path(data_dir) / split
    if not split_dir.is_dir():
        raise ConfigError(f"missing split directory {split_dir}")
    items = []
    for path in sorted(split_dir.glob("*.caim")):
        cube, labels = load_cube(path)
        items.append((cube, labels, path.stem))
    if not items:
        raise ConfigError(f"no cube files in {split_dir}")
    return items


def cmd_gen_data(args):
    cfg = C.load_config(args.config)
    s = cfg["scene"]
    out = Path(args.out)
    patches = []
    for i in range(s["n_scenes"]):
        cube, _, labels = generate_synthetic_scene(C.scene_config(cfg, seed=s["seed"] + i))
        patches.extend(extract_patches(cube, labels, s["patch"], s["stride"]))
    ratios = (s["split_train"], s["split_val"], s["split_test"])
    parts = split_dataset(patches, ratios=ratios, seed=s["seed"])
    for split, items in zip(SPLITS, parts):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for j, (cube, labels) in enumerate(items):
            save_cube(cube, labels, split_dir / f"patch_{j:04d}.caim")
    manifest = [f"{split}={len(items)}" for split, items in zip(SPLITS, parts)]
    (out / "dataset.txt").write_text("\n".join(manifest + C.config_lines(cfg)) + "\n")
    print(f"wrote {sum(len(p) for p in parts)} patches to {out} "
          f"({', '.join(manifest)})")
    return 0


def cmd_train(args):
    cfg = C.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_items = [(c, l) for c, l, _ in _load_split(args.data, "train")]
    val_items = [(c, l) for c, l, _ in _load_split(args.data, "val")]

    mc = _reconcile_model(C.model_config(cfg), cfg,
                          [(c, l, None) for c, l in train_items])
    lc = C.loss_config(cfg)
    lc.area_ratios, lc.moment_ratios = compute_class_ratios(train_items, mc.t_len)
    tc = C.train_config(cfg)

    store = init_model_params(mc, seed=tc.seed)
    log_path = out / "train_log.txt"
    if log_path.exists():
        log_path.unlink()
    log, history = train(store, mc, train_items, val_items, tc, lc, log_path=log_path)
    ck = out / "checkpoint.caimp"
    store.save(ck)
    report = C.config_lines(cfg) + [
        f"train.param_count={store.n_scalars()}",
        f"train.best_val_moment_kappa={max((h.get('val_moment_kappa', 0) for h in history), default=0):.4f}",
    ]
    (out / "train_report.txt").write_text("\n".join(report) + "\n")
    print(f"checkpoint: {ck}")
    print(log[-1])
    return 0


def _metrics_lines(report, cfg):
    return C.config_lines(cfg) + report.lines()


def cmd_eval(args):
    cfg = C.load_config(args.config)
    items = _load_split(args.data, args.split)
    mc = C.model_config(cfg)
    mc = _reconcile_model(mc, cfg, items)
    if args.preds:
        preds_dir = Path(args.preds)
        ref_moment, ref_area, pm, pa = [], [], [], []
        for cube, labels, stem in items:
            area, moment = load_prediction_maps(preds_dir / f"{stem}.cmap")
            ref_moment.append(labels.moment)
            ref_area.append(labels.area)
            pm.append(moment)
            pa.append(area)
        report = compute_metrics(np.stack(pm), np.stack(pa),
                                 (np.stack(ref_moment), np.stack(ref_area)),
                                 t_len=mc.t_len)
    elif args.checkpoint:
        store = ParamStore.load(args.checkpoint)
        report, _ = evaluate(store, mc, [(c, l) for c, l, _ in items])
    else:
        raise ConfigError("eval needs --checkpoint or --preds")
    lines = _metrics_lines(report, cfg)
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def _reconcile_model(mc, cfg, items):
    cube = items[0][0]
    if (mc.t_len, mc.bands) != (cube.t_len, cube.band_count):
        return C.model_config({**cfg, "scene": {**cfg["scene"],
                                                "t_len": cube.t_len,
                                                "bands": cube.band_count}})
    return mc


def cmd_infer(args):
    cfg = C.load_config(args.config)
    if args.cube:
        cube, labels = load_cube(args.cube)
        items = [(cube, labels, Path(args.cube).stem)]
    elif args.data:
        items = _load_split(args.data, args.split)
    else:
        raise ConfigError("infer needs --data or --cube")
    mc = _reconcile_model(C.model_config(cfg), cfg, items)
    store = ParamStore.load(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cube, _, stem in items:
        pred, area = predict(cube, store, mc)
        moment_map, area_map = argmax_maps(pred, area)
        save_prediction_maps(area_map[0], moment_map[0], out / f"{stem}.cmap")
    print(f"wrote {len(items)} prediction dumps to {out}")
    return 0


def cmd_bench(args):
    cfg = C.load_config(args.config)
    mc = C.model_config(cfg)
    report = run_benchmark(mc, repeats=cfg["bench"]["repeats"])
    lines = C.config_lines(cfg) + report.lines()
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_export_maps(args):
    cfg = C.load_config(args.config)
    items = _load_split(args.data, args.split)
    preds_dir = Path(args.preds)
    predictions, labels = [], []
    for cube, lab, stem in items:
        area, moment = load_prediction_maps(preds_dir / f"{stem}.cmap")
        predictions.append((area, moment))
        labels.append(lab)
    t_len = items[0][0].t_len
    written = export_maps(predictions, labels, args.out, t_len=t_len)
    print(f"wrote {len(written)} PNGs to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="caim",
                                description="time-series change detection pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic cube patches")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or prediction dumps")
    e.add_argument("--config", default=None)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--preds", default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="write prediction dumps for cubes")
    i.add_argument("--config", default=None)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", default=None)
    i.add_argument("--split", default="test", choices=SPLITS)
    i.add_argument("--cube", default=None)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer)

    b = sub.add_parser("bench", help="stacked-vs-siamese timing and FLOP report")
    b.add_argument("--config", default=None)
    b.add_argument("--out", default=None)
    b.set_defaults(fn=cmd_bench)

    x = sub.add_parser("export-maps", help="render prediction dumps to PNG")
    x.add_argument("--config", default=None)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="test", choices=SPLITS)
    x.add_argument("--preds", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_maps)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CaimError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
