"""Command-line entry point.

Subcommands: synth, voxelize, train, infer, eval, gradcheck, ablate.
Every configuration key is addressable as a dotted flag (``--infer.t 3``)
with precedence flags > --config file > built-in defaults.

Exit codes: 0 success, 1 usage/config error, 2 data error,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import gradcheck as gc
from . import pipeline as pl
from .config import RunConfig, dump_config, leaf_keys, load_config
from .errors import ConfigError, OpenPanopticError
from .pointcloud_io import remap_labels
from .polar_grid import voxelize_scene


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="YAML configuration file")
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective configuration and exit")
    for key in leaf_keys():
        parser.add_argument(f"--{key}", dest=key, metavar="V", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="openpanoptic",
                     description="Uncertainty-guided open-set panoptic "
                                 "segmentation on polar voxel grids")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", metavar="DIR", help="output dataset directory")
    p.add_argument("--train", dest="synth.train_scenes", metavar="N")
    p.add_argument("--eval", dest="synth.eval_scenes", metavar="N")
    _add_common(p)

    p = sub.add_parser("voxelize", help="voxelize dataset scenes to .npz files")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--split", default="train", choices=("train", "eval"))
    _add_common(p)

    p = sub.add_parser("train", help="train the per-voxel head")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--out", metavar="DIR")
    _add_common(p)

    p = sub.add_parser("infer", help="run open-set inference")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--format", default="binary", choices=("binary", "text"))
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--pred", metavar="DIR")
    p.add_argument("--out", metavar="PATH", help="metric report JSON path")
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--point-level", action="store_true",
                   help="score back-projected points instead of voxels")
    p.add_argument("--csv", metavar="PATH", help="optional per-class CSV table")
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--n", type=int, default=100, metavar="N",
                   help="random inputs per check")
    p.add_argument("--corrupt", metavar="NAME",
                   help="bias one analytic gradient (negative control)")
    _add_common(p)

    p = sub.add_parser("ablate", help="uncertainty-method and loss-ladder ablation")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--out", metavar="PATH", help="ablation table JSON path")
    _add_common(p)
    return parser


def _effective_config(args) -> RunConfig:
    overrides = {}
    for key in leaf_keys():
        value = vars(args).get(key)
        if value is not None:
            overrides[key] = value
    return load_config(getattr(args, "config", None), overrides)


def _require(args, name: str) -> str:
    value = getattr(args, name, None)
    if not value:
        raise ConfigError(f"missing required flag --{name}")
    return value


def _cmd_synth(args, cfg: RunConfig) -> int:
    out = _require(args, "out")
    os.makedirs(out, exist_ok=True)
    manifest = pl.synth_dataset(cfg, out)
    print(f"wrote {len(manifest['train'])} train + {len(manifest['eval'])} "
          f"eval scenes to {out}")
    return 0


def _cmd_voxelize(args, cfg: RunConfig) -> int:
    data = _require(args, "data")
    out = _require(args, "out")
    os.makedirs(out, exist_ok=True)
    manifest = pl.load_manifest(data)
    vocab = pl.vocab_from_config(cfg)
    spec = pl.grid_spec_from_config(cfg)
    for scene in pl.load_split(data, manifest, args.split):
        remapped = remap_labels(scene, vocab, mode=args.split)
        grid = voxelize_scene(remapped, spec)
        sem, inst = grid.targets_at_voxels()
        path = os.path.join(out, scene.scene_id.replace("/", "_") + ".npz")
        np.savez(path, voxel_coords=grid.voxel_coords, features=grid.features,
                 semantic=sem, instance=inst,
                 dropped=np.array([grid.dropped_count]))
        print(f"{scene.scene_id}: {len(scene)} points -> {grid.n_voxels} voxels "
              f"({grid.dropped_count} dropped)")
    return 0


def _cmd_train(args, cfg: RunConfig) -> int:
    data = _require(args, "data")
    out = _require(args, "out")
    start = time.time()
    params, log, mode = pl.train_on_dataset(cfg, data)
    pl.write_train_outputs(params, log, mode, out)
    if log:
        last = log[-1]
        print(f"epoch {last['epoch']}: total={last['loss_total']:.4f} "
              f"delta_u={last['delta_u'] if last['delta_u'] is None else round(last['delta_u'], 4)}")
    print(f"checkpoint written to {os.path.join(out, 'checkpoint.bin')} "
          f"({time.time() - start:.1f}s)")
    return 0


def _cmd_infer(args, cfg: RunConfig) -> int:
    data = _require(args, "data")
    ckpt = _require(args, "checkpoint")
    out = _require(args, "out")
    written = pl.infer_on_dataset(cfg, data, ckpt, out, fmt=args.format,
                                  split=args.split)
    print(f"wrote {len(written)} prediction files to {out}")
    return 0


def _format_report(report) -> str:
    d = report.to_dict()
    lines = [
        "known:   PQ={PQ:.4f}  PQ_Th={PQ_Th:.4f}  PQ_St={PQ_St:.4f}".format(**d["known"]),
        "unknown: UQ={UQ:.4f}  Recall={Recall:.4f}  SQ={SQ:.4f}".format(**d["unknown"]),
    ]
    for cls, row in d["per_class"].items():
        lines.append(
            f"class {cls}: PQ={row['PQ']:.4f} SQ={row['SQ']:.4f} "
            f"RQ={row['RQ']:.4f} TP={row['TP']} FP={row['FP']} FN={row['FN']}"
        )
    return "\n".join(lines)


def _cmd_eval(args, cfg: RunConfig) -> int:
    data = _require(args, "data")
    pred = _require(args, "pred")
    report = pl.evaluate_dataset(cfg, data, pred, split=args.split,
                                 point_level=args.point_level)
    print(_format_report(report))
    out = getattr(args, "out", None)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    csv = getattr(args, "csv", None)
    if csv:
        with open(csv, "w", encoding="utf-8") as fh:
            fh.write("class,PQ,SQ,RQ,TP,FP,FN\n")
            for cls, row in report.to_dict()["per_class"].items():
                fh.write(f"{cls},{row['PQ']},{row['SQ']},{row['RQ']},"
                         f"{row['TP']},{row['FP']},{row['FN']}\n")
    return 0


def _cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = gc.run_all(seed=cfg.seed, n_inputs=args.n, corrupt=args.corrupt)
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status}  {res.name:32s} max_rel_err={res.max_rel_err:.3e}")
    return 0 if all(r.passed for r in results) else 3


def _cmd_ablate(args, cfg: RunConfig) -> int:
    data = _require(args, "data")
    rows = pl.run_ablation(cfg, data)
    print(f"{'variant':30s} {'AUROC':>8s} {'delta_u':>8s} {'UQ':>8s} {'PQ':>8s}")
    for row in rows:
        print(f"{row['variant']:30s} {row['auroc']:8.4f} {row['delta_u']:8.4f} "
              f"{row['uq']:8.4f} {row['pq']:8.4f}")
    out = getattr(args, "out", None)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump({"variants": rows}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "voxelize": _cmd_voxelize,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return 1
        cfg = _effective_config(args)
        if getattr(args, "print_config", False):
            print(dump_config(cfg), end="")
            return 0
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OpenPanopticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
