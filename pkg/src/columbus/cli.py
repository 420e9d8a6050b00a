"""Command-line entry point: ``columbus <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from columbus import dataset as D
from columbus import experiment as E
from columbus import heatmap as H
from columbus import model as M
from columbus import trainer as TR
from columbus.config import ExperimentConfig, dump_config, load_config
from columbus.errors import ColumbusError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config file (key = value lines)")
    p.add_argument("--seed", type=int, help="override the run seed (search: use only this seed)")
    p.add_argument("--target-domain", type=int, help="held-out domain id")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.target_domain is not None:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, target_domain=args.target_domain))
    return cfg


def _seeds(args, cfg: ExperimentConfig) -> list[int]:
    return [args.seed] if args.seed is not None else list(cfg.search.seeds)


def cmd_generate(args) -> int:
    cfg = _load(args)
    dc = cfg.data
    seed = dc.seed if args.seed is None else args.seed
    ds = D.generate(dc.num_classes, D.default_domains(dc.target_domain), dc.per_class, seed, dc.size)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "dataset.cdg"
    D.write_dataset(ds, path)
    print(f"wrote {len(ds)} images to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    seed = cfg.train.seed if args.seed is None else args.seed
    spec = E.RunSpec(cfg, cfg.train, 0, seed, cfg.data.target_domain, str(args.out))
    rec = E.run_one(spec)
    (args.out / "config.txt").write_text(dump_config(cfg))
    if not rec.ok:
        print(rec.error, file=sys.stderr)
        return 1
    for sel, res in sorted(rec.results.items()):
        print(f"{sel}: target accuracy {res['accuracy']:.4f} (checkpoint {res['iteration']})")
    return 0


def _checkpoints(run_dir: Path) -> list[TR.Checkpoint]:
    paths = sorted(run_dir.glob("ckpt_*.cmb"))
    if not paths:
        raise ColumbusError(f"no checkpoints in {run_dir}")
    return [TR.Checkpoint(int(p.stem.split("_")[1]), M.load_checkpoint(p).get_flat()) for p in paths]


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    prepared = E.prepare(cfg)
    cks = _checkpoints(args.out)
    model = M.load_checkpoint(sorted(args.out.glob("ckpt_*.cmb"))[-1])
    rep = TR.evaluate(model, cks, prepared.splits, args.selection)
    (args.out / f"evaluation_{args.selection}.json").write_text(json.dumps(rep.as_dict(), indent=2, sort_keys=True))
    print(f"{args.selection}: checkpoint {rep.iteration}, target accuracy {rep.accuracy:.4f}, "
          f"best mean source validation {rep.source_val_max_mean:.4f}")
    return 0


def cmd_hpsearch(args) -> int:
    cfg = _load(args)
    _, summary = E.run_search(cfg, out=args.out, seeds=_seeds(args, cfg))
    print(summary, end="")
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    _, summary = E.run_compare(cfg, out=args.out, seeds=_seeds(args, cfg))
    print(summary, end="")
    return 0


def cmd_attribute(args) -> int:
    cfg = _load(args)
    prepared = E.prepare(cfg)
    model = M.load_checkpoint(args.checkpoint)
    test = prepared.splits.target_test
    idx = np.arange(min(args.count, len(test)))
    ids = [f"img{i:04d}" for i in idx]
    paths = H.export_heatmaps(model, test.images[idx], test.labels[idx], ids, args.methods, args.out)
    print(f"wrote {len(paths)} heatmaps to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="columbus", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, helptext in [
        ("generate", cmd_generate, "render the synthetic benchmark to <out>/dataset.cdg"),
        ("train", cmd_train, "train one model on the source domains"),
        ("hpsearch", cmd_hpsearch, "random hyperparameter search, writes summary.csv"),
        ("evaluate", cmd_evaluate, "select a checkpoint in a training directory"),
        ("attribute", cmd_attribute, "export relevance heatmaps as PGM files"),
        ("compare", cmd_compare, "ERM vs COLUMBUS table, writes summary.csv"),
    ]:
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.set_defaults(fn=fn)
        if name == "evaluate":
            p.add_argument("--selection", choices=["val", "oracle"], default="val")
        if name == "attribute":
            p.add_argument("--checkpoint", type=Path, required=True)
            p.add_argument("--methods", nargs="+", default=["guided_grad_cam"])
            p.add_argument("--count", type=int, default=8, help="number of target test images")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ColumbusError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
