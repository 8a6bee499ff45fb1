"""``dinocell`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. ``--config`` points at a JSON file whose keys fill the options of
the chosen subcommand (command-line flags win).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, DinocellError

log = logging.getLogger("dinocell")


@contextlib.contextmanager
def deterministic(enabled=True):
    """Single-threaded BLAS so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return d


def _out(args, default):
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_trace(trace, path, fields=("epoch", "step", "loss", "lr", "lambda")):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        w.writerows(trace)


def _emit(obj):
    print(json.dumps(obj, indent=1, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


# ----------------------------------------------------------------- commands


def cmd_gen_synthetic(args, conf):
    from .synthetic import SyntheticConfig, gen_synthetic

    opts = {**conf}
    for k in ("n_samples", "image_size", "style", "name"):
        v = getattr(args, k)
        if v is not None:
            opts[k] = v
    cfg = SyntheticConfig(**opts)
    out = _out(args, "synthetic")
    m = gen_synthetic(cfg, args.seed, out)
    _emit({"root": str(out), "samples": len(m.samples), "channels": m.channels})


def cmd_split(args, conf):
    from .data import DatasetManifest, check_split, split_dataset

    m = DatasetManifest.load(args.data)
    split_dataset(m, args.seed, conf.get("test_frac", 0.1), conf.get("n_folds", 5))
    check_split(m, conf.get("n_folds", 5))
    m.save(args.data)
    counts = {k: sum(s.split == k for s in m.samples) for k in ("train", "test")}
    _emit(counts)


def _dino_config(args, conf, backbone_cfg=None):
    from .backbone import preset
    from .ssl_dino import DinoConfig

    opts = dict(conf.get("ssl", conf))
    if args.epochs is not None:
        opts["epochs"] = args.epochs
    if backbone_cfg is not None:
        opts["backbone"] = backbone_cfg.to_dict()
    elif "backbone" not in opts:
        opts["backbone"] = preset(conf.get("preset", "vit-tiny/4"), args._channels).to_dict()
    opts = {k: v for k, v in opts.items() if k not in ("preset", "adapter", "layout")}
    return DinoConfig.from_dict(opts)


def _ssl(args, conf, init=None):
    from .checkpoint import save_checkpoint
    from .data import DatasetManifest, load_images
    from .ssl_dino import ssl_train

    m = DatasetManifest.load(args.data)
    recs = m.select("train") or m.samples
    args._channels = len(m.channels)
    cfg = _dino_config(args, conf, None if init is None else init.config)
    adapter = None
    if init is not None:
        from .protocols import resolve_adapter

        adapter = resolve_adapter(conf.get("adapter", "natural"), m.name, m.channels, init,
                                  conf.get("layout"))
    imgs = load_images(args.data, m, recs)
    out = _out(args, "ssl")
    res = ssl_train(imgs, cfg, init=init, adapter=adapter, channels=m.channels, seed=args.seed,
                    ids=[r.id for r in recs],
                    on_step=lambda r: log.info("epoch %d step %d loss %.4f", r["epoch"], r["step"], r["loss"]))
    save_checkpoint(res.teacher, out / "teacher")
    save_checkpoint(res.student, out / "student")
    _write_trace(res.trace, out / "loss_trace.csv")
    (out / "ssl_config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    _emit({"checkpoint": str(out / "teacher"), "final_loss": res.trace[-1]["loss"] if res.trace else None})


def cmd_pretrain(args, conf):
    _ssl(args, conf)


def cmd_finetune(args, conf):
    from .checkpoint import load_checkpoint

    _ssl(args, conf, init=load_checkpoint(args.checkpoint))


def cmd_embed(args, conf):
    from .protocols import export_embedding_set

    es = export_embedding_set(args.checkpoint, args.data, args.adapter or conf.get("adapter", "natural"),
                              _out(args, "embeddings"), conf.get("layout"), conf.get("min_grade", 1))
    _emit({"rows": len(es), "dim": es.dim})


def cmd_train_head(args, conf):
    from .data import DatasetManifest
    from .head_classifier import EmbeddingSet
    from .protocols import head_cv

    es = EmbeddingSet.load(args.embeddings)
    m = DatasetManifest.load(args.data)
    opts = dict(conf.get("head", conf))
    if args.epochs is not None:
        opts["epochs"] = args.epochs
    row = head_cv(es, m, opts, args.seed, conf.get("n_folds", 5))
    out = _out(args, "head")
    (out / "report.json").write_text(json.dumps({"head": opts, "seed": args.seed, **row}, indent=1))
    keys = ("val_macro_f1", "val_sd", "test_macro_f1", "test_sd", "test_full_macro_f1")
    _emit({k: row[k] for k in keys})


def cmd_eval_knn(args, conf):
    from .head_classifier import EmbeddingSet
    from .knn_eval import KnnConfig, loo_eval

    es = EmbeddingSet.load(args.embeddings)
    opts = dict(conf.get("knn", conf))
    if args.normalization:
        opts["normalization"] = args.normalization
    res = loo_eval(es.matrix, es.labels, KnnConfig(**opts), es.class_names)
    out = _out(args, "knn")
    rows = res.rows()
    (out / "knn.json").write_text(json.dumps(rows, indent=1))
    with open(out / "knn.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "macro_f1", *[f"f1_{c}" for c in es.class_names]])
        for r in rows:
            w.writerow([r["k"], r["macro_f1"], *r["per_class_f1"]])
    _emit({r["k"]: r["macro_f1"] for r in rows})


def cmd_extract_cells(args, conf):
    from .cellcrop import extract_dataset
    from .data import DatasetManifest

    m = DatasetManifest.load(args.data)
    opts = {"crop_size": 512, "zoom": True, "percentile": 99.7, **conf}
    if args.crop_size is not None:
        opts["crop_size"] = args.crop_size
    kept = extract_dataset(args.data, m, _out(args, "cells"), opts["crop_size"], opts["zoom"],
                           opts["percentile"], opts.get("mask_out", False))
    _emit({"kept": len(kept)})


def cmd_run_protocol(args, conf):
    from .protocols import ExperimentConfig, run_protocol

    opts = dict(conf)
    for k in ("protocol", "data", "backbone"):
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    opts["seed"] = args.seed
    cfg = ExperimentConfig.from_dict(opts)
    rep = run_protocol(cfg, _out(args, f"runs/{cfg.protocol}"))
    _emit(rep["rows"])


def cmd_gradcheck(args, conf):
    from .gradcheck import run_suite

    results = run_suite(points=args.points, seed=args.seed)
    worst = max(r["max_rel_err"] for r in results)
    for r in results:
        print(f"{r['name']:<28} {r['max_rel_err']:.3e}")
    print(f"worst {worst:.3e}")
    if worst > args.tol:
        from .errors import NumericError

        raise NumericError(f"gradient check failed: worst relative error {worst:.3e} > {args.tol}")


# ----------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with options for the subcommand")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true",
                        help="pin BLAS to one thread for bit-reproducible runs")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dinocell", parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-synthetic", cmd_gen_synthetic, "render a seeded synthetic dataset")
    sp.add_argument("--n-samples", dest="n_samples", type=int)
    sp.add_argument("--image-size", dest="image_size", type=int)
    sp.add_argument("--style", choices=("target", "source"))
    sp.add_argument("--name")

    sp = add("split", cmd_split, "tag a dataset with a stratified train/test split and folds")
    sp.add_argument("data")

    for name, fn, h in (("pretrain", cmd_pretrain, "DINO from scratch"),
                        ("finetune", cmd_finetune, "DINO continued from a checkpoint")):
        sp = add(name, fn, h)
        sp.add_argument("data")
        if name == "finetune":
            sp.add_argument("checkpoint")
        sp.add_argument("--epochs", type=int)

    sp = add("embed", cmd_embed, "export backbone embeddings for a dataset")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    sp.add_argument("--adapter", help="natural, replication or a map like protein=1,nucleus=2")

    sp = add("train-head", cmd_train_head, "cross-validated MLP head on exported embeddings")
    sp.add_argument("embeddings")
    sp.add_argument("data")
    sp.add_argument("--epochs", type=int)

    sp = add("eval-knn", cmd_eval_knn, "leave-one-out soft-vote kNN on exported embeddings")
    sp.add_argument("embeddings")
    sp.add_argument("--normalization", choices=("sum", "minmax"))

    sp = add("extract-cells", cmd_extract_cells, "single-cell crops from FOVs and masks")
    sp.add_argument("data")
    sp.add_argument("--crop-size", dest="crop_size", type=int)

    sp = add("run-protocol", cmd_run_protocol, "run an experiment protocol end to end")
    sp.add_argument("protocol", nargs="?")
    sp.add_argument("--data")
    sp.add_argument("--backbone")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op")
    sp.add_argument("--points", type=int, default=10)
    sp.add_argument("--tol", type=float, default=1e-4)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        conf = _load_config(args.config)
        with deterministic(args.deterministic):
            args.func(args, conf)
    except DinocellError as exc:
        print(f"dinocell: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # malformed option values coming from a config file
        print(f"dinocell: ConfigError: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
