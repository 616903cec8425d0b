"""Command-line entry point: train, eval, sample, check, convert-omniglot."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt_io
from . import data as data_mod
from . import evaluation
from .config import Config, ConfigError, apply_setting, load_config, parse_config
from .errors import TzkError
from .model import build_model
from .oracles import run_check
from .rng import stream
from .trainer import AdamState, train


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tzk", description="conditional probability-flow model")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override (repeatable, wins over the file)")
        sp.add_argument("--data-dir", help="dataset root (default: env TZK_DATA_DIR)")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="optimize a model")
    common(t)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--out-dir", default="runs/tzk")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true", help="ignore config fingerprint mismatch on resume")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a held-out split")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--out-dir", help="write eval_report.tsv and eval_report.png here")
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="draw a grid of samples")
    common(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--knowledge", help="head id, e.g. digit:3 (omit for the base prior)")
    s.add_argument("--rows", type=int, default=2)
    s.add_argument("--cols", type=int, default=5)
    s.add_argument("-o", "--out", default="samples.png")
    s.add_argument("--format", choices=["png", "pgm"])
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_sample)

    c = sub.add_parser("check", help="run the numerical oracle suites")
    c.add_argument("--d", type=int, default=16, help="max dimensionality of random stacks")
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_check)

    o = sub.add_parser("convert-omniglot", help="image-file tree to an IDX pair")
    o.add_argument("--src", required=True)
    o.add_argument("--out-dir", required=True)
    o.add_argument("--prefix", default="omniglot-train")
    o.add_argument("--no-invert", action="store_true")
    o.set_defaults(fn=cmd_convert)
    return p


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return 2
    except TzkError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


# -- shared plumbing ---------------------------------------------------------


def _load_cfg(args) -> Config:
    cfg = Config()
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    for ov in getattr(args, "set", []):
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} must look like key=value")
        key, value = ov.split("=", 1)
        apply_setting(cfg, key, value)
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("batch_size", "batch_size"),
                      ("data_dir", "data_dir")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, key, v)
    if cfg.data_dir is None:
        cfg.data_dir = os.environ.get("TZK_DATA_DIR")
    if not cfg.heads:
        cfg.heads = data_mod.KnowledgeAssignment(cfg.datasets, c_dim=cfg.c_dim).head_ids
    return cfg.validate()


def _load_records(cfg: Config, split: str) -> data_mod.RecordStore:
    if cfg.data_dir is None:
        raise ConfigError("no data directory: pass --data-dir or set TZK_DATA_DIR")
    datasets = {}
    for name in cfg.datasets:
        if name == "mnist":
            datasets[name] = data_mod.load_mnist(cfg.data_dir, split, subset=cfg.mnist_subset,
                                                 seed=cfg.seed)
        else:
            datasets[name] = data_mod.load_omniglot(cfg.data_dir, split)
    return data_mod.RecordStore.ingest(datasets, cfg.seed)


def _build_model(cfg: Config):
    return build_model((cfg.channels, cfg.image_size, cfg.image_size), cfg.total_flow_steps,
                       stream(cfg.seed, "init"), tile=cfg.tile, head_specs=cfg.head_specs(),
                       c_dim=cfg.c_dim, mlp_hidden=cfg.mlp_hidden, mlp_depth=cfg.mlp_depth,
                       private_layers=cfg.private_layers, dtype=np.float32)


def _restore(args) -> tuple:
    """Model + checkpoint from --ckpt, config from --config or the run dir."""
    ck = ckpt_io.load(args.ckpt)
    cfg_path = getattr(args, "config", None)
    if not cfg_path:
        cfg_path = os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "config.resolved.txt")
    if not os.path.exists(cfg_path):
        raise ConfigError(f"config file not found: {cfg_path} (pass --config)")
    with open(cfg_path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read()).validate()
    if getattr(args, "data_dir", None):
        cfg.data_dir = args.data_dir
    if cfg.data_dir is None:
        cfg.data_dir = os.environ.get("TZK_DATA_DIR")
    if cfg.fingerprint() != ck.fingerprint and not getattr(args, "force", False):
        raise ConfigError("checkpoint was written with a different config (use --force to override)")
    model = _build_model(cfg)
    ckpt_io.restore_model(model, ck)
    return model, cfg, ck


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())

    store = _load_records(cfg, "train")
    assignment = data_mod.KnowledgeAssignment(cfg.datasets, c_dim=cfg.c_dim, heads=cfg.heads)
    get_batch = data_mod.make_batch_fn(store, assignment, cfg.batch_size, cfg.seed,
                                       epochs=cfg.epochs)
    model = _build_model(cfg)

    start_step = 0
    adam = None
    if args.resume:
        ck = ckpt_io.load(args.resume)
        if cfg.fingerprint() != ck.fingerprint and not args.force:
            raise ConfigError("resume checkpoint was written with a different config (use --force)")
        ckpt_io.restore_model(model, ck)
        if ck.has_adam:
            adam = ckpt_io.restore_adam(ck)
        start_step = ck.next_step

    fingerprint = cfg.fingerprint()
    params = model.named_parameters()

    def save_ckpt(step, adam_state):
        path = os.path.join(out_dir, "ckpt_last.tzk")
        ckpt_io.save(path, fingerprint, cfg.seed, step, params, adam_state)
        snap = os.path.join(out_dir, f"ckpt_{step:07d}.tzk")
        ckpt_io.save(snap, fingerprint, cfg.seed, step, params, adam_state)
        return path

    log_path = os.path.join(out_dir, "trainlog.tsv")
    with open(log_path, "a" if args.resume else "w", encoding="utf-8") as log_fh:
        def log(line):
            print(line)
            log_fh.write(line + "\n")

        result = train(model, get_batch, cfg, out_dir=out_dir, start_step=start_step,
                       adam=adam, log=log, save_checkpoint=save_ckpt)

    if result.history:
        evaluation.write_loss_curve(result.history, out_dir)
    if result.aborted:
        print(f"error[non-finite]: aborted at step {result.final_step}; "
              f"last checkpoint retained at {result.last_checkpoint}", file=sys.stderr)
        return 1
    print(f"done: {result.final_step} steps, checkpoint {result.last_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = _restore(args)
    store = _load_records(cfg, args.split)
    report = evaluation.evaluate(model, store.pixels, store.sources, store.labels,
                                 c_mode=cfg.eval_c_mode, is_samples=cfg.eval_is_samples,
                                 seed=cfg.seed)
    print(report.to_text(), end="")
    if args.out_dir:
        tsv, fig = evaluation.write_report(report, args.out_dir)
        print(f"wrote {tsv} and {fig}")
    return 0


def cmd_sample(args) -> int:
    model, cfg, _ = _restore(args)
    seed = args.seed if args.seed is not None else cfg.seed
    rng = stream(seed, "sample", args.knowledge or "prior")
    grid = evaluation.sample_grid(model, args.knowledge, args.rows, args.cols, rng)
    evaluation.save_grid(args.out, grid, fmt=args.format)
    print(f"wrote {args.out} ({args.rows}x{args.cols} grid)")
    return 0


def cmd_check(args) -> int:
    if args.d < 16:
        print(f"note: oracle stacks use up to 16 dims; --d {args.d} runs vector stacks only")
    results = run_check(trials=args.trials, seed=args.seed, tol=args.tol)
    ok = True
    for r in results:
        print(r)
        ok = ok and r.passed
    return 0 if ok else 1


def cmd_convert(args) -> int:
    images, labels = data_mod.convert_omniglot_tree(args.src, invert=not args.no_invert)
    os.makedirs(args.out_dir, exist_ok=True)
    img_path = os.path.join(args.out_dir, f"{args.prefix}-images-idx3-ubyte")
    lab_path = os.path.join(args.out_dir, f"{args.prefix}-labels-idx1-ubyte")
    data_mod.write_idx(img_path, images)
    data_mod.write_idx(lab_path, labels)
    print(f"wrote {img_path} ({images.shape[0]} images) and {lab_path}")
    return 0
