"""Command-line entry point: ``caliber <command> ...``.

Commands: gen-data, train, eval, export-attention, sweep. Exit codes are
0 on success, 2 for usage/config errors, 3 for missing or malformed
inputs, 4 for numeric or training failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys

from . import data as datamod
from .adapters import canonical_variant, cli_name
from .errors import CaliberError, ConfigError, InputError, MetricError
from .evaluation import (
    attention_record,
    entropy_split,
    ece,
    metrics_report,
    predict_mc,
    write_entropy_csv,
    write_reliability_csv,
    write_report,
)
from .training import (
    apply_kv,
    configs_from_kv,
    load_checkpoint,
    parse_kv,
    save_checkpoint,
    train,
)

log = logging.getLogger("caliber")

SWEEP_COLUMNS = ["variant", "seed", "auc", "ece", "mean_entropy_correct", "mean_entropy_incorrect", "nll"]


def _read_kv(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read())


def synth_config(path: str | None, **overrides) -> datamod.SynthConfig:
    kv = _read_kv(path)
    used: set = set()
    cfg = apply_kv(datamod.SynthConfig(), "", kv, used)
    unknown = set(kv) - used
    if unknown:
        raise ConfigError(f"unknown data config keys: {', '.join(sorted(unknown))}")
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg


def train_configs(path: str | None, variant: str | None = None, seed: int | None = None):
    tc, mc = configs_from_kv(_read_kv(path))
    if variant is not None:
        tc = dataclasses.replace(tc, adapter=dataclasses.replace(tc.adapter, variant=canonical_variant(variant)))
    if seed is not None:
        tc = dataclasses.replace(tc, seed=seed)
    tc.validate()
    return tc, mc


def parse_seeds(text: str) -> list[int]:
    """``"1,2,7"`` or ``"1..5"`` (inclusive) or a mix of both."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = (int(x) for x in part.split("..", 1))
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
        except ValueError as exc:
            raise ConfigError(f"bad seed list entry {part!r}") from exc
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def _sidecar(path: str, suffix: str) -> str:
    return os.path.splitext(path)[0] + suffix


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = synth_config(args.config, seed=args.seed)
    ds = datamod.generate(cfg)
    datamod.save(ds, args.out)
    log.info("wrote %d samples to %s", len(ds), args.out)
    return 0


def cmd_train(args) -> int:
    ds = datamod.load(args.data)
    tc, mc = train_configs(args.config, args.variant, args.seed)
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs=args.epochs)
    res = train(ds, tc, mc)
    save_checkpoint(args.out, res.model, tc, res.state, res.step, res.loss_trace)
    with open(_sidecar(args.out, ".loss.csv"), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "neg_elbo_per_sample"])
        for epoch, value in enumerate(res.loss_trace):
            out.writerow([epoch, repr(float(value))])
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    ds = datamod.load(args.data)
    res = predict_mc(ck.model, ds, M=args.mc_samples, seed=args.seed)
    labels = ds.labels
    write_report(args.report, metrics_report(ck.model.variant, ck.train_config.seed, res, labels))
    _, bins = ece(res.probs, labels)
    write_reliability_csv(_sidecar(args.report, ".reliability.csv"), bins)
    try:
        write_entropy_csv(_sidecar(args.report, ".entropy.csv"), entropy_split(res, labels))
    except MetricError as exc:
        log.warning("entropy histogram skipped: %s", exc)
    return 0


def cmd_export_attention(args) -> int:
    ck = load_checkpoint(args.ckpt)
    ds = datamod.load(args.data)
    try:
        sample = ds.by_id(args.sample)
    except KeyError as exc:
        raise InputError(f"no sample with id {args.sample} in {args.data}") from exc
    attention_record(ck.model, sample).to_csv(args.out)
    return 0


def run_sweep(variants, seeds, data=None, data_config=None, train_config=None, test_frac=0.25,
              mc_samples=10, epochs=None) -> list[dict]:
    """Train and evaluate every (variant, seed) cell; returns one row per cell."""
    rows = []
    for seed in seeds:
        ds = data if data is not None else datamod.generate(dataclasses.replace(data_config, seed=seed))
        tr, te = datamod.train_test_split(ds, test_frac, seed)
        for v in variants:
            tc, mc = train_config(v, seed)
            if epochs is not None:
                tc = dataclasses.replace(tc, epochs=epochs)
            res = train(tr, tc, mc)
            pred = predict_mc(res.model, te, M=mc_samples, seed=seed)
            rows.append(metrics_report(v, seed, pred, te.labels))
            log.info("sweep %s seed %d auc %.4f", cli_name(v), seed, rows[-1]["auc"])
    return rows


def cmd_sweep(args) -> int:
    variants = [canonical_variant(v) for v in args.variants.split(",") if v.strip()]
    seeds = parse_seeds(args.seeds)
    data = datamod.load(args.data) if args.data else None
    dcfg = synth_config(args.data_config)
    rows = run_sweep(
        variants, seeds, data=data, data_config=dcfg,
        train_config=lambda v, s: train_configs(args.config, v, s),
        test_frac=args.test_frac, mc_samples=args.mc_samples, epochs=args.epochs,
    )
    with open(args.out, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        out.writeheader()
        for row in rows:
            out.writerow({k: ("" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k]))
                          for k in SWEEP_COLUMNS})
    return 0


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caliber", description="Context-conditioned Bayesian LoRA on synthetic multimodal data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="key = value file of generator settings")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one adapter variant")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", required=True)
    t.add_argument("--config", help="key = value file of training settings")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True, help="checkpoint path; the loss curve goes next to it")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Monte Carlo evaluation of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mc-samples", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", required=True, help="metrics JSON; reliability and entropy CSVs go next to it")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-attention", help="write one sample's attention weights as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--sample", type=int, required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_attention)

    s = sub.add_parser("sweep", help="train and evaluate a variant x seed grid")
    s.add_argument("--variants", required=True, help="comma separated, e.g. lora,caliber-x")
    s.add_argument("--seeds", required=True, help="e.g. 1,2,3 or 1..5")
    s.add_argument("--data", help="fixed dataset; otherwise one is generated per seed")
    s.add_argument("--data-config", help="generator settings used when --data is absent")
    s.add_argument("--config", help="training settings")
    s.add_argument("--epochs", type=int)
    s.add_argument("--test-frac", type=float, default=0.25)
    s.add_argument("--mc-samples", type=int, default=10)
    s.add_argument("--out", default="sweep.csv")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "mc_samples", 1) < 0:
        print("error: --mc-samples must be >= 0", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CaliberError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
