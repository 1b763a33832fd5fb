"""Command-line interface: ``python -m writeradapt <command> [flags]``.

Besides the named flags, every config field can be set with a flag of the
same dotted name, e.g. ``--train.beta 1e-3`` or ``--pool.n_train=10``.
Precedence is defaults < ``--config`` file < flags.

Exit codes: 0 success, 1 internal error, 2 user or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as C
from . import evaluation as V
from . import experiment as X
from . import metalearn as ML
from . import writers as W
from .config import ConfigError, RunConfig, field_names, load

log = logging.getLogger("writeradapt")

COMMANDS = ("pretrain", "meta-train", "evaluate", "ablate", "diagnose")


class UserError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--variant", help="meta-learning variant")
    common.add_argument("--k", type=int, help="adaptation images per writer")
    common.add_argument("--steps", type=int, help="test-time adaptation steps")
    common.add_argument("--mode", choices=("L", "NL"), help="lexicon (L) or no-lexicon (NL) scoring")
    common.add_argument("--workers", type=int, help="concurrent task evaluations")
    common.add_argument("--out", help="output directory")
    common.add_argument("--init", help="pretrained checkpoint (meta-train)")
    common.add_argument("--checkpoint", help="checkpoint to evaluate or diagnose")
    common.add_argument("--name", help="output name (defaults to the variant)")
    common.add_argument("--arms", help="comma-separated ablation arms, k_sweep and step_sweep included "
                        "(default: all)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="writeradapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common])
    return parser


def _dotted(extra: list[str]) -> dict[str, str]:
    known = field_names()
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UserError(f"unexpected argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise UserError(f"flag --{key} needs a value")
            val = extra[i + 1]
            i += 1
        if key not in known:
            raise UserError(f"unknown flag --{key}")
        out[key] = val
        i += 1
    return out


def resolve_config(args, extra: list[str]) -> RunConfig:
    overrides: dict[str, object] = _dotted(extra)
    named = {"seed": args.seed, "train.variant": args.variant, "eval.k": args.k, "eval.n_steps": args.steps,
             "eval.mode": args.mode, "workers": args.workers}
    overrides.update({k: v for k, v in named.items() if v is not None})
    return load(args.config, overrides)


def _out(args, cfg: RunConfig, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UserError(f"cannot create output directory {out}: {exc}") from None
    return out


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _out(args, cfg, cfg.paths.checkpoint_dir)
    pool = X.build_pool(cfg)
    res = X.run_pretrain(cfg, pool)
    path = C.save_params(out / "pretrain", res.params, cfg.model, cfg.train.pretrain_epochs)
    X.write_curve(out / "pretrain_curve.csv", res.curve)
    (out / "pretrain_config.json").write_text(cfg.dumps() + "\n")
    print(path)
    return 0


def cmd_meta_train(args, cfg: RunConfig) -> int:
    out = _out(args, cfg, cfg.paths.checkpoint_dir)
    init = Path(args.init) if args.init else out / "pretrain.json"
    theta, _ = C.load_params(init, cfg.model)
    pool = X.build_pool(cfg)
    name = args.name or cfg.train.variant
    meta = X.new_meta(cfg, theta)
    target = out / name
    meta, curve = X.run_meta_train(cfg, meta, pool, callback=lambda m, row: C.save_meta(target, m, cfg.model))
    path = C.save_meta(target, meta, cfg.model)
    X.write_curve(out / f"{name}_curve.csv", curve)
    print(path)
    return 0


def _lexicon(cfg: RunConfig, pool: W.WriterPool):
    if cfg.eval.lexicon is None:
        return pool.lexicon
    try:
        return W.load_lexicon(cfg.eval.lexicon)
    except OSError as exc:
        raise UserError(f"lexicon not readable: {exc}") from None


def _checkpoint(args, cfg: RunConfig) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    return Path(cfg.paths.checkpoint_dir) / f"{args.name or cfg.train.variant}.json"


def cmd_evaluate(args, cfg: RunConfig) -> int:
    pool = X.build_pool(cfg)
    lexicon = _lexicon(cfg, pool) if cfg.eval.mode == "L" else None
    path = _checkpoint(args, cfg)
    meta = C.load_meta(path, cfg.model)
    variant = args.variant or meta.variant.value
    if variant == "finetune" and meta.variant is not ML.Variant.FINETUNE:
        meta = V.as_finetune(meta)
    elif variant != meta.variant.value:
        raise UserError(f"checkpoint {path} holds variant {meta.variant.value}, not {variant}")
    out = _out(args, cfg, cfg.paths.report_dir)
    report = X.evaluate(cfg, meta, pool, lexicon=lexicon, variant=args.name or variant)[cfg.eval.mode]
    stem = f"{args.name or variant}_k{cfg.eval.k}_s{cfg.eval.n_steps}_{cfg.eval.mode}"
    X.write_report(out, stem, report)
    agg = report.aggregate()
    print(f"{stem}: before {agg['before_mean']:.2f} after {agg['after_mean']:.2f}")
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    pool = X.build_pool(cfg)
    ckdir = Path(args.checkpoint or cfg.paths.checkpoint_dir)
    names = args.arms.split(",") if args.arms else [*X.ARMS, "k_sweep", "step_sweep"]
    sweeps = {n for n in names if n in ("k_sweep", "step_sweep")}
    unknown = set(names) - sweeps - set(X.ARMS)
    if unknown:
        raise UserError(f"unknown arms {sorted(unknown)}; choose from {[*X.ARMS, 'k_sweep', 'step_sweep']}")
    arms = {}
    for name in [n for n in names if n in X.ARMS]:
        path = ckdir / f"{name}.json"
        try:
            arms[name] = C.load_meta(path, cfg.model)
        except C.CheckpointError as exc:
            log.warning("skipping arm %s: %s", name, exc)
    if not arms:
        raise UserError(f"no arm checkpoints found in {ckdir}")
    e = cfg.eval
    if sweeps and "metahtr" not in arms:
        log.warning("skipping %s: the metahtr checkpoint is missing", ", ".join(sorted(sweeps)))
        sweeps = set()
    table = V.ablation_suite(arms, pool, cfg.model, e.k, e.n_steps, e.reps,
                             e.k_sweep if "k_sweep" in sweeps else (),
                             e.step_sweep if "step_sweep" in sweeps else (), "metahtr", e.mode, cfg.workers)
    out = _out(args, cfg, cfg.paths.report_dir)
    for arm in table.arms:
        (out / f"ablation_{arm}.csv").write_text(table.arm_csv(arm))
    (out / "ablation_summary.csv").write_text(table.summary_csv())
    (out / "ablation_summary.json").write_text(json.dumps(table.summary_rows(), indent=2) + "\n")
    for row in table.summary_rows():
        print(f"{row['arm']}: after {row['wra_after']:.2f}")
    return 0


def cmd_diagnose(args, cfg: RunConfig) -> int:
    pool = X.build_pool(cfg)
    meta = C.load_meta(_checkpoint(args, cfg), cfg.model)
    if not meta.weighted:
        raise UserError(f"variant {meta.variant.value} has no weight net to diagnose")
    diag = V.char_weight_diagnostic(meta, pool, cfg.model, k=cfg.eval.k, reps=cfg.eval.reps,
                                    min_count=cfg.eval.diagnostic_min_count)
    out = _out(args, cfg, cfg.paths.report_dir)
    (out / "char_weights.json").write_text(json.dumps(diag.to_dict(), indent=2) + "\n")
    rows = [{"char": c, "count": n, "accuracy": a, "gamma": g}
            for c, n, a, g in zip(diag.chars, diag.counts, diag.accuracy, diag.gamma)]
    X.write_curve(out / "char_weights.csv", rows)
    print(f"spearman rho {diag.spearman_rho:.3f}{' (degenerate)' if diag.degenerate else ''}")
    return 0


HANDLERS = {"pretrain": cmd_pretrain, "meta-train": cmd_meta_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, extra)
        return HANDLERS[args.command](args, cfg)
    except (UserError, ConfigError, C.CheckpointError, W.IneligibleWriter) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
