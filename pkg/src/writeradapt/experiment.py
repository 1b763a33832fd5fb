"""Glue between a RunConfig and the library: pool, pretraining, meta-training, evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

from . import checkpoint as C
from . import evaluation as V
from . import metalearn as ML
from . import recognizer as R
from . import writers as W
from .config import RunConfig

log = logging.getLogger(__name__)

# ablation arm name -> overrides on the metahtr variant
ARMS = {
    "metahtr": {},
    "no_gamma": {"weighted": False},
    "fixed_alpha": {"learn_alpha": False},
}

# the bundled desk run: defaults plus a faster outer rate for the short meta-training budget
BUNDLED_OVERRIDES = {"train.beta": 1e-3}


def build_pool(cfg: RunConfig) -> W.WriterPool:
    p = cfg.pool
    lexicon = W.load_lexicon(p.lexicon) if p.lexicon else None
    return W.make_pool(p.n_train, p.n_test, p.seed, p.ranges(), lexicon,
                       p.images_per_train_writer, p.images_per_test_writer)


def run_pretrain(cfg: RunConfig, pool: W.WriterPool) -> R.PretrainResult:
    params = R.init_params(cfg.model, cfg.seed)
    images = W.pooled_training_images(pool)
    t = cfg.train
    return R.pretrain(images, params, cfg.model, t.pretrain_epochs, t.batch_size, t.pretrain_lr, cfg.seed)


def new_meta(cfg: RunConfig, theta: R.ParamSet, variant: str | None = None, **overrides) -> ML.MetaParams:
    t = cfg.train
    kw = {"weighted": t.weighted, "learn_alpha": t.learn_alpha}
    kw.update(overrides)
    return ML.init_meta(theta, variant or t.variant, cfg.model, t.inner_lr, seed=cfg.seed, **kw)


def run_meta_train(cfg: RunConfig, meta: ML.MetaParams, pool: W.WriterPool, callback=None):
    t = cfg.train
    return ML.meta_train(meta, pool, cfg.model, t.meta_epochs, t.steps_per_epoch, t.M, t.B, t.beta,
                         cfg.seed, cfg.workers, t.dg_lambda, t.dg_inner_lr, callback)


def train_arm(cfg: RunConfig, theta: R.ParamSet, pool: W.WriterPool, arm: str) -> tuple[ML.MetaParams, list]:
    meta = new_meta(cfg, theta, "metahtr", **ARMS[arm])
    return run_meta_train(cfg, meta, pool)


def evaluate(cfg: RunConfig, meta: ML.MetaParams, pool: W.WriterPool, modes=None, lexicon=None,
             variant: str | None = None) -> dict[str, V.EvalReport]:
    e = cfg.eval
    return V.run_protocol(meta, pool, cfg.model, e.k, e.n_steps, e.reps, modes or (e.mode,), lexicon,
                          variant, e.finetune_lr, workers=cfg.workers)


def write_curve(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_report(out_dir, name: str, report: V.EvalReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.json").write_text(report.to_json() + "\n")
    (out / f"{name}.csv").write_text(report.to_csv())


def load_arm(path, cfg: RunConfig) -> ML.MetaParams:
    return C.load_meta(path, cfg.model)


def bundled_run(cfg: RunConfig, out_dir, arms=("metahtr",), log_fn=print) -> dict:
    """Pretrain once, meta-train each arm, and keep checkpoints and curves in ``out_dir``.

    Existing checkpoints in ``out_dir`` that match the model config are reused,
    so an interrupted run resumes at the next missing stage. Wall-clock seconds
    of each stage are kept in ``timings.json`` and survive reuse. Returns
    ``{"pool", "theta", "arms": {name: MetaParams}, "timings": {stage: seconds}}``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing_path = out / "timings.json"
    timings = json.loads(timing_path.read_text()) if timing_path.exists() else {}

    def record(stage, t0):
        timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - t0
        timing_path.write_text(json.dumps(timings, indent=2) + "\n")

    pool = build_pool(cfg)
    pre = out / "pretrain.json"
    if pre.exists():
        theta, _ = C.load_params(pre, cfg.model)
    else:
        t0 = time.perf_counter()
        res = run_pretrain(cfg, pool)
        theta = res.params
        C.save_params(pre, theta, cfg.model, cfg.train.pretrain_epochs)
        write_curve(out / "pretrain_curve.csv", res.curve)
        record("pretrain", t0)
    log_fn(f"pretrain: {timings.get('pretrain', 0.0):.0f}s")
    trained = {}
    for arm in arms:
        path = out / f"{arm}.json"
        meta = C.load_meta(path, cfg.model) if path.exists() else None
        if meta is None or meta.epoch < cfg.train.meta_epochs:
            t0 = time.perf_counter()
            meta = meta or new_meta(cfg, theta, "metahtr", **ARMS[arm])
            meta, curve = run_meta_train(cfg, meta, pool, callback=lambda m, row: C.save_meta(path, m, cfg.model))
            C.save_meta(path, meta, cfg.model)
            if curve:
                write_curve(out / f"{arm}_curve.csv", curve)
            record(arm, t0)
        trained[arm] = meta
        log_fn(f"{arm}: {timings.get(arm, 0.0):.0f}s")
    return {"pool": pool, "theta": theta, "arms": trained, "timings": timings}
