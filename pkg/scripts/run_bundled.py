"""Bundled desk experiment: pretrain, meta-train the ablation arms, and report.

    python3 scripts/run_bundled.py --out runs/bundled [--arms metahtr,no_gamma,fixed_alpha] [--dotted.overrides ...]

Checkpoints are reused when present, so the script can be re-run to resume.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from writeradapt import config
from writeradapt import evaluation as V
from writeradapt import experiment as X


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/bundled")
    ap.add_argument("--arms", default=",".join(X.ARMS))
    ap.add_argument("--config")
    args, extra = ap.parse_known_args(argv)
    overrides = dict(X.BUNDLED_OVERRIDES)
    for tok in extra:
        key, _, val = tok.lstrip("-").partition("=")
        overrides[key] = val
    cfg = config.load(args.config, overrides)
    t0 = time.perf_counter()
    run = X.bundled_run(cfg, args.out, args.arms.split(","))
    pool, arms = run["pool"], run["arms"]
    out = Path(args.out)
    summary = {"timings": run["timings"]}
    for name, meta in arms.items():
        rep = X.evaluate(cfg, meta, pool, modes=("NL", "L"), variant=name)
        for mode, r in rep.items():
            X.write_report(out / "reports", f"{name}_{mode}", r)
            summary[f"{name}_{mode}"] = r.aggregate()
        print(name, rep["NL"].aggregate())
    if "metahtr" in arms:
        ft = X.evaluate(cfg, V.as_finetune(arms["metahtr"]), pool, variant="finetune")["NL"]
        X.write_report(out / "reports", "finetune_NL", ft)
        summary["finetune_NL"] = ft.aggregate()
        print("finetune", ft.aggregate())
        diag = V.char_weight_diagnostic(arms["metahtr"], pool, cfg.model)
        summary["char_weight_rho"] = diag.spearman_rho
        print("char weight rho", diag.spearman_rho)
    summary["total_seconds"] = time.perf_counter() - t0
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
