"""Character-weight diagnostic and controlled rig on a meta-trained checkpoint.

    python3 scripts/diagnose_weights.py --checkpoint runs/bundled/metahtr.json [--rig-steps 60] [--dotted.overrides ...]

Prints per-character accuracy and mean weight on the test writers' support
sets, their Spearman correlation, and the weight-net rig result.
"""

from __future__ import annotations

import argparse

from writeradapt import checkpoint as C
from writeradapt import config
from writeradapt import evaluation as V
from writeradapt import experiment as X


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", default="runs/bundled/metahtr.json")
    ap.add_argument("--rig-steps", type=int, default=60)
    ap.add_argument("--config")
    args, extra = ap.parse_known_args(argv)
    overrides = dict(X.BUNDLED_OVERRIDES)
    for tok in extra:
        key, _, val = tok.lstrip("-").partition("=")
        overrides[key] = val
    cfg = config.load(args.config, overrides)
    pool = X.build_pool(cfg)
    meta = C.load_meta(args.checkpoint, cfg.model)
    diag = V.char_weight_diagnostic(meta, pool, cfg.model, k=cfg.eval.k, reps=cfg.eval.reps,
                                    min_count=cfg.eval.diagnostic_min_count)
    print("char  count  accuracy  gamma")
    for c, n, a, g in sorted(zip(diag.chars, diag.counts, diag.accuracy, diag.gamma), key=lambda r: r[2]):
        print(f"{c:>4}  {n:5d}  {a:8.3f}  {g:.4f}")
    print(f"spearman rho {diag.spearman_rho:.3f}{' (degenerate)' if diag.degenerate else ''}")
    rig = V.controlled_rig(meta, pool, cfg.model, steps=args.rig_steps)
    print(f"rig before: hard {rig.before[0]:.4f} easy {rig.before[1]:.4f}")
    print(f"rig after:  hard {rig.gamma_hard:.4f} easy {rig.gamma_easy:.4f}")


if __name__ == "__main__":
    main()
