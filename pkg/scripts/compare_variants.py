"""Short meta-training of every variant from one pretrained checkpoint, then the k-shot protocol.

    python3 scripts/compare_variants.py --init runs/bundled/pretrain.json --out runs/variants \
        [--variants metahtr,maml,maml_fo,metasgd,anil,dg] [--train.meta_epochs=4] [--eval.reps=3]

Writes one report per variant and prints before/after WRA. The fine-tuning
baseline is evaluated from the pretrained weights directly.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from writeradapt import checkpoint as C
from writeradapt import config
from writeradapt import evaluation as V
from writeradapt import experiment as X

SHORT = {"train.meta_epochs": 4, "eval.reps": 3}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--init", default="runs/bundled/pretrain.json")
    ap.add_argument("--out", default="runs/variants")
    ap.add_argument("--variants", default="metahtr,maml,maml_fo,metasgd,anil,dg")
    ap.add_argument("--config")
    args, extra = ap.parse_known_args(argv)
    overrides = {**X.BUNDLED_OVERRIDES, **SHORT}
    for tok in extra:
        key, _, val = tok.lstrip("-").partition("=")
        overrides[key] = val
    cfg = config.load(args.config, overrides)
    pool = X.build_pool(cfg)
    theta, _ = C.load_params(args.init, cfg.model)
    out = Path(args.out)
    results = {"finetune": X.evaluate(cfg, V.as_finetune(X.new_meta(cfg, theta, "metahtr")), pool, variant="finetune")}
    for variant in args.variants.split(","):
        meta, curve = X.run_meta_train(cfg, X.new_meta(cfg, theta, variant), pool)
        C.save_meta(out / variant, meta, cfg.model)
        X.write_curve(out / f"{variant}_curve.csv", curve)
        results[variant] = X.evaluate(cfg, meta, pool, variant=variant)
    for name, reps in results.items():
        X.write_report(out / "reports", f"{name}_NL", reps["NL"])
        agg = reps["NL"].aggregate()
        print(f"{name:>9}: before {agg['before_mean']:6.2f}  after {agg['after_mean']:6.2f} +- {agg['after_std']:.2f}")


if __name__ == "__main__":
    main()
