"""Word recognition accuracy, the k-shot adaptation protocol, ablations and the
character-weight diagnostic."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from . import metalearn as ML
from . import recognizer as R
from .recognizer import ModelConfig
from .writers import ALPHABET, IneligibleWriter, WordImage, WriterPool, make_eval_split, sample_task

log = logging.getLogger(__name__)

CSV_COLUMNS = ("variant", "writer_id", "rep", "k", "n_steps", "mode", "wra_before", "wra_after")


# --- metrics --------------------------------------------------------------------


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def lexicon_decode(raw: str, lexicon) -> str:
    """Nearest lexicon word by edit distance; ties go to the lexicographically smallest."""
    if not lexicon:
        raise ValueError("lexicon is empty")
    return min(lexicon, key=lambda w: (edit_distance(raw, w), w))


def word_recognition_accuracy(preds, gts, mode: str = "NL", lexicon=None) -> float:
    """Percentage of exact word matches, after lexicon snapping in mode ``L``."""
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise ValueError(f"need equal non-empty lists, got {len(preds)} predictions and {len(gts)} labels")
    if mode == "L":
        if not lexicon:
            raise ValueError("mode L needs a lexicon")
        snapped = {p: lexicon_decode(p, lexicon) for p in set(preds)}
        preds = [snapped[p] for p in preds]
    elif mode != "NL":
        raise ValueError(f"mode must be L or NL, got {mode!r}")
    return 100.0 * sum(p == g for p, g in zip(preds, gts)) / len(gts)


# --- reports --------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    variant: str
    writer_id: int
    rep: int
    k: int
    n_steps: int
    mode: str
    wra_before: float
    wra_after: float


@dataclass
class EvalReport:
    variant: str
    mode: str
    k: int
    n_steps: int
    reps: int
    rows: list[ReportRow] = field(default_factory=list)

    def per_writer(self) -> dict[int, tuple[float, float]]:
        out: dict[int, list] = {}
        for r in self.rows:
            out.setdefault(r.writer_id, []).append((r.wra_before, r.wra_after))
        return {w: tuple(np.mean(v, axis=0).tolist()) for w, v in sorted(out.items())}

    def aggregate(self) -> dict[str, float]:
        """Mean and std over per-writer means."""
        pw = np.array(list(self.per_writer().values())) if self.rows else np.zeros((0, 2))
        if not len(pw):
            return {"before_mean": math.nan, "before_std": math.nan, "after_mean": math.nan, "after_std": math.nan}
        return {
            "before_mean": float(pw[:, 0].mean()), "before_std": float(pw[:, 0].std()),
            "after_mean": float(pw[:, 1].mean()), "after_std": float(pw[:, 1].std()),
        }

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "mode": self.mode, "k": self.k, "n_steps": self.n_steps, "reps": self.reps,
            "aggregate": self.aggregate(), "rows": [asdict(r) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        rows = [ReportRow(**r) for r in d["rows"]]
        return cls(d["variant"], d["mode"], d["k"], d["n_steps"], d["reps"], rows)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([getattr(r, c) if not isinstance(getattr(r, c), float) else repr(getattr(r, c))
                         for c in CSV_COLUMNS])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[ReportRow]:
    kinds = dict(variant=str, writer_id=int, rep=int, k=int, n_steps=int, mode=str, wra_before=float, wra_after=float)
    return [ReportRow(**{c: kinds[c](row[c]) for c in CSV_COLUMNS}) for row in csv.DictReader(io.StringIO(text))]


# --- protocol -------------------------------------------------------------------


def as_finetune(meta: ML.MetaParams) -> ML.MetaParams:
    """The same initial weights, adapted by plain gradient descent."""
    return replace(meta.copy(), variant=ML.Variant.FINETUNE)


def _one_rep(meta, pool, writer_id, rep, k, n_steps, cfg, finetune_lr, before_cache):
    support, evalset = make_eval_split(pool, writer_id, k, rep_seed=rep)
    gts = [im.word for im in evalset]
    missing = [im for im in evalset if (writer_id, im.sample_seed) not in before_cache]
    if missing:
        for im, p in zip(missing, R.recognize(missing, meta.theta, cfg)):
            before_cache[(writer_id, im.sample_seed)] = p
    before = [before_cache[(writer_id, im.sample_seed)] for im in evalset]
    if n_steps == 0 or k == 0:
        after = before
    else:
        adapted = ML.adapt(meta, support, n_steps, cfg, finetune_lr)
        after = R.recognize(evalset, adapted, cfg)
    return gts, before, after


def run_protocol(
    meta: ML.MetaParams,
    pool: WriterPool,
    cfg: ModelConfig,
    k: int = 16,
    n_steps: int = 1,
    reps: int = 10,
    modes=("NL",),
    lexicon=None,
    variant: str | None = None,
    finetune_lr: float = 1e-3,
    writers=None,
    workers: int = 1,
) -> dict[str, EvalReport]:
    """Adapt on ``k`` images of each test writer and score the rest, ``reps`` times.

    Splits depend only on (pool, writer, rep), so every variant sees the same
    ones. Returns one report per requested mode, built from the same decodes.
    """
    variant = variant or meta.variant.value
    lexicon = pool.lexicon if lexicon is None else lexicon
    if "L" in modes and not lexicon:
        raise ValueError("mode L needs a lexicon")
    writer_ids = sorted(w.writer_id for w in pool.test_writers) if writers is None else sorted(writers)
    jobs = [(w, r) for w in writer_ids for r in range(reps)]
    cache: dict = {}

    def run(job):
        w, r = job
        try:
            return _one_rep(meta, pool, w, r, k, n_steps, cfg, finetune_lr, cache)
        except IneligibleWriter as exc:
            return exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    reports = {m: EvalReport(variant, m, k, n_steps, reps) for m in modes}
    skipped = set()
    for (w, r), res in zip(jobs, results):
        if isinstance(res, IneligibleWriter):
            if w not in skipped:
                log.warning("skipping writer %d: %s", w, res)
                skipped.add(w)
            continue
        gts, before, after = res
        for m in modes:
            reports[m].rows.append(ReportRow(
                variant, w, r, k, n_steps, m,
                word_recognition_accuracy(before, gts, m, lexicon),
                word_recognition_accuracy(after, gts, m, lexicon),
            ))
    if all(not rep.rows for rep in reports.values()):
        raise IneligibleWriter("no eligible test writers")
    return reports


# --- ablations ------------------------------------------------------------------


@dataclass
class AblationTable:
    """Reports grouped by arm; sweep arms hold one report per sweep point."""

    arms: dict[str, list[EvalReport]] = field(default_factory=dict)

    def summary_rows(self) -> list[dict]:
        out = []
        for arm, reports in self.arms.items():
            for rep in reports:
                agg = rep.aggregate()
                out.append({"arm": arm, "variant": rep.variant, "k": rep.k, "n_steps": rep.n_steps,
                            "mode": rep.mode, "wra_before": agg["before_mean"], "wra_after": agg["after_mean"],
                            "wra_after_std": agg["after_std"]})
        return out

    def summary_csv(self) -> str:
        cols = ["arm", "variant", "k", "n_steps", "mode", "wra_before", "wra_after", "wra_after_std"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(self.summary_rows())
        return buf.getvalue()

    def arm_csv(self, arm: str) -> str:
        return rows_to_csv([r for rep in self.arms[arm] for r in rep.rows])

    def after(self, arm: str) -> float:
        return self.arms[arm][0].aggregate()["after_mean"]

    def k_sweep(self) -> list[tuple[int, float]]:
        return [(rep.k, rep.aggregate()["after_mean"]) for rep in self.arms.get("k_sweep", [])]


def ablation_suite(
    arms: dict[str, ML.MetaParams],
    pool: WriterPool,
    cfg: ModelConfig,
    k: int = 16,
    n_steps: int = 1,
    reps: int = 10,
    k_sweep=(),
    step_sweep=(),
    sweep_arm: str = "metahtr",
    mode: str = "NL",
    workers: int = 1,
) -> AblationTable:
    """One report per arm at (k, n_steps), plus ``k_sweep`` and ``step_sweep`` arms of ``sweep_arm``.

    ``arms`` maps an arm name (``metahtr``, ``no_gamma``, ``fixed_alpha``, ...)
    to its meta-trained parameters. Every report uses the same splits.
    """
    table = AblationTable()

    def run(meta, kk, ss, name):
        return run_protocol(meta, pool, cfg, kk, ss, reps, (mode,), variant=name, workers=workers)[mode]

    for name, meta in arms.items():
        table.arms[name] = [run(meta, k, n_steps, name)]
    if (k_sweep or step_sweep) and sweep_arm not in arms:
        raise KeyError(f"sweep arm {sweep_arm!r} not among {sorted(arms)}")
    if k_sweep:
        table.arms["k_sweep"] = [run(arms[sweep_arm], kk, n_steps, sweep_arm) for kk in sorted(k_sweep)]
    if step_sweep:
        table.arms["step_sweep"] = [run(arms[sweep_arm], k, s, sweep_arm) for s in sorted(step_sweep)]
    return table


# --- character weights ----------------------------------------------------------


@dataclass
class CharDiagnostic:
    chars: list[str]
    counts: list[int]
    accuracy: list[float]
    gamma: list[float]
    spearman_rho: float
    degenerate: bool

    def to_dict(self) -> dict:
        return asdict(self)


def step_weights(meta: ML.MetaParams, images: list[WordImage], cfg: ModelConfig):
    """Teacher-forced stepwise correctness, labels and predicted weights at the meta weights."""
    if not meta.weighted:
        raise ValueError(f"variant {meta.variant.value} has no weight net")
    nodes = R.as_nodes(meta.theta, requires_grad=False)
    trace = R.teacher_forced(R.make_batch(images, cfg), nodes, cfg)
    G = ML.classifier_step_gradients(trace)
    w = ML.predict_weights(G, meta.gamma).value[:, 0]
    correct = trace.logits.argmax(axis=1) == trace.labels
    return trace.labels, correct, w


def summarise_weights(labels, correct, weights, min_count: int = 5, alphabet: str = ALPHABET) -> CharDiagnostic:
    """Per-character accuracy and mean weight; Spearman rho over well-observed characters."""
    chars, counts, acc, gam = [], [], [], []
    for c in range(len(alphabet)):
        sel = labels == c
        if sel.sum() >= min_count:
            chars.append(alphabet[c])
            counts.append(int(sel.sum()))
            acc.append(float(correct[sel].mean()))
            gam.append(float(weights[sel].mean()))
    degenerate = len(chars) < 3 or np.ptp(acc) == 0 or np.ptp(gam) == 0
    rho = 0.0 if degenerate else float(stats.spearmanr(acc, gam).statistic)
    return CharDiagnostic(chars, counts, acc, gam, rho, bool(degenerate))


def char_weight_diagnostic(
    meta: ML.MetaParams, pool: WriterPool, cfg: ModelConfig, writers=None, k: int = 16, reps: int = 10,
    min_count: int = 5,
) -> CharDiagnostic:
    """Pool the support sets of the test writers and compare accuracy with weight, per character."""
    writer_ids = sorted(w.writer_id for w in pool.test_writers) if writers is None else list(writers)
    labels, correct, weights = [], [], []
    for w in writer_ids:
        for r in range(reps):
            try:
                support, _ = make_eval_split(pool, w, k, rep_seed=r)
            except IneligibleWriter:
                break
            lab, cor, wt = step_weights(meta, support, cfg)
            labels.append(lab)
            correct.append(cor)
            weights.append(wt)
    if not labels:
        raise IneligibleWriter("no eligible writers for the diagnostic")
    return summarise_weights(np.concatenate(labels), np.concatenate(correct), np.concatenate(weights), min_count)


# --- controlled rig ---------------------------------------------------------------


@dataclass
class RigResult:
    gamma_hard: float
    gamma_easy: float
    before: tuple[float, float]
    losses: list[float]


def controlled_rig(
    meta: ML.MetaParams, pool: WriterPool, cfg: ModelConfig, hard_chars: str = "aeiou",
    steps: int = 60, beta: float = 3e-3, seed: int = 0,
) -> RigResult:
    """Train only the weight net on tasks whose validation labels corrupt ``hard_chars``.

    In every task the support labels of ``hard_chars`` are rotated to a wrong
    class (forced high CE). An inner step that follows those labels hurts the
    validation loss, so a weight net trained through the inner step should
    push their weights below those of the clean characters.
    """
    if not meta.weighted:
        raise ValueError("the rig needs a weighted variant")
    rig = replace(meta.copy(), learn_alpha=False, opt=R.Adam())
    hard = {ALPHABET.index(c) for c in hard_chars}
    rng = np.random.default_rng(seed)
    train_ids = [w.writer_id for w in pool.train_writers]

    def corrupt(img: WordImage) -> WordImage:
        lab = tuple((c + 1) % len(ALPHABET) if c in hard else c for c in img.label)
        return replace(img, label=lab)

    def gamma_means(clean):
        _, _, w = step_weights(rig, [corrupt(im) for im in clean], cfg)
        labels = np.concatenate([im.label for im in clean])
        is_hard = np.isin(labels, list(hard))
        return float(w[is_hard].mean()), float(w[~is_hard & (labels < len(ALPHABET))].mean())

    probe = list(sample_task(pool, train_ids[0], 32, seed=10**6).support)
    before = gamma_means(probe)
    losses = []
    for s in range(steps):
        ws = rng.choice(train_ids, size=min(4, len(train_ids)), replace=False)
        tasks = []
        for w in ws:
            t = sample_task(pool, int(w), 16, seed=s)
            tasks.append(replace(t, support=tuple(corrupt(im) for im in t.support)))
        grads, st = ML.meta_gradient(rig, tasks, cfg)
        grads = {k: v for k, v in grads.items() if k.startswith("gamma/")}
        flat = rig.flat()
        rig.opt.lr = beta
        flat.update(rig.opt.step({k: flat[k] for k in grads}, grads))
        rig.load_flat(flat)
        losses.append(st.loss)
    hard_mean, easy_mean = gamma_means(probe)
    return RigResult(hard_mean, easy_mean, before, losses)
