import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from writeradapt import evaluation as V
from writeradapt import metalearn as ML
from writeradapt import recognizer as R
from writeradapt import writers as W

SMALL = R.ModelConfig(hidden=8, embedding=4, attention=4)
words = st.text(alphabet="abcde", max_size=6)


@pytest.fixture(scope="module")
def pool():
    return W.make_pool(2, 2, seed=3)


@pytest.fixture(scope="module")
def meta():
    return ML.init_meta(R.init_params(SMALL, 0), "metahtr", SMALL, seed=0)


# --- metrics --------------------------------------------------------------------


@pytest.mark.parametrize("a,b,d", [
    ("kitten", "sitting", 3), ("", "abc", 3), ("abc", "abc", 0), ("flaw", "lawn", 2), ("a", "", 1),
])
def test_edit_distance_examples(a, b, d):
    assert V.edit_distance(a, b) == d == V.edit_distance(b, a)


@settings(max_examples=50, deadline=None)
@given(a=words, b=words, c=words)
def test_edit_distance_is_a_metric(a, b, c):
    assert (V.edit_distance(a, b) == 0) == (a == b)
    assert V.edit_distance(a, c) <= V.edit_distance(a, b) + V.edit_distance(b, c)
    assert abs(len(a) - len(b)) <= V.edit_distance(a, b) <= max(len(a), len(b))


def test_lexicon_decode_examples():
    assert V.lexicon_decode("covld", ["could", "world"]) == "could"
    assert V.lexicon_decode("covld", ["could", "cold"]) == "cold"  # both one edit away
    assert V.lexicon_decode("", ["bb", "a"]) == "a"
    assert V.lexicon_decode("ab", ["ac", "aa"]) == "aa"  # tie goes to the smaller word
    with pytest.raises(ValueError):
        V.lexicon_decode("a", [])


def test_wra_examples():
    assert V.word_recognition_accuracy(["cat", "dog"], ["cat", "dot"]) == 50.0
    assert V.word_recognition_accuracy(["cat", "dot"], ["cat", "dog"], "L", ["cat", "dog"]) == 100.0
    with pytest.raises(ValueError, match="lexicon"):
        V.word_recognition_accuracy(["a"], ["a"], "L")
    with pytest.raises(ValueError):
        V.word_recognition_accuracy([], [])
    with pytest.raises(ValueError, match="mode"):
        V.word_recognition_accuracy(["a"], ["a"], "X")


@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_lexicon_never_hurts_in_vocabulary_words(data):
    lex = data.draw(st.lists(words, min_size=1, max_size=8, unique=True))
    n = data.draw(st.integers(1, 8))
    gts = data.draw(st.lists(st.sampled_from(lex), min_size=n, max_size=n))
    preds = data.draw(st.lists(words, min_size=n, max_size=n))
    nl = V.word_recognition_accuracy(preds, gts)
    assert V.word_recognition_accuracy(preds, gts, "L", lex) >= nl
    assert 0 <= nl <= 100


# --- reports --------------------------------------------------------------------


def _report():
    rows = [V.ReportRow("metahtr", w, r, 16, 1, "NL", 10.0 * w + r, 20.0 * w + r / 3)
            for w in (3, 5) for r in range(3)]
    return V.EvalReport("metahtr", "NL", 16, 1, 3, rows)


def test_report_aggregate_is_over_writer_means():
    agg = _report().aggregate()
    assert agg["before_mean"] == pytest.approx(41.0)
    assert agg["before_std"] == pytest.approx(10.0)
    assert agg["after_mean"] == pytest.approx(80 + 1 / 3)
    assert np.isnan(V.EvalReport("x", "NL", 1, 1, 1).aggregate()["after_mean"])


def test_report_round_trips():
    rep = _report()
    assert V.EvalReport.from_json(rep.to_json()) == rep
    assert V.rows_from_csv(rep.to_csv()) == rep.rows
    assert rep.to_csv().splitlines()[0] == ",".join(V.CSV_COLUMNS)
    assert json.loads(rep.to_json())["aggregate"] == rep.aggregate()


# --- protocol -------------------------------------------------------------------


def test_zero_shot_leaves_accuracy_unchanged(meta, pool):
    rep = V.run_protocol(meta, pool, SMALL, k=0, n_steps=1, reps=2)["NL"]
    assert rep.rows and all(r.wra_before == r.wra_after for r in rep.rows)


def test_protocol_rows_and_modes(meta, pool):
    reps = V.run_protocol(meta, pool, SMALL, k=4, n_steps=1, reps=2, modes=("NL", "L"))
    assert set(reps) == {"NL", "L"}
    for mode, rep in reps.items():
        assert len(rep.rows) == 2 * 2
        assert {r.mode for r in rep.rows} == {mode}
    for nl, lx in zip(reps["NL"].rows, reps["L"].rows):
        assert lx.wra_before >= nl.wra_before and lx.wra_after >= nl.wra_after


def test_protocol_is_deterministic_and_order_free(meta, pool):
    ids = [w.writer_id for w in pool.test_writers]
    a = V.run_protocol(meta, pool, SMALL, k=4, reps=2, writers=ids)["NL"]
    b = V.run_protocol(meta, pool, SMALL, k=4, reps=2, writers=ids[::-1], workers=2)["NL"]
    assert a.to_csv() == b.to_csv()


def test_no_eligible_writers_is_an_error(meta, pool):
    with pytest.raises(W.IneligibleWriter):
        V.run_protocol(meta, pool, SMALL, k=48, reps=1)


def test_finetune_copy_keeps_weights(meta):
    ft = V.as_finetune(meta)
    assert ft.variant is ML.Variant.FINETUNE and meta.variant is ML.Variant.METAHTR
    assert all(np.array_equal(ft.theta[l][n], meta.theta[l][n]) for l in meta.theta for n in meta.theta[l])


def test_ablation_suite_structure(meta, pool):
    arms = {"metahtr": meta, "no_gamma": ML.init_meta(meta.theta, "metahtr", SMALL, weighted=False)}
    table = V.ablation_suite(arms, pool, SMALL, k=2, reps=1, k_sweep=(2, 1), step_sweep=(1,))
    assert list(table.arms) == ["metahtr", "no_gamma", "k_sweep", "step_sweep"]
    assert [k for k, _ in table.k_sweep()] == [1, 2]
    assert len(table.summary_rows()) == 5
    assert table.summary_csv().count("\n") == 6
    assert V.rows_from_csv(table.arm_csv("no_gamma"))[0].variant == "no_gamma"
    with pytest.raises(KeyError):
        V.ablation_suite({"no_gamma": arms["no_gamma"]}, pool, SMALL, k=2, reps=1, k_sweep=(1,))


# --- character weights ----------------------------------------------------------


def test_summary_of_synthetic_weights():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 6, size=600)
    acc = np.linspace(0.2, 0.9, 6)
    correct = rng.random(600) < acc[labels]
    weights = 1.0 - acc[labels] + rng.normal(0, 0.01, 600)
    diag = V.summarise_weights(labels, correct, weights, min_count=5)
    assert diag.chars == list("abcdef") and not diag.degenerate
    assert diag.spearman_rho < -0.8
    assert -1 <= diag.spearman_rho <= 1


def test_constant_weights_are_degenerate(meta, pool):
    m = meta.copy()
    m.gamma["W3"][:] = 0.0
    diag = V.char_weight_diagnostic(m, pool, SMALL, k=16, reps=1)
    assert diag.degenerate and diag.spearman_rho == 0.0
    assert all(g == 0.5 for g in diag.gamma)
    assert all(n >= 5 for n in diag.counts)


def test_rare_characters_are_dropped():
    labels = np.array([0] * 5 + [1] * 4 + [2] * 5 + [3] * 5 + [26] * 5)
    diag = V.summarise_weights(labels, np.ones(24, bool), np.ones(24), min_count=5)
    assert diag.chars == ["a", "c", "d"] and diag.degenerate


def test_diagnostic_needs_weight_net(pool):
    m = ML.init_meta(R.init_params(SMALL, 0), "maml", SMALL)
    with pytest.raises(ValueError, match="weight net"):
        V.char_weight_diagnostic(m, pool, SMALL, reps=1)
