import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from writeradapt import writers as W


@pytest.fixture(scope="module")
def pool():
    return W.make_pool(seed=0)


def test_bundled_assets():
    glyphs = W.canonical_glyphs()
    assert sorted(glyphs) == list(W.ALPHABET)
    assert all(g.shape == (W.GLYPH_H, W.GLYPH_W) for g in glyphs.values())
    lex = W.load_lexicon()
    assert len(lex) == 200 and len(set(lex)) == 200
    assert all(w.isalpha() and w.islower() and len(w) <= 10 for w in lex)


def test_pool_counts_and_determinism():
    a, b = W.make_pool(4, 2, seed=7), W.make_pool(4, 2, seed=7)
    assert a == b
    assert len(a.train_writers) == 4 and len(a.test_writers) == 2
    train_seeds = {w.seed for w in a.train_writers}
    assert train_seeds.isdisjoint(w.seed for w in a.test_writers)
    assert W.make_pool(4, 2, seed=8) != a


def test_pool_minimum_counts():
    W.make_pool(2, 1)
    with pytest.raises(ValueError, match="n_train"):
        W.make_pool(1, 1)
    with pytest.raises(ValueError, match="n_test"):
        W.make_pool(2, 0)


def test_identity_style_is_pure_composition():
    style = W.WriterStyle(writer_id=0, seed=3)
    im = W.render_word(style, "hello", sample_seed=11)
    assert np.array_equal(im.pixels, W.compose("hello", W.canonical_glyphs()))
    assert im.label == (7, 4, 11, 11, 14, 26)


def test_render_is_deterministic(pool):
    style = pool.train_writers[0]
    a = W.render_word(style, "paper", 5)
    b = W.render_word(style, "paper", 5)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1


def test_word_too_long_rejected():
    with pytest.raises(ValueError, match="too long"):
        W.render_word(W.WriterStyle(0, 0), "a" * (W.max_word_length() + 1), 0)
    with pytest.raises(ValueError, match="charset"):
        W.encode_word("Hi")


@settings(max_examples=10, deadline=None)
@given(slant=st.floats(-0.4, 0.4))
def test_shear_is_nearly_invertible(slant):
    """Shear by s then -s: mean pixel error over the lexicon stays within interpolation error."""
    glyphs = W.canonical_glyphs()
    errs = [np.mean(np.abs(W.shear(W.shear(img, slant), -slant) - img))
            for img in (W.compose(w, glyphs) for w in W.load_lexicon())]
    assert np.mean(errs) < 0.02


def test_writers_differ_on_the_same_word(pool):
    a, b = pool.train_writers[0], pool.train_writers[1]
    diffs = []
    for i, word in enumerate(pool.lexicon[:20]):
        pa, pb = W.render_word(a, word, i).pixels, W.render_word(b, word, i).pixels
        diffs.append(np.mean(np.abs(pa - pb) > 0.25))
    assert np.mean(diffs) >= 0.05


def test_warped_glyphs_keep_gap():
    style = W.WriterStyle(0, 1, glyph_warp_seed=4, warped_chars="aeq", warp_flip_prob=0.5)
    base = W.canonical_glyphs()
    for ch in "aeq":
        assert not np.array_equal(style.glyphs[ch], base[ch])
        assert np.all(style.glyphs[ch][:, -1] == 0)
    assert np.array_equal(style.glyphs["b"], base["b"])


def test_sample_task_sizes_and_disjointness(pool):
    t = W.sample_task(pool, 3, B=16, seed=2)
    assert len(t.support) == len(t.val) == 16
    seeds = {im.sample_seed for im in t.support} | {im.sample_seed for im in t.val}
    assert len(seeds) == 32
    assert all(im.writer_id == 3 for im in t.support + t.val)
    one = W.sample_task(pool, 3, B=1, seed=2)
    assert len(one.support) == len(one.val) == 1


def test_sample_task_reproducible(pool):
    a, b = W.sample_task(pool, 1, 4, seed=9), W.sample_task(pool, 1, 4, seed=9)
    assert [im.sample_seed for im in a.support] == [im.sample_seed for im in b.support]
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.val, b.val))
    c = W.sample_task(pool, 1, 4, seed=10)
    assert [im.sample_seed for im in a.support] != [im.sample_seed for im in c.support]


def test_empty_lexicon_rejected():
    p = W.make_pool(2, 1, lexicon=())
    with pytest.raises(ValueError, match="lexicon"):
        W.sample_task(p, 0, 2)


def test_eval_split_examples(pool):
    w = pool.test_writers[0].writer_id
    sup, ev = W.make_eval_split(pool, w, k=16, total_n=40)
    assert len(sup) == 16 and len(ev) == 24
    assert {im.sample_seed for im in sup}.isdisjoint(im.sample_seed for im in ev)
    sup0, ev0 = W.make_eval_split(pool, w, k=0, total_n=40)
    assert sup0 == [] and len(ev0) == 40
    with pytest.raises(W.IneligibleWriter, match="32"):
        W.make_eval_split(pool, w, k=16, total_n=32)
    with pytest.raises(W.IneligibleWriter):
        W.make_eval_split(pool, w, k=40, total_n=40)


def test_eval_split_deterministic_per_rep(pool):
    w = pool.test_writers[1].writer_id
    reps = [W.make_eval_split(pool, w, 16, rep_seed=r) for r in range(10)]
    again = W.make_eval_split(pool, w, 16, rep_seed=3)
    assert [im.sample_seed for im in again[0]] == [im.sample_seed for im in reps[3][0]]
    assert len({tuple(im.sample_seed for im in s) for s, _ in reps}) == 10


def test_pooled_training_images(pool):
    images = W.pooled_training_images(pool)
    assert len(images) == 20 * pool.images_per_train_writer
    assert {im.writer_id for im in images} == {w.writer_id for w in pool.train_writers}
