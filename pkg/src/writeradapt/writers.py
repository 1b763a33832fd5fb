"""Synthetic writer styles, word rendering and episodic task sampling.

Each writer is a small bundle of style knobs (slant, stroke thickness, pixel
noise, baseline offset) plus a handful of idiosyncratic glyphs whose strokes
are perturbed. The idiosyncratic glyphs are what one-step adaptation has to
pick up from the support set.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import ndimage

GLYPH_H, GLYPH_W = 8, 6
CANVAS_H, CANVAS_W = 16, 64
LEFT_MARGIN = 2
TOP = 4
ALPHABET = "abcdefghijklmnopqrstuvwxyz"
MIN_EVAL_IMAGES = 32


class IneligibleWriter(ValueError):
    pass


@dataclass(frozen=True)
class WordImage:
    pixels: np.ndarray
    label: tuple[int, ...]  # character indices followed by EOS
    word: str
    writer_id: int = -1
    sample_seed: int = 0


def parse_glyphs(text: str) -> dict[str, np.ndarray]:
    rows = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("# ")]
    glyphs = {}
    for i in range(0, len(rows), GLYPH_H + 1):
        ch, bitmap = rows[i], rows[i + 1 : i + 1 + GLYPH_H]
        if len(ch) != 1 or len(bitmap) != GLYPH_H or any(len(r) != GLYPH_W for r in bitmap):
            raise ValueError(f"malformed glyph block for {ch!r}")
        glyphs[ch] = np.array([[c == "#" for c in r] for r in bitmap], dtype=np.float64)
    return glyphs


@functools.lru_cache(maxsize=None)
def canonical_glyphs() -> dict[str, np.ndarray]:
    text = resources.files("writeradapt").joinpath("data/glyphs.txt").read_text()
    return parse_glyphs(text)


def load_lexicon(path=None) -> tuple[str, ...]:
    if path is None:
        text = resources.files("writeradapt").joinpath("data/lexicon.txt").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    words = tuple(w.strip() for w in text.splitlines() if w.strip())
    bad = [w for w in words if not w.isalpha() or not w.islower() or len(w) > max_word_length()]
    if bad:
        raise ValueError(f"lexicon words must be lowercase a-z of length <= {max_word_length()}: {bad[:5]}")
    return words


def max_word_length() -> int:
    return (CANVAS_W - LEFT_MARGIN) // GLYPH_W


@dataclass(frozen=True)
class StyleRanges:
    slant: tuple[float, float] = (-0.4, 0.4)
    thickness: tuple[int, ...] = (0, 1, 2)
    noise_sigma: tuple[float, float] = (0.0, 0.15)
    jitter: tuple[int, int] = (-2, 2)
    warped_glyphs: int = 5
    warp_flip_prob: float = 0.35
    wobble: int = 1


@dataclass(frozen=True)
class WriterStyle:
    writer_id: int
    seed: int
    slant: float = 0.0
    thickness: int = 0
    noise_sigma: float = 0.0
    jitter: int = 0
    glyph_warp_seed: int = 0
    warped_chars: str = ""
    warp_flip_prob: float = 0.0
    wobble: int = 0  # per-sample vertical offset amplitude

    @functools.cached_property
    def glyphs(self) -> dict[str, np.ndarray]:
        base = canonical_glyphs()
        if not self.warped_chars:
            return base
        rng = np.random.default_rng(self.glyph_warp_seed)
        out = dict(base)
        for ch in sorted(self.warped_chars):
            flips = rng.random((GLYPH_H, GLYPH_W)) < self.warp_flip_prob
            flips[:, -1] = False  # keep the inter-letter gap
            out[ch] = np.abs(base[ch] - flips)
        return out


@dataclass(frozen=True)
class WriterPool:
    seed: int
    train_writers: tuple[WriterStyle, ...]
    test_writers: tuple[WriterStyle, ...]
    lexicon: tuple[str, ...]
    images_per_train_writer: int = 100
    images_per_test_writer: int = 48
    _by_id: dict = field(default_factory=dict, compare=False, repr=False)

    def writer(self, writer_id: int) -> WriterStyle:
        if not self._by_id:
            self._by_id.update({w.writer_id: w for w in self.train_writers + self.test_writers})
        try:
            return self._by_id[writer_id]
        except KeyError:
            raise KeyError(f"unknown writer {writer_id}") from None


def _draw_style(writer_id, seed, ranges: StyleRanges) -> WriterStyle:
    rng = np.random.default_rng(seed)
    n_warp = min(ranges.warped_glyphs, len(ALPHABET))
    warped = "".join(sorted(rng.choice(list(ALPHABET), size=n_warp, replace=False))) if n_warp else ""
    return WriterStyle(
        writer_id=writer_id,
        seed=seed,
        slant=float(rng.uniform(*ranges.slant)),
        thickness=int(rng.choice(ranges.thickness)),
        noise_sigma=float(rng.uniform(*ranges.noise_sigma)),
        jitter=int(rng.integers(ranges.jitter[0], ranges.jitter[1] + 1)),
        glyph_warp_seed=int(rng.integers(2**63)),
        warped_chars=warped,
        warp_flip_prob=ranges.warp_flip_prob if n_warp else 0.0,
        wobble=ranges.wobble,
    )


def make_pool(
    n_train: int = 20,
    n_test: int = 8,
    seed: int = 0,
    ranges: StyleRanges = StyleRanges(),
    lexicon: tuple[str, ...] | None = None,
    images_per_train_writer: int = 100,
    images_per_test_writer: int = 48,
) -> WriterPool:
    if n_train < 2:
        raise ValueError(f"n_train must be >= 2, got {n_train}")
    if n_test < 1:
        raise ValueError(f"n_test must be >= 1, got {n_test}")
    lexicon = load_lexicon() if lexicon is None else tuple(lexicon)
    rng = np.random.default_rng(seed)
    seeds: list[int] = []
    while len(seeds) < n_train + n_test:
        s = int(rng.integers(2**63))
        if s not in seeds:
            seeds.append(s)
    styles = [_draw_style(i, s, ranges) for i, s in enumerate(seeds)]
    return WriterPool(
        seed=seed,
        train_writers=tuple(styles[:n_train]),
        test_writers=tuple(styles[n_train:]),
        lexicon=lexicon,
        images_per_train_writer=images_per_train_writer,
        images_per_test_writer=images_per_test_writer,
    )


def encode_word(word: str, alphabet: str = ALPHABET) -> tuple[int, ...]:
    try:
        return tuple(alphabet.index(c) for c in word) + (len(alphabet),)
    except ValueError:
        raise ValueError(f"word {word!r} has characters outside the charset") from None


def compose(word: str, glyphs: dict[str, np.ndarray], top: int = TOP) -> np.ndarray:
    if len(word) > max_word_length():
        raise ValueError(f"word {word!r} too long for a {CANVAS_W}px canvas")
    canvas = np.zeros((CANVAS_H, CANVAS_W))
    for i, ch in enumerate(word):
        x = LEFT_MARGIN + i * GLYPH_W
        canvas[top : top + GLYPH_H, x : x + GLYPH_W] = glyphs[ch]
    return canvas


def shear(img: np.ndarray, slant: float) -> np.ndarray:
    """Shift each row horizontally by ``slant * (centre - row)``, cubic spline interpolation."""
    if slant == 0:
        return img.copy()
    centre = (img.shape[0] - 1) / 2
    out = np.empty_like(img)
    for y, row in enumerate(img):
        out[y] = ndimage.shift(row, slant * (centre - y), order=3, mode="constant", cval=0.0)
    return out


def dilate(img: np.ndarray, level: int) -> np.ndarray:
    out = img
    if level >= 1:
        right = np.zeros_like(out)
        right[:, 1:] = out[:, :-1]
        out = np.maximum(out, right)
    if level >= 2:
        down = np.zeros_like(out)
        down[1:, :] = out[:-1, :]
        out = np.maximum(out, down)
    return out


def shift_rows(img: np.ndarray, dy: int) -> np.ndarray:
    if dy == 0:
        return img.copy()
    out = np.zeros_like(img)
    if dy > 0:
        out[dy:] = img[:-dy]
    else:
        out[:dy] = img[-dy:]
    return out


def render_word(style: WriterStyle, word: str, sample_seed: int) -> WordImage:
    label = encode_word(word)
    img = compose(word, style.glyphs)
    img = shear(img, style.slant)
    img = dilate(img, style.thickness)
    rng = np.random.default_rng([style.seed, sample_seed])
    dy = style.jitter
    if style.wobble:
        dy += int(rng.integers(-style.wobble, style.wobble + 1))
    img = shift_rows(img, int(np.clip(dy, -TOP, CANVAS_H - TOP - GLYPH_H)))
    if style.noise_sigma > 0:
        img = img + rng.normal(0.0, style.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return WordImage(img, label, word, style.writer_id, sample_seed)


@dataclass(frozen=True)
class WriterTask:
    writer_id: int
    seed: int
    support: tuple[WordImage, ...]
    val: tuple[WordImage, ...]


def _draw_samples(pool: WriterPool, writer_id: int, n: int, stream) -> list[WordImage]:
    if not pool.lexicon:
        raise ValueError("insufficient lexicon: empty")
    style = pool.writer(writer_id)
    rng = np.random.default_rng([pool.seed, writer_id, *stream])
    words = rng.integers(len(pool.lexicon), size=n)
    sample_seeds = rng.choice(2**62, size=n, replace=False)
    return [render_word(style, pool.lexicon[w], int(s)) for w, s in zip(words, sample_seeds)]


def sample_task(pool: WriterPool, writer_id: int, B: int = 16, seed: int = 0) -> WriterTask:
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    samples = _draw_samples(pool, writer_id, 2 * B, (1, seed))
    return WriterTask(writer_id, seed, tuple(samples[:B]), tuple(samples[B:]))


@functools.lru_cache(maxsize=256)
def writer_images(pool: WriterPool, writer_id: int, n: int) -> tuple[WordImage, ...]:
    """The fixed image collection of one writer (the writer's "dataset")."""
    return tuple(_draw_samples(pool, writer_id, n, (2,)))


def make_eval_split(
    pool: WriterPool, writer_id: int, k: int = 16, total_n: int | None = None, rep_seed: int = 0
) -> tuple[list[WordImage], list[WordImage]]:
    total_n = pool.images_per_test_writer if total_n is None else total_n
    if total_n <= MIN_EVAL_IMAGES:
        raise IneligibleWriter(
            f"writer {writer_id}: needs more than {MIN_EVAL_IMAGES} images, has {total_n}"
        )
    if not 0 <= k < total_n:
        raise IneligibleWriter(f"writer {writer_id}: k={k} must be in [0, {total_n})")
    images = writer_images(pool, writer_id, total_n)
    order = np.random.default_rng([pool.seed, writer_id, 3, rep_seed]).permutation(total_n)
    return [images[i] for i in order[:k]], [images[i] for i in order[k:]]


def pooled_training_images(pool: WriterPool) -> list[WordImage]:
    out: list[WordImage] = []
    for w in pool.train_writers:
        out.extend(writer_images(pool, w.writer_id, pool.images_per_train_writer))
    return out
