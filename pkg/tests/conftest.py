import numpy as np
import pytest

from writeradapt import recognizer as R
from writeradapt.writers import WordImage

TINY = R.ModelConfig(height=16, width=32, patch_h=16, patch_w=8, hidden=4, embedding=3, attention=3,
                     max_len=6, alphabet="abcde")


def random_images(cfg, n, seed=0, min_len=1, max_len=4):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        L = int(rng.integers(min_len, max_len + 1))
        chars = rng.integers(len(cfg.alphabet), size=L)
        word = "".join(cfg.alphabet[c] for c in chars)
        out.append(WordImage(rng.random((cfg.height, cfg.width)), tuple(int(c) for c in chars) + (cfg.eos,), word))
    return out


def fd_grad(f, x, h=1e-5, coords=None):
    g = np.zeros_like(x)
    for i in coords if coords is not None else np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def tiny():
    return TINY


@pytest.fixture
def tiny_params():
    return R.init_params(TINY, seed=1)
