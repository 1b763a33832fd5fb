"""Compact attentional encoder-decoder word recognizer.

Pipeline: linear patch projection -> bidirectional gated recurrent context ->
additive attention -> gated recurrent decoder -> softmax classifier.

All computations are batched over words. Per decoder step the attention is
evaluated for every position at once by tiling the query across a
``[N, Q*A]`` block layout and reducing with constant 0/1 matrices.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .writers import ALPHABET, WordImage

log = logging.getLogger(__name__)

LAYERS = ("encoder", "ctx_fwd", "ctx_bwd", "attention", "decoder", "embedding", "classifier")
CLASSIFIER = "classifier"

ParamSet = dict  # layer name -> {tensor name -> ndarray}


@dataclass(frozen=True)
class ModelConfig:
    height: int = 16
    width: int = 64
    patch_h: int = 16
    patch_w: int = 8
    hidden: int = 48
    embedding: int = 32
    attention: int = 32
    max_len: int = 12
    alphabet: str = ALPHABET

    @property
    def n_classes(self) -> int:
        return len(self.alphabet) + 1

    @property
    def eos(self) -> int:
        return len(self.alphabet)

    @property
    def sos(self) -> int:
        return len(self.alphabet) + 1

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_h) * (self.width // self.patch_w)

    @property
    def patch_size(self) -> int:
        return self.patch_h * self.patch_w

    @property
    def ctx_hidden(self) -> int:
        return self.hidden // 2

    @property
    def context_width(self) -> int:
        return 2 * self.ctx_hidden


def param_shapes(cfg: ModelConfig) -> dict[str, dict[str, tuple[int, int]]]:
    H, Hc, d, A = cfg.hidden, cfg.ctx_hidden, cfg.context_width, cfg.attention
    gru = lambda n_in, h: {"W": (n_in, 3 * h), "U_zr": (h, 2 * h), "U_n": (h, h), "b": (1, 3 * h)}
    return {
        "encoder": {"W": (cfg.patch_size, H), "b": (1, H)},
        "ctx_fwd": gru(H, Hc),
        "ctx_bwd": gru(H, Hc),
        "attention": {"W_s": (H, A), "W_h": (d, A), "b_a": (1, A), "v": (A, 1)},
        "decoder": gru(cfg.embedding + d, H),
        "embedding": {"E": (cfg.n_classes + 1, cfg.embedding)},
        "classifier": {"W_o": (H, cfg.n_classes), "b_o": (1, cfg.n_classes)},
    }


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamSet:
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for layer, tensors in param_shapes(cfg).items():
        params[layer] = {}
        for name, shape in tensors.items():
            if name.startswith("b"):
                arr = np.zeros(shape)
            elif name == "E":
                arr = rng.normal(0.0, 0.5, shape)
            else:
                arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            params[layer][name] = arr
    return params


def zeros_like_params(params: ParamSet) -> ParamSet:
    return {l: {n: np.zeros_like(a) for n, a in t.items()} for l, t in params.items()}


def copy_params(params: ParamSet) -> ParamSet:
    return {l: {n: a.copy() for n, a in t.items()} for l, t in params.items()}


def check_params(params: ParamSet, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        raise ValueError(f"expected layers {list(shapes)}, got {list(params)}")
    for layer, tensors in shapes.items():
        for name, shape in tensors.items():
            got = params[layer][name].shape
            if got != shape:
                raise ValueError(f"{layer}.{name}: expected shape {shape}, got {got}")


def as_nodes(params: ParamSet, requires_grad=True) -> dict:
    make = E.param if requires_grad else E.constant
    return {l: {n: make(a) for n, a in t.items()} for l, t in params.items()}


def to_lists(nodes: dict) -> dict[str, list]:
    return {l: list(t.values()) for l, t in nodes.items()}


def from_lists(lists: dict[str, list], like: dict) -> dict:
    return {l: dict(zip(like[l], lists[l])) for l in like}


def values(nodes: dict) -> ParamSet:
    return {l: {n: node.value.copy() for n, node in t.items()} for l, t in nodes.items()}


# --- batching ----------------------------------------------------------------


@dataclass
class Batch:
    patches: np.ndarray  # [N, Q, P]
    labels: list[tuple[int, ...]]

    @property
    def size(self) -> int:
        return self.patches.shape[0]


def to_patches(pixels: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """[N, H, W] images -> [N, Q, P] patches in reading order."""
    n, h, w = pixels.shape
    if (h, w) != (cfg.height, cfg.width) or h % cfg.patch_h or w % cfg.patch_w:
        raise ValueError(
            f"image {h}x{w} incompatible with {cfg.height}x{cfg.width} and patch {cfg.patch_h}x{cfg.patch_w}"
        )
    rows, cols = h // cfg.patch_h, w // cfg.patch_w
    x = pixels.reshape(n, rows, cfg.patch_h, cols, cfg.patch_w).transpose(0, 1, 3, 2, 4)
    return x.reshape(n, rows * cols, cfg.patch_size)


def make_batch(images: list[WordImage], cfg: ModelConfig) -> Batch:
    for im in images:
        if not im.label or any(not 0 <= c < cfg.n_classes for c in im.label):
            raise ValueError(f"label {im.label} has indices outside [0, {cfg.n_classes})")
    pixels = np.stack([im.pixels for im in images])
    return Batch(to_patches(pixels, cfg), [tuple(im.label) for im in images])


# --- network pieces ----------------------------------------------------------


def gru(x, h, p, hidden: int):
    """Gated recurrent cell; ``h=None`` stands for the zero state."""
    gx = x @ p["W"] + p["b"]
    if h is None:
        zr = E.sigmoid(E.slice_(gx, 1, 0, 2 * hidden))
        z = E.slice_(zr, 1, 0, hidden)
        n = E.tanh(E.slice_(gx, 1, 2 * hidden, 3 * hidden))
        return n - z * n
    zr = E.sigmoid(E.slice_(gx, 1, 0, 2 * hidden) + h @ p["U_zr"])
    z = E.slice_(zr, 1, 0, hidden)
    r = E.slice_(zr, 1, hidden, 2 * hidden)
    n = E.tanh(E.slice_(gx, 1, 2 * hidden, 3 * hidden) + (r * h) @ p["U_n"])
    return n + z * (h - n)


def encode(patches: np.ndarray, P: dict, cfg: ModelConfig) -> list:
    """Context vectors ``h_1..h_Q``, each ``[N, 2*ctx_hidden]`` (forward half first)."""
    enc = P["encoder"]
    feats = [E.constant(patches[:, i, :]) @ enc["W"] + enc["b"] for i in range(patches.shape[1])]
    Hc = cfg.ctx_hidden
    fwd, h = [], None
    for f in feats:
        h = gru(f, h, P["ctx_fwd"], Hc)
        fwd.append(h)
    bwd, h = [None] * len(feats), None
    for i in reversed(range(len(feats))):
        h = gru(feats[i], h, P["ctx_bwd"], Hc)
        bwd[i] = h
    return [E.concat([a, b], axis=1) for a, b in zip(fwd, bwd)]


@functools.lru_cache(maxsize=32)
def _attention_constants(Q: int, A: int, d: int):
    eye_a, eye_d = np.eye(A), np.eye(d)
    mats = {
        "tile_a": np.tile(eye_a, (1, Q)),  # [A, Q*A]
        "rep_a": np.tile(eye_a, (Q, 1)),  # [Q*A, A]
        "score_mask": np.kron(np.eye(Q), np.ones((A, 1))),  # [Q*A, Q]
        "block_mask": np.kron(np.eye(Q), np.ones((d, A))),  # [Q*d, Q*A]
        "rep_d": np.tile(eye_d, (Q, 1)),  # [Q*d, d]
        "expand": np.kron(np.eye(Q), np.ones((1, d))),  # [Q, Q*d]
    }
    for m in mats.values():
        m.flags.writeable = False
    return {k: E.Node(v) for k, v in mats.items()}


@dataclass
class AttentionContext:
    H: object  # [N, Q*d] concatenated context vectors
    H_proj: object  # [N, Q*A] = W_h h_i + b_a per position
    Ws_tiled: object  # [hidden, Q*A]
    v_block: object  # [Q*A, Q]
    consts: dict
    Q: int


def attention_context(H_list: list, P: dict) -> AttentionContext:
    att = P["attention"]
    Q = len(H_list)
    d = H_list[0].shape[1]
    A = att["v"].shape[0]
    c = _attention_constants(Q, A, d)
    H = E.concat(H_list, axis=1) if Q > 1 else H_list[0]
    Wh_block = E.mul(E.matmul(c["rep_d"] @ att["W_h"], c["tile_a"]), c["block_mask"])
    H_proj = H @ Wh_block + att["b_a"] @ c["tile_a"]
    Ws_tiled = att["W_s"] @ c["tile_a"]
    v_block = E.mul(c["rep_a"] @ att["v"], c["score_mask"])
    return AttentionContext(H, H_proj, Ws_tiled, v_block, c, Q)


def attend(s_prev, ctx: AttentionContext):
    """Attention weights ``a`` ``[N, Q]`` and glimpse ``g`` ``[N, d]``."""
    pre = ctx.H_proj if s_prev is None else ctx.H_proj + s_prev @ ctx.Ws_tiled
    scores = E.tanh(pre) @ ctx.v_block
    a = E.softmax(scores)
    g = E.mul(a @ ctx.consts["expand"], ctx.H) @ ctx.consts["rep_d"]
    return a, g


def _one_hot(indices, n) -> np.ndarray:
    out = np.zeros((len(indices), n))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def _decoder_step(prev_tokens, s, ctx, P, cfg):
    emb = E.constant(_one_hot(prev_tokens, cfg.n_classes + 1)) @ P["embedding"]["E"]
    a, g = attend(s, ctx)
    s_new = gru(E.concat([emb, g], axis=1), s, P["decoder"], cfg.hidden)
    return a, s_new


# --- decoding ----------------------------------------------------------------


@dataclass
class DecodeTrace:
    logits: np.ndarray  # [L, C]
    attn: np.ndarray  # [L, Q]
    per_char_ce: np.ndarray  # [L]
    mean_ce: float


@dataclass
class BatchTrace:
    """Teacher-forced decode of a batch; rows are (word, step) pairs, word-major."""

    ce: object  # Node [R, 1]
    mean_ce: object  # Node (1,): mean over words of each word's mean CE
    logits: np.ndarray  # [R, C]
    outputs: np.ndarray  # [R, hidden] decoder outputs o_t
    attn: np.ndarray  # [R, Q]
    labels: np.ndarray  # [R]
    word_index: np.ndarray  # [R]
    lengths: np.ndarray  # [N]
    n_words: int = field(default=0)

    def word_traces(self) -> list[DecodeTrace]:
        out = []
        ce = self.ce.value[:, 0]
        for b in range(self.n_words):
            rows = self.word_index == b
            out.append(DecodeTrace(self.logits[rows], self.attn[rows], ce[rows], float(ce[rows].mean())))
        return out


def teacher_forced(batch: Batch, P: dict, cfg: ModelConfig) -> BatchTrace:
    N = batch.size
    lengths = np.array([len(lab) for lab in batch.labels])
    L = int(lengths.max())
    targets = np.full((N, L), cfg.eos)
    for b, lab in enumerate(batch.labels):
        targets[b, : len(lab)] = lab
    ctx = attention_context(encode(batch.patches, P, cfg), P)
    prev = np.full(N, cfg.sos)
    s, outs, attns = None, [], []
    for t in range(L):
        a, s = _decoder_step(prev, s, ctx, P, cfg)
        outs.append(s)
        attns.append(a)
        prev = targets[:, t]
    O = E.concat(outs, axis=0) if L > 1 else outs[0]  # row t*N + b
    clf = P["classifier"]
    logits = O @ clf["W_o"] + clf["b_o"]
    logp = E.log_softmax(logits)
    onehot = _one_hot(targets.T.reshape(-1), cfg.n_classes)
    ce_all = -E.sum(E.mul(logp, E.constant(onehot)), axis=-1, keepdims=True)
    # select valid rows, reordered word-major
    rows = [t * N + b for b in range(N) for t in range(lengths[b])]
    select = np.zeros((len(rows), L * N))
    select[np.arange(len(rows)), rows] = 1.0
    ce = E.constant(select) @ ce_all
    word_index = np.repeat(np.arange(N), lengths)
    weights = 1.0 / (lengths[word_index] * N)
    mean_ce = E.sum(E.mul(ce, E.constant(weights[:, None])))
    attn_all = np.concatenate([a.value for a in attns], axis=0)
    return BatchTrace(
        ce=ce,
        mean_ce=mean_ce,
        logits=logits.value[rows],
        outputs=O.value[rows],
        attn=attn_all[rows],
        labels=targets.T.reshape(-1)[rows],
        word_index=word_index,
        lengths=lengths,
        n_words=N,
    )


def batch_loss(images: list[WordImage], P: dict, cfg: ModelConfig):
    return teacher_forced(make_batch(images, cfg), P, cfg).mean_ce


def greedy(patches: np.ndarray, params: ParamSet, cfg: ModelConfig, max_len: int | None = None):
    """Greedy decode; returns (strings, traces). Stops at EOS or ``max_len`` steps."""
    max_len = cfg.max_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with E.no_grad():
        P = as_nodes(params, requires_grad=False)
        N = patches.shape[0]
        ctx = attention_context(encode(patches, P, cfg), P)
        prev = np.full(N, cfg.sos)
        s = None
        done = np.zeros(N, dtype=bool)
        steps_logits, steps_attn, tokens = [], [], []
        for _ in range(max_len):
            a, s = _decoder_step(prev, s, ctx, P, cfg)
            logits = (s @ P["classifier"]["W_o"] + P["classifier"]["b_o"]).value
            tok = logits.argmax(axis=1)  # first maximum wins ties
            steps_logits.append(logits)
            steps_attn.append(a.value)
            tokens.append(tok)
            done |= tok == cfg.eos
            if done.all():
                break
            prev = tok
    tokens = np.stack(tokens, axis=1)
    strings, traces = [], []
    for b in range(N):
        seq = list(tokens[b])
        n = seq.index(cfg.eos) + 1 if cfg.eos in seq else len(seq)
        strings.append("".join(cfg.alphabet[c] for c in seq[: n - 1 if seq[n - 1] == cfg.eos else n]))
        lg = np.stack([steps_logits[t][b] for t in range(n)])
        logp = lg - lg.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        ce = -logp[np.arange(n), seq[:n]]
        traces.append(DecodeTrace(lg, np.stack([steps_attn[t][b] for t in range(n)]), ce, float(ce.mean())))
    return strings, traces


def recognize(images: list[WordImage], params: ParamSet, cfg: ModelConfig, chunk: int = 64) -> list[str]:
    out: list[str] = []
    for i in range(0, len(images), chunk):
        part = images[i : i + chunk]
        patches = to_patches(np.stack([im.pixels for im in part]), cfg)
        out.extend(greedy(patches, params, cfg)[0])
    return out


def decode_word(image: WordImage, params: ParamSet, cfg: ModelConfig, mode="teacher_forced", max_len=None):
    """Decode one image. ``mode`` is ``"teacher_forced"`` (uses the label) or ``"greedy"``."""
    if mode == "teacher_forced":
        with E.no_grad():
            tr = teacher_forced(make_batch([image], cfg), as_nodes(params, False), cfg)
        pred = "".join(cfg.alphabet[c] for c in tr.logits.argmax(axis=1) if c < cfg.eos)
        return tr.word_traces()[0], pred
    if mode == "greedy":
        patches = to_patches(image.pixels[None], cfg)
        strings, traces = greedy(patches, params, cfg, max_len)
        return traces[0], strings[0]
    raise ValueError(f"unknown decode mode {mode!r}")


# --- optimisation ------------------------------------------------------------


class Adam:
    """Adam over a nested dict of arrays; state is plain arrays so it checkpoints."""

    def __init__(self, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def copy(self) -> "Adam":
        new = Adam(self.lr, self.b1, self.b2, self.eps)
        new.t = self.t
        new.m = {k: v.copy() for k, v in self.m.items()}
        new.v = {k: v.copy() for k, v in self.v.items()}
        return new

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for key, p in params.items():
            g = grads[key]
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            out[key] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def flatten(params: ParamSet, prefix="") -> dict[str, np.ndarray]:
    return {f"{prefix}{l}/{n}": a for l, t in params.items() for n, a in t.items()}


def unflatten(flat: dict[str, np.ndarray], like: ParamSet, prefix="") -> ParamSet:
    return {l: {n: flat[f"{prefix}{l}/{n}"] for n in t} for l, t in like.items()}


def param_grads(loss, nodes: dict) -> ParamSet:
    flat = [(l, n, node) for l, t in nodes.items() for n, node in t.items()]
    gs = E.grad(loss, [x[2] for x in flat])
    out: ParamSet = {l: {} for l in nodes}
    for (l, n, _), g in zip(flat, gs):
        out[l][n] = g.value
    return out


@dataclass
class PretrainResult:
    params: ParamSet
    curve: list[dict] = field(default_factory=list)


def pretrain(
    images: list[WordImage],
    params: ParamSet,
    cfg: ModelConfig,
    epochs: int = 1,
    batch_size: int = 32,
    lr: float = 3e-3,
    seed: int = 0,
    holdout: float = 0.1,
) -> PretrainResult:
    """Supervised training on mean character-wise CE with Adam.

    A ``holdout`` fraction of ``images`` is kept aside and scored each epoch.
    """
    if not images:
        raise ValueError("pretrain needs a nonempty dataset")
    params = copy_params(params)
    if epochs == 0:
        return PretrainResult(params, [])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_hold = int(len(images) * holdout)
    held = [images[i] for i in order[:n_hold]]
    train = [images[i] for i in order[n_hold:]] or held
    opt = Adam(lr)
    curve = []
    for epoch in range(epochs):
        perm = rng.permutation(len(train))
        losses = []
        for i in range(0, len(train), batch_size):
            chunk = [train[j] for j in perm[i : i + batch_size]]
            nodes = as_nodes(params)
            loss = batch_loss(chunk, nodes, cfg)
            if not np.isfinite(loss.value[0]):
                raise FloatingPointError(f"pretrain diverged at epoch {epoch}: loss {loss.value[0]}")
            losses.append(loss.value[0])
            grads = param_grads(loss, nodes)
            params = unflatten(opt.step(flatten(params), flatten(grads)), params)
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if held:
            row["heldout_loss"] = evaluate_loss(held, params, cfg)
        curve.append(row)
        log.info("pretrain epoch %d: %s", epoch + 1, row)
    return PretrainResult(params, curve)


def evaluate_loss(images: list[WordImage], params: ParamSet, cfg: ModelConfig, chunk: int = 64) -> float:
    """Mean over words of per-word mean CE, teacher forced."""
    total = 0.0
    with E.no_grad():
        P = as_nodes(params, requires_grad=False)
        for i in range(0, len(images), chunk):
            part = images[i : i + chunk]
            total += batch_loss(part, P, cfg).value[0] * len(part)
    return total / len(images)
