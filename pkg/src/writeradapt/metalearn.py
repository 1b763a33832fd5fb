"""Bi-level optimisation: MAML and its weighted / learnable-rate extensions.

The inner step adapts the recognizer to one writer's support set; the outer
step differentiates the validation loss of the adapted weights back to the
initial weights, the per-layer inner rates and the character weight network.

Variants
--------
metahtr   weighted inner loss (weight net), learnable per-layer rates, 2nd order
maml      mean CE inner loss, fixed scalar rate, 2nd order
maml_fo   as maml with the inner gradient detached
metasgd   mean CE inner loss, learnable per-element rates
anil      as maml but only the classifier layer is adapted
finetune  no meta-training; adaptation is plain gradient descent
dg        trained on a blended train/meta-test objective; no test-time update
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as E
from . import recognizer as R
from .recognizer import CLASSIFIER, Adam, ModelConfig, ParamSet
from .writers import WordImage, WriterTask

log = logging.getLogger(__name__)

WEIGHT_NET_WIDTHS = (64, 32)


class Variant(str, enum.Enum):
    METAHTR = "metahtr"
    MAML = "maml"
    MAML_FO = "maml_fo"
    METASGD = "metasgd"
    ANIL = "anil"
    FINETUNE = "finetune"
    DG = "dg"


class TaskFailed(RuntimeError):
    pass


@dataclass
class MetaParams:
    theta: ParamSet
    variant: Variant
    alpha: dict  # layer -> (1,) array, or layer -> {tensor -> array} for metasgd
    gamma: dict | None = None
    weighted: bool = False
    learn_alpha: bool = False
    opt: Adam = field(default_factory=Adam)
    epoch: int = 0

    def copy(self) -> "MetaParams":
        cp = lambda d: None if d is None else {k: (cp(v) if isinstance(v, dict) else v.copy()) for k, v in d.items()}
        return replace(self, theta=cp(self.theta), alpha=cp(self.alpha), gamma=cp(self.gamma), opt=self.opt.copy())

    def flat(self) -> dict[str, np.ndarray]:
        out = R.flatten(self.theta, "theta/")
        if self.gamma is not None:
            out.update({f"gamma/{k}": v for k, v in self.gamma.items()})
        for layer, rate in self.alpha.items():
            if isinstance(rate, dict):
                out.update({f"alpha/{layer}/{n}": v for n, v in rate.items()})
            else:
                out[f"alpha/{layer}"] = rate
        return out

    def load_flat(self, flat: dict[str, np.ndarray]) -> None:
        self.theta = R.unflatten(flat, self.theta, "theta/")
        if self.gamma is not None:
            self.gamma = {k: flat[f"gamma/{k}"] for k in self.gamma}
        for layer, rate in self.alpha.items():
            if isinstance(rate, dict):
                self.alpha[layer] = {n: flat[f"alpha/{layer}/{n}"] for n in rate}
            else:
                self.alpha[layer] = flat[f"alpha/{layer}"]


def weight_net_input_width(cfg: ModelConfig) -> int:
    return 2 * (cfg.hidden * cfg.n_classes + cfg.n_classes)


def init_weight_net(in_width: int, seed: int = 0, widths=WEIGHT_NET_WIDTHS) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    dims = (in_width, *widths, 1)
    gamma = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        # small last layer keeps initial weights near sigmoid(0) = 0.5
        scale = 1e-2 if i == len(dims) - 1 else 1.0
        gamma[f"W{i}"] = rng.normal(0.0, scale / np.sqrt(a), (a, b))
        gamma[f"b{i}"] = np.zeros((1, b))
    return gamma


def init_meta(
    theta: ParamSet,
    variant: Variant | str,
    cfg: ModelConfig,
    inner_lr: float = 1e-3,
    weighted: bool | None = None,
    learn_alpha: bool | None = None,
    seed: int = 0,
) -> MetaParams:
    variant = Variant(variant)
    if weighted is None:
        weighted = variant is Variant.METAHTR
    if learn_alpha is None:
        learn_alpha = variant in (Variant.METAHTR, Variant.METASGD)
    if variant is Variant.METASGD:
        alpha = {l: {n: np.full(a.shape, inner_lr) for n, a in t.items()} for l, t in theta.items()}
    else:
        alpha = {l: np.array([inner_lr]) for l in theta}
    gamma = init_weight_net(weight_net_input_width(cfg), seed) if weighted else None
    return MetaParams(R.copy_params(theta), variant, alpha, gamma, weighted, learn_alpha)


# --- character weights ---------------------------------------------------------


def classifier_step_gradients(trace: R.BatchTrace) -> np.ndarray:
    """Rows ``G_t``: per-step classifier gradient next to the word's mean-loss gradient.

    The classifier gradient of ``-log softmax(o W + b)[y]`` is
    ``(o^T (p - e_y), p - e_y)``; both halves are flattened ``[W, b]``.
    The result is a constant array, so nothing downstream differentiates
    through it.
    """
    z = trace.logits - trace.logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    delta = p.copy()
    delta[np.arange(len(delta)), trace.labels] -= 1.0
    dW = np.einsum("rh,rc->rhc", trace.outputs, delta).reshape(len(delta), -1)
    step = np.concatenate([dW, delta], axis=1)
    means = np.zeros((trace.n_words, step.shape[1]))
    np.add.at(means, trace.word_index, step)
    means /= trace.lengths[:, None]
    return np.concatenate([step, means[trace.word_index]], axis=1)


def predict_weights(G, gamma: dict):
    """Weight net: tanh MLP with a sigmoid head, one weight per row of ``G``."""
    G = E._lift(G)
    n_layers = len(gamma) // 2
    if G.shape[1] != gamma["W1"].shape[0]:
        raise ValueError(f"weight net expects width {gamma['W1'].shape[0]}, got {G.shape[1]}")
    h = G
    for i in range(1, n_layers + 1):
        h = E._lift(h) @ gamma[f"W{i}"] + gamma[f"b{i}"]
        h = E.tanh(h) if i < n_layers else E.sigmoid(h)
    return h


def inner_loss(per_char_ce, weights, n_words: int = 1):
    """Sum over steps of weight * CE, averaged over the words in the batch."""
    ce, w = E._lift(per_char_ce), E._lift(weights)
    if ce.shape != w.shape:
        raise ValueError(f"inner_loss: {ce.shape} losses vs {w.shape} weights")
    return E.mul(E.sum(E.mul(ce, w)), E.constant(1.0 / n_words))


# --- inner loop -----------------------------------------------------------------


def _gamma_nodes(meta: MetaParams, requires_grad: bool):
    if not meta.weighted:
        return None
    make = E.param if requires_grad else E.constant
    return {k: make(v) for k, v in meta.gamma.items()}


def _alpha_nodes(meta: MetaParams, requires_grad: bool):
    make = E.param if (requires_grad and meta.learn_alpha) else E.constant
    layers = [CLASSIFIER] if meta.variant is Variant.ANIL else list(meta.alpha)
    out = {}
    for layer in layers:
        rate = meta.alpha[layer]
        out[layer] = [make(v) for v in rate.values()] if isinstance(rate, dict) else make(rate)
    return out


def _inner_objective(meta: MetaParams, trace: R.BatchTrace, gamma_nodes):
    if meta.weighted:
        G = classifier_step_gradients(trace)
        w = predict_weights(E.constant(G), gamma_nodes)
        loss = inner_loss(trace.ce, w, trace.n_words)
    else:
        loss = trace.mean_ce
    if not np.isfinite(loss.value[0]):
        raise TaskFailed(f"non-finite inner loss {loss.value[0]}")
    return loss


def inner_update(theta_nodes: dict, support, meta: MetaParams, cfg: ModelConfig,
                 alpha_nodes=None, gamma_nodes=None, create_graph=None) -> dict:
    """One adaptation step on ``support``; returns adapted parameter nodes.

    Layers that are not adapted (everything but the classifier for anil) are
    the very same node objects as in ``theta_nodes``.
    """
    if not support:
        raise ValueError("support set is empty")
    if create_graph is None:
        create_graph = meta.variant not in (Variant.MAML_FO, Variant.FINETUNE)
    alpha_nodes = _alpha_nodes(meta, False) if alpha_nodes is None else alpha_nodes
    if gamma_nodes is None:
        gamma_nodes = _gamma_nodes(meta, False)
    trace = R.teacher_forced(R.make_batch(list(support), cfg), theta_nodes, cfg)
    loss = _inner_objective(meta, trace, gamma_nodes)
    updated = E.inner_step(R.to_lists(theta_nodes), loss, alpha_nodes, create_graph)
    return R.from_lists(updated, theta_nodes)


def adapt(meta: MetaParams, support, n_steps: int, cfg: ModelConfig, finetune_lr: float = 1e-3) -> ParamSet:
    """Test-time adaptation: ``n_steps`` inner updates from the meta-learned weights."""
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if n_steps == 0 or meta.variant is Variant.DG or not support:
        return R.copy_params(meta.theta)
    if meta.variant is Variant.FINETUNE:
        return finetune(meta.theta, support, n_steps, finetune_lr, cfg)
    theta = meta.theta
    for _ in range(n_steps):
        nodes = R.as_nodes(theta)
        theta = R.values(inner_update(nodes, support, meta, cfg, create_graph=False))
    return theta


def finetune(theta: ParamSet, support, steps: int, lr: float, cfg: ModelConfig) -> ParamSet:
    """Plain gradient descent on mean CE over the support set."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    theta = R.copy_params(theta)
    for _ in range(steps):
        nodes = R.as_nodes(theta)
        loss = R.batch_loss(list(support), nodes, cfg)
        if not np.isfinite(loss.value[0]):
            raise FloatingPointError(f"finetune diverged: loss {loss.value[0]}")
        grads = R.param_grads(loss, nodes)
        theta = {l: {n: a - lr * grads[l][n] for n, a in t.items()} for l, t in theta.items()}
    return theta


# --- outer loop -----------------------------------------------------------------


def task_meta_gradient(meta: MetaParams, task: WriterTask, cfg: ModelConfig) -> tuple[float, dict]:
    """Outer loss after one inner step, and its gradient w.r.t. every meta-parameter."""
    theta = R.as_nodes(meta.theta)
    gamma = _gamma_nodes(meta, True)
    alpha = _alpha_nodes(meta, True)
    updated = inner_update(theta, task.support, meta, cfg, alpha, gamma)
    outer = R.batch_loss(list(task.val), updated, cfg)
    if not np.isfinite(outer.value[0]):
        raise TaskFailed(f"non-finite outer loss {outer.value[0]}")
    keys, targets = [], []
    for l, t in theta.items():
        for n, node in t.items():
            keys.append(f"theta/{l}/{n}")
            targets.append(node)
    if gamma is not None:
        for k, node in gamma.items():
            keys.append(f"gamma/{k}")
            targets.append(node)
    if meta.learn_alpha:
        for layer, rate in alpha.items():
            if isinstance(rate, list):
                for n, node in zip(meta.alpha[layer], rate):
                    keys.append(f"alpha/{layer}/{n}")
                    targets.append(node)
            else:
                keys.append(f"alpha/{layer}")
                targets.append(rate)
    grads = E.grad(outer, targets)
    return float(outer.value[0]), {k: g.value for k, g in zip(keys, grads)}


def dg_gradient(theta: ParamSet, task: WriterTask, cfg: ModelConfig, lam=0.5, inner_lr=5e-4) -> tuple[float, ParamSet]:
    """Gradient of ``lam * L(theta; tr) + (1 - lam) * L(theta - lr * grad L(theta; tr); val)``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    nodes = R.as_nodes(theta)
    train_loss = R.batch_loss(list(task.support), nodes, cfg)
    rates = {l: E.constant([inner_lr]) for l in nodes}
    updated = R.from_lists(E.inner_step(R.to_lists(nodes), train_loss, rates, True), nodes)
    val_loss = R.batch_loss(list(task.val), updated, cfg)
    total = E.add(E.mul(train_loss, E.constant(lam)), E.mul(val_loss, E.constant(1.0 - lam)))
    if not np.isfinite(total.value[0]):
        raise TaskFailed(f"non-finite dg objective {total.value[0]}")
    return float(total.value[0]), R.param_grads(total, nodes)


def dg_step(theta: ParamSet, task: WriterTask, cfg: ModelConfig, lam=0.5, inner_lr=5e-4, beta=1e-4) -> ParamSet:
    _, grads = dg_gradient(theta, task, cfg, lam, inner_lr)
    return {l: {n: a - beta * grads[l][n] for n, a in t.items()} for l, t in theta.items()}


def _task_result(meta, task, cfg, dg_lambda, dg_inner_lr):
    try:
        if meta.variant is Variant.DG:
            loss, grads = dg_gradient(meta.theta, task, cfg, dg_lambda, dg_inner_lr)
            return loss, R.flatten(grads, "theta/")
        return task_meta_gradient(meta, task, cfg)
    except (TaskFailed, FloatingPointError) as exc:
        return exc


@dataclass
class OuterStats:
    loss: float
    n_tasks: int
    failed: list = field(default_factory=list)


def meta_gradient(meta: MetaParams, tasks, cfg: ModelConfig, workers: int = 1,
                  dg_lambda=0.5, dg_inner_lr=5e-4) -> tuple[dict, OuterStats]:
    """Average of per-task meta-gradients, reduced in (writer_id, seed) order."""
    if not tasks:
        raise ValueError("meta-batch is empty")
    if meta.variant is Variant.FINETUNE:
        raise ValueError("finetune has no meta-training")
    tasks = sorted(tasks, key=lambda t: (t.writer_id, t.seed))
    run = lambda task: _task_result(meta, task, cfg, dg_lambda, dg_inner_lr)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    total, losses, failed = None, [], []
    for task, res in zip(tasks, results):
        if isinstance(res, Exception):
            log.warning("writer %d task %d skipped: %s", task.writer_id, task.seed, res)
            failed.append((task.writer_id, str(res)))
            continue
        loss, grads = res
        losses.append(loss)
        if total is None:
            total = {k: g.copy() for k, g in grads.items()}
        else:
            for k, g in grads.items():
                total[k] += g
    if total is None:
        raise TaskFailed(f"all {len(tasks)} tasks failed: {failed}")
    n = len(losses)
    return {k: g / n for k, g in total.items()}, OuterStats(float(np.mean(losses)), n, failed)


def outer_step(meta: MetaParams, tasks, cfg: ModelConfig, beta: float = 1e-4, workers: int = 1,
               dg_lambda=0.5, dg_inner_lr=5e-4) -> tuple[MetaParams, OuterStats]:
    """One meta-update of every learnable meta-parameter with Adam at rate ``beta``."""
    grads, stats = meta_gradient(meta, tasks, cfg, workers, dg_lambda, dg_inner_lr)
    new = meta.copy()
    flat = new.flat()
    learnable = {k: v for k, v in flat.items() if k in grads}
    new.opt.lr = beta
    flat.update(new.opt.step(learnable, grads))
    new.load_flat(flat)
    return new, stats


# --- training loop ----------------------------------------------------------------


def sample_meta_batch(pool, M: int, B: int, step: int, seed: int = 0) -> list[WriterTask]:
    """``M`` tasks from distinct training writers (repeats only if ``M`` exceeds the pool)."""
    from .writers import sample_task

    ids = [w.writer_id for w in pool.train_writers]
    rng = np.random.default_rng([seed, 7, step])
    chosen = rng.choice(ids, size=M, replace=M > len(ids))
    return [sample_task(pool, int(w), B, seed=step * 1000 + i) for i, w in enumerate(chosen)]


def meta_train(meta: MetaParams, pool, cfg: ModelConfig, epochs: int = 20, steps_per_epoch: int = 50,
               M: int = 8, B: int = 16, beta: float = 1e-4, seed: int = 0, workers: int = 1,
               dg_lambda=0.5, dg_inner_lr=5e-4, callback=None) -> tuple[MetaParams, list[dict]]:
    """Run ``epochs * steps_per_epoch`` outer steps; returns the final meta-parameters and a curve.

    ``finetune`` is returned unchanged with an empty curve. ``callback(meta,
    row)`` runs after every epoch (checkpointing, logging).
    """
    if meta.variant is Variant.FINETUNE:
        return meta, []
    curve = []
    for epoch in range(meta.epoch, epochs):
        losses, failed = [], 0
        for s in range(steps_per_epoch):
            step = epoch * steps_per_epoch + s
            tasks = sample_meta_batch(pool, M, B, step, seed)
            meta, stats = outer_step(meta, tasks, cfg, beta, workers, dg_lambda, dg_inner_lr)
            losses.append(stats.loss)
            failed += len(stats.failed)
        meta.epoch = epoch + 1
        row = {"epoch": epoch + 1, "outer_loss": float(np.mean(losses)), "failed_tasks": failed}
        if meta.alpha and not isinstance(next(iter(meta.alpha.values())), dict):
            row.update({f"alpha_{l}": float(a[0]) for l, a in meta.alpha.items()})
        curve.append(row)
        log.info("meta-train epoch %d: %s", epoch + 1, row)
        if callback is not None:
            callback(meta, row)
    return meta, curve
