"""Adam and Nesterov SGD over :class:`~shotfree.autodiff.Tensor` parameters, and lr schedules."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Recipe(enum.Enum):
    ADAM = "adam"
    SGD = "sgd"


@dataclass(frozen=True)
class RecipeDefaults:
    lr: float
    decay_factor: float
    decay_every: int  # ADAM: fixed step interval
    patience: int  # SGD: iterations without validation improvement
    momentum: float = 0.0
    weight_decay: float = 0.0
    desk_lr: float | None = None  # starting rate for the small MLP models; None means ``lr``


RECIPES = {
    Recipe.ADAM: RecipeDefaults(lr=1e-3, decay_factor=0.5, decay_every=2000, patience=0),
    # at 0.1 (or 0.05) the scale s is driven to ~0 within a few hundred iterations on the MLP models
    Recipe.SGD: RecipeDefaults(lr=0.1, decay_factor=0.5, decay_every=0, patience=1000, momentum=0.9,
                               weight_decay=5e-4, desk_lr=0.01),
}


def adam_step(value, grad, state: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. ``state`` holds ``m``, ``v`` and ``t``; returns the new value."""
    t = state.get("t", 0) + 1
    m = beta1 * state.get("m", 0.0) + (1 - beta1) * grad
    v = beta2 * state.get("v", 0.0) + (1 - beta2) * grad * grad
    state.update(t=t, m=m, v=v)
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_nesterov_step(value, grad, state: dict, lr: float, momentum=0.9, weight_decay=0.0, nesterov=True):
    """SGD with L2 weight decay added to the gradient and (Nesterov) momentum."""
    g = grad + weight_decay * value
    if momentum == 0:
        return value - lr * g
    buf = momentum * state["buf"] + g if "buf" in state else g
    state["buf"] = buf
    update = g + momentum * buf if nesterov else buf
    return value - lr * update


class Optimizer:
    """Base class; ``row_sparse`` parameters are updated lazily, row by row.

    A row of a row-sparse matrix whose gradient is exactly zero keeps its
    value and its optimizer state for that step (no momentum drift, no
    weight decay).  The prototype table uses this so that classes absent from
    an iteration stay bitwise unchanged.
    """

    def __init__(self, params, lr: float, row_sparse=()):
        self.params = list(params)
        self.lr = lr
        self.state = [dict() for _ in self.params]
        sparse_ids = {id(p) for p in row_sparse}
        self.row_sparse = [id(p) in sparse_ids for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for p, st, sparse in zip(self.params, self.state, self.row_sparse):
            if p.grad is None:
                continue
            if sparse and p.values.ndim == 2:
                self._sparse_step(p, st, lr)
            else:
                p.values = self._update(p.values, p.grad, st, lr)

    def _sparse_step(self, p, st, lr):
        live = np.any(p.grad != 0, axis=1)
        if live.all():
            p.values = self._update(p.values, p.grad, st, lr)
            return
        before = {k: v.copy() if isinstance(v, np.ndarray) else v for k, v in st.items()}
        new = self._update(p.values, p.grad, st, lr)
        new[~live] = p.values[~live]
        for k, v in st.items():
            if isinstance(v, np.ndarray) and v.shape == p.values.shape:
                old = before.get(k, 0.0)
                v[~live] = old[~live] if isinstance(old, np.ndarray) else old
        p.values = new

    def _update(self, value, grad, state, lr):
        raise NotImplementedError


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, row_sparse=()):
        super().__init__(params, lr, row_sparse)
        self.betas = betas
        self.eps = eps

    def _update(self, value, grad, state, lr):
        return adam_step(value, grad, state, lr, self.betas[0], self.betas[1], self.eps)


class SGDNesterov(Optimizer):
    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=5e-4, nesterov=True, row_sparse=()):
        super().__init__(params, lr, row_sparse)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov

    def _update(self, value, grad, state, lr):
        return sgd_nesterov_step(value, grad, state, lr, self.momentum, self.weight_decay, self.nesterov)


def make_optimizer(recipe, params, lr: float | None = None, row_sparse=()) -> Optimizer:
    recipe = Recipe(recipe)
    d = RECIPES[recipe]
    lr = d.lr if lr is None else lr
    if recipe is Recipe.ADAM:
        return Adam(params, lr=lr, row_sparse=row_sparse)
    return SGDNesterov(params, lr=lr, momentum=d.momentum, weight_decay=d.weight_decay, row_sparse=row_sparse)


def step_decay_lr(lr0: float, iteration: int, every: int, factor: float = 0.5) -> float:
    """``lr0 * factor ** floor(iteration / every)``."""
    if every <= 0:
        return lr0
    return lr0 * factor ** (iteration // every)


def plateau_lr(lr0: float, iteration: int, history, patience: int, factor: float = 0.5) -> float:
    """Decay whenever validation has not improved for ``patience`` iterations.

    ``history`` is a sequence of ``(iteration, score)`` pairs, higher is
    better.  After a decay the patience window restarts.
    """
    lr = lr0
    if patience <= 0:
        return lr
    best = -np.inf
    anchor = 0
    for it, score in history:
        if it > iteration:
            break
        if score > best:
            best, anchor = score, it
        elif it - anchor >= patience:
            lr *= factor
            anchor = it
    return lr


def lr_schedule(recipe, iteration: int, history=(), lr0: float | None = None, decay_every: int | None = None,
                patience: int | None = None) -> float:
    """Learning rate of ``recipe`` at ``iteration`` given the validation history so far."""
    recipe = Recipe(recipe)
    d = RECIPES[recipe]
    lr0 = d.lr if lr0 is None else lr0
    if recipe is Recipe.ADAM:
        return step_decay_lr(lr0, iteration, d.decay_every if decay_every is None else decay_every, d.decay_factor)
    return plateau_lr(lr0, iteration, history, d.patience if patience is None else patience, d.decay_factor)
