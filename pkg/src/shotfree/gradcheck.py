"""Finite-difference verification of every differentiable primitive and of the composite losses.

Each case builds fresh random inputs from its own seed and reports the worst
relative error returned by :func:`~shotfree.autodiff.finite_diff_check`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import EmbedMode, embed, init_embedding, mlp_forward
from .losses import center_loss, episode_loss
from .metric import MetricMap, PrototypeTable

TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class SuiteResult:
    cases: list = field(default_factory=list)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.cases), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def rows(self) -> list:
        return [dict(case=c.name, max_rel_error=c.max_rel_error, passed=c.passed) for c in self.cases]


def _p(rng, *shape, positive=False) -> Tensor:
    v = rng.standard_normal(shape)
    if positive:
        v = np.abs(v) + 0.5
    return Tensor(v, requires_grad=True)


def _reduce(f, rng):
    """Wrap a tensor-valued ``f`` into a scalar loss via a fixed random projection."""
    probe = None

    def g():
        nonlocal probe
        out = f()
        if out.values.ndim == 0:
            return out
        if probe is None:
            # a random linear read-out gives every output entry a generic weight
            probe = Tensor(rng.standard_normal(out.shape))
        return ad.sum(ad.mul(out, probe))

    return g


def _primitive_cases(rng) -> dict:
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    m, n = _p(rng, 3, 4), _p(rng, 4, 2)
    bias = _p(rng, 4)
    s = _p(rng)
    pos = _p(rng, 3, 4, positive=True)
    # keep entries away from the ReLU kink so central differences are valid
    r = Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * (0.1 + np.abs(rng.standard_normal((3, 4)))), requires_grad=True)
    v = _p(rng, 5)
    rows = _p(rng, 4, 3)
    q, c = _p(rng, 3, 5), _p(rng, 4, 5)
    return {
        "add": (lambda: ad.add(a, b), [a, b]),
        "add_row_bias": (lambda: ad.add(a, bias), [a, bias]),
        "neg": (lambda: ad.neg(a), [a]),
        "sub": (lambda: ad.sub(a, b), [a, b]),
        "mul": (lambda: ad.mul(a, b), [a, b]),
        "scale": (lambda: ad.scale(a, s), [a, s]),
        "matmul": (lambda: ad.matmul(m, n), [m, n]),
        "transpose": (lambda: ad.transpose(m), [m]),
        "relu": (lambda: ad.relu(r), [r]),
        "exp": (lambda: ad.exp(a), [a]),
        "log": (lambda: ad.log(pos), [pos]),
        "square": (lambda: ad.square(a), [a]),
        "sum": (lambda: ad.sum(a), [a]),
        "mean": (lambda: ad.mean(a), [a]),
        "l2_normalize_rows": (lambda: ad.l2_normalize_rows(rows), [rows]),
        "log_sum_exp": (lambda: ad.log_sum_exp(v), [v]),
        "log_softmax_rows": (lambda: ad.log_softmax_rows(a), [a]),
        "pick": (lambda: ad.pick(a, np.array([0, 3, 1])), [a]),
        "take_rows": (lambda: ad.take_rows(a, np.array([2, 0, 2])), [a]),
        "sq_dists": (lambda: ad.sq_dists(q, c), [q, c]),
    }


def _generic_net(rng, sizes, dropout_rate, scale_init):
    emb = init_embedding(sizes, seed=int(rng.integers(2**31)), dropout_rate=dropout_rate, scale_init=scale_init)
    # random positive biases keep units alive on tiny layers and test the bias gradients too
    for b in emb.biases:
        b.values = rng.uniform(0.1, 0.5, size=b.shape)
    emb.requires_grad_(True)
    return emb


def _model_cases(rng) -> dict:
    emb = _generic_net(rng, (4, 8, 8, 3), 0.2, 1.5)
    x = rng.standard_normal((5, 4))
    mask_seed = int(rng.integers(2**31))

    # the 2-way, 3-sample toy episode with a lifted prototype space mu = 2d
    d, mu = 3, 6
    emb_ep = _generic_net(rng, (4, 8, d), 0.1, 2.0)
    x_ep = rng.standard_normal((3, 4))
    labels = np.array([0, 1, 0])
    W = Tensor(rng.standard_normal((mu, d)), requires_grad=True)
    protos = PrototypeTable([0, 1], Tensor(rng.standard_normal((2, mu)), requires_grad=True), normalized=False)
    metric = MetricMap(W)
    ep_seed = int(rng.integers(2**31))

    def episode():
        z = embed(emb_ep, x_ep, EmbedMode.TRAIN, np.random.default_rng(ep_seed))
        return episode_loss(z, labels, protos, metric, emb_ep.scale, lam=1.0).loss

    pts = _p(rng, 6, 3)
    centers = _p(rng, 2, 3)
    assign = np.array([0, 1, 1, 0, 1, 0])
    return {
        "mlp_forward": (lambda: mlp_forward(emb, x), emb.parameters()[:-1]),
        "embed_train": (lambda: embed(emb, x, EmbedMode.TRAIN, np.random.default_rng(mask_seed)), emb.parameters()),
        "episode_loss": (episode, emb_ep.parameters() + [W, protos.vectors]),
        "center_loss": (lambda: center_loss(pts, centers, assign), [pts, centers]),
    }


def run_suite(seed: int = 0, h: float = 1e-6, tolerance: float = TOLERANCE) -> SuiteResult:
    """Check every primitive, the MLP, the train-mode embedding, the episode loss and the center loss."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    out = SuiteResult(tolerance=tolerance)
    cases = {**_primitive_cases(rng), **_model_cases(rng)}
    for name, (f, params) in cases.items():
        err = ad.finite_diff_check(_reduce(f, rng), params, h=h)
        out.cases.append(CaseResult(name, err, err <= tolerance))
    out.seconds = time.perf_counter() - start
    return out
