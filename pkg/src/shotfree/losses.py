"""Episode cross-entropy with entropy regularization, and the center loss.

The center loss is kept for analysis only: minimizing it on its own drives
every point of a cluster onto the cluster center (see :func:`collapse_demo`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegenerateInputError, DivergenceError, NonFiniteError, ProtocolError
from .metric import MetricMap, PrototypeTable, chi_matrix, map_embeddings

log = logging.getLogger(__name__)

NEAR_UNIFORM_FRACTION = 0.9


def ell(v, true_index: int) -> float:
    """``-v[i] + LSE(v)``, i.e. ``-log softmax(v)[i]``."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    if not 0 <= true_index < v.values.size:
        raise ContractError(f"true_index {true_index} out of range for {v.values.size} classes")
    with ad.no_grad():
        return float(ad.log_sum_exp(v).item() - v.values[true_index])


@dataclass
class EpisodeLossReport:
    """Scalar summaries of one episode loss plus the graph node to differentiate."""

    cross_entropy: float
    entropy_term: float
    total: float
    per_sample_correct_prob: np.ndarray
    lam: float
    loss: Tensor = field(repr=False)
    near_uniform_fraction: float = 0.0


def episode_loss(embeddings, labels, protos: PrototypeTable, metric: MetricMap, s, lam: float = 1.0,
                 classes=None, entropy_sign: float = 1.0) -> EpisodeLossReport:
    """Cross-entropy of an episode restricted to its classes, plus ``lam`` times the mean entropy.

    ``classes`` selects the episode's rows of ``protos`` (default: all rows);
    prototypes outside it get exactly zero gradient.  ``entropy_sign=-1``
    turns the entropy penalty into a reward.
    """
    if lam < 0:
        raise ContractError(f"lambda must be non-negative, got {lam}")
    classes = list(protos.class_ids if classes is None else classes)
    local = {int(c): i for i, c in enumerate(classes)}
    try:
        y = np.array([local[int(lbl)] for lbl in labels], dtype=np.int64)
    except KeyError as exc:
        raise ProtocolError(f"label {exc.args[0]} is not one of the episode classes {classes}") from None
    z = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    if z.shape[0] != y.size:
        raise ContractError(f"{z.shape[0]} embeddings but {y.size} labels")

    u = map_embeddings(z, metric)
    c = ad.l2_normalize_rows(ad.take_rows(protos.vectors, protos.index_of(classes)))
    logp = ad.log_softmax_rows(ad.scale(chi_matrix(u, c, s), Tensor(-0.5)))
    ce = ad.neg(ad.mean(ad.pick(logp, y)))
    p = ad.exp(logp)
    n = y.size
    entropy = ad.scale(ad.sum(ad.mul(p, logp)), Tensor(-1.0 / n))
    total = ce
    if lam > 0:
        total = ad.add(ce, ad.scale(entropy, Tensor(entropy_sign * lam)))

    k = len(classes)
    row_h = -np.einsum("ik,ik->i", p.values, logp.values)
    near_uniform = float(np.mean(row_h > NEAR_UNIFORM_FRACTION * np.log(k))) if k > 1 else 1.0
    return EpisodeLossReport(
        cross_entropy=ce.item(),
        entropy_term=entropy.item(),
        total=total.item(),
        per_sample_correct_prob=p.values[np.arange(n), y].copy(),
        lam=lam,
        loss=total,
        near_uniform_fraction=near_uniform,
    )


def center_loss(points, centers, assignment) -> Tensor:
    """Sum of squared distances from each point to its assigned center."""
    points = points if isinstance(points, Tensor) else Tensor(points)
    centers = centers if isinstance(centers, Tensor) else Tensor(centers)
    assignment = np.asarray(assignment, dtype=np.int64)
    diff = ad.sub(points, ad.take_rows(centers, assignment))
    return ad.sum(ad.square(diff))


def center_loss_gradients(points: np.ndarray, centers: np.ndarray, assignment) -> tuple:
    """Closed-form gradients: ``2 (x_j - c)`` per point and ``-2 sum_j (x_j - c)`` per center."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=np.int64)
    diff = points - centers[assignment]
    grad_c = np.zeros_like(centers)
    np.add.at(grad_c, assignment, -2.0 * diff)
    return 2.0 * diff, grad_c


def optimal_centers(points: np.ndarray, assignment, num_centers: int) -> np.ndarray:
    """Stationary centers for fixed points: the per-cluster arithmetic mean."""
    points = np.asarray(points, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=np.int64)
    sums = np.zeros((num_centers, points.shape[1]))
    np.add.at(sums, assignment, points)
    counts = np.bincount(assignment, minlength=num_centers)[:, None]
    return sums / np.maximum(counts, 1)


def max_pairwise_distance(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        return 0.0
    diff = x[:, None, :] - x[None, :, :]
    return float(np.sqrt(np.max(np.einsum("ijk,ijk->ij", diff, diff))))


@dataclass
class CollapseResult:
    objective: str
    trajectory: list  # (step, loss, spread)
    diverged: bool
    final_loss: float
    final_spread: float
    points: np.ndarray = field(repr=False)


def collapse_demo(n_points: int = 10, d: int = 2, steps: int = 2000, lr: float = 0.1, seed: int = 0,
                  objective: str = "center", lam: float = 1.0, num_classes: int = 2,
                  scale: float = 1.0) -> CollapseResult:
    """Joint gradient descent on free points and their class parameters.

    ``objective="center"`` minimizes the per-point center loss ``L / n`` with
    all points sharing one free center; the optimum puts every point on the
    center.  ``objective="episode"`` instead minimizes :func:`episode_loss`
    (with entropy weight ``lam``) over ``num_classes`` classes, where the
    spread is measured on the normalized embeddings.

    Divergence (non-finite values, or loss growing past 1e6 times its
    initial value) stops the run and is reported through ``diverged``.
    """
    if n_points < 1 or steps < 0 or lr <= 0:
        raise ContractError("collapse_demo needs n_points >= 1, steps >= 0 and lr > 0")
    rng = np.random.default_rng(seed)
    points = Tensor(rng.standard_normal((n_points, d)), requires_grad=True)
    if objective == "center":
        assign = np.zeros(n_points, dtype=np.int64)
        params = [points, Tensor(rng.standard_normal((1, d)), requires_grad=True)]

        def loss_fn():
            return ad.scale(center_loss(points, params[1], assign), Tensor(1.0 / n_points))

        def spread():
            return max_pairwise_distance(points.values)
    elif objective == "episode":
        labels = np.arange(n_points) % num_classes
        protos = PrototypeTable(list(range(num_classes)), Tensor(rng.standard_normal((num_classes, d))),
                                normalized=False)
        protos.vectors.requires_grad = True
        metric = MetricMap(Tensor(np.eye(d)))
        params = [points, protos.vectors]

        def loss_fn():
            return episode_loss(points, labels, protos, metric, scale, lam=lam).loss

        def spread():
            v = points.values
            return max_pairwise_distance(v / np.linalg.norm(v, axis=1, keepdims=True))
    else:
        raise ContractError(f"unknown collapse objective {objective!r}")

    trajectory = []
    diverged = False
    initial = None
    for step in range(steps + 1):
        for p in params:
            p.zero_grad()
        try:
            with ad.Tape():
                loss = loss_fn()
                if step < steps:
                    ad.backward(loss)
        except (NonFiniteError, DegenerateInputError) as exc:
            log.warning("collapse demo stopped at step %d: %s", step, exc)
            diverged = True
            break
        value = loss.item()
        initial = value if initial is None else initial
        trajectory.append((step, value, spread()))
        if value > 1e6 * max(initial, 1e-12):
            diverged = True
            break
        if step == steps:
            break
        for p in params:
            p.values = p.values - lr * p.grad
    if diverged:
        log.warning("collapse demo diverged (lr=%g)", lr)
    last = trajectory[-1] if trajectory else (0, float("nan"), float("nan"))
    return CollapseResult(objective, trajectory, diverged, last[1], last[2], points.values.copy())


def raise_if_diverged(result: CollapseResult) -> None:
    if result.diverged:
        raise DivergenceError(f"{result.objective} descent diverged", iteration=len(result.trajectory))
