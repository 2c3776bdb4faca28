"""Few-shot phase: placing prototypes for new classes and evaluating on episodes.

Four strata are available, from most to least learning:

* :func:`lifelong_update` keeps optimizing the whole model with new classes
  added to the prototype table.
* :func:`backfill_metric` freezes the embedding and adapts the metric map
  together with the new prototypes.
* :func:`prototypes_implicit` freezes embedding and metric and solves for
  the prototypes that minimize the loss on the support set.
* :func:`prototypes_mean` uses the normalized mean of the mapped supports.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import PROTONET, SHOTFREE, Checkpoint
from .data import Split, SplitDataset, sample_episode_support_query
from .embedding import EmbedMode, embed, embed_eval, mlp_forward
from .errors import ContractError, DegenerateInputError, DimensionError, ProtocolError
from .losses import episode_loss
from .metric import MetricMap, PrototypeTable, softmax
from .optim import Adam

log = logging.getLogger(__name__)

DEFAULT_EPISODES = 2000
DEFAULT_QUERIES = 30
METHODS = ("mean", "implicit", "backfill", PROTONET)


@dataclass
class FewShotTask:
    """Labeled support rows for a set of new classes, plus held-out queries.

    Classes may have different numbers of shots.
    """

    class_ids: tuple
    support_features: np.ndarray
    support_labels: np.ndarray
    query_features: np.ndarray = None
    query_labels: np.ndarray = None

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        self.support_features = np.atleast_2d(np.asarray(self.support_features, dtype=np.float64))
        self.support_labels = np.asarray(self.support_labels, dtype=np.int64)
        if self.query_features is None:
            self.query_features = np.zeros((0, self.support_features.shape[1]))
            self.query_labels = np.zeros(0, dtype=np.int64)
        self.query_features = np.asarray(self.query_features, dtype=np.float64).reshape(-1, self.support_features.shape[1])
        self.query_labels = np.asarray(self.query_labels, dtype=np.int64)
        known = set(self.class_ids)
        if len(known) != len(self.class_ids):
            raise ProtocolError("task class ids must be unique")
        if len(self.support_labels) != len(self.support_features):
            raise ProtocolError("support features and labels differ in length")
        if len(self.query_labels) != len(self.query_features):
            raise ProtocolError("query features and labels differ in length")
        stray = (set(self.support_labels.tolist()) | set(self.query_labels.tolist())) - known
        if stray:
            raise ProtocolError(f"labels {sorted(stray)} are not among the task classes")
        empty = [c for c in self.class_ids if not np.any(self.support_labels == c)]
        if empty:
            raise ProtocolError(f"classes {empty} have no support samples")

    @property
    def ways(self) -> int:
        return len(self.class_ids)

    def shots(self) -> dict:
        return {c: int(np.sum(self.support_labels == c)) for c in self.class_ids}

    @classmethod
    def from_episode(cls, ds: SplitDataset, episode) -> "FewShotTask":
        s_idx, s_lab = episode.support()
        q_idx, q_lab = episode.query()
        if np.intersect1d(s_idx, q_idx).size:
            raise ProtocolError("support and query rows overlap")
        return cls(episode.class_ids, ds.features[s_idx], s_lab, ds.features[q_idx], q_lab)


@dataclass
class ImplicitConfig:
    """Settings for the projected-gradient prototype solve (and backfill)."""

    max_steps: int = 500
    tol: float = 1e-6
    lam: float = 0.0
    scale: float | None = None  # None: the checkpoint's learned scale
    backfill_steps: int = 50
    backfill_lr: float = 1e-2


@dataclass
class SolveInfo:
    steps: int
    converged: bool
    initial_loss: float
    final_loss: float
    grad_norm: float


# ---------------------------------------------------------------------------
# representations
# ---------------------------------------------------------------------------


def _check_input(ck: Checkpoint, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != ck.embedding.input_dim:
        raise DimensionError(
            f"checkpoint expects {ck.embedding.input_dim}-dimensional rows but got data of shape {x.shape}")


def represent(ck: Checkpoint, x, metric: MetricMap | None = None) -> np.ndarray:
    """Points that prototypes are compared with.

    Shot-free models: ``normalize(W z)`` with ``z`` the EVAL embedding.
    Baseline: raw MLP outputs.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_input(ck, x)
    if ck.method == PROTONET:
        with ad.no_grad():
            return mlp_forward(ck.embedding, x).values
    return _map_unit(embed_eval(ck.embedding, x), metric or ck.metric)


def _map_unit(z: np.ndarray, metric: MetricMap) -> np.ndarray:
    u = z @ metric.W.values.T
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norms <= ad.DEFAULT_EPS):
        raise DegenerateInputError("metric map sends an embedding to ~0")
    return u / norms


def _class_means(points: np.ndarray, labels: np.ndarray, class_ids) -> np.ndarray:
    return np.stack([points[labels == c].mean(axis=0) for c in class_ids])


def mean_prototypes_from_points(u: np.ndarray, labels, class_ids) -> np.ndarray:
    """Normalized class means of unit points."""
    means = _class_means(u, np.asarray(labels), class_ids)
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        bad = [c for c, n in zip(class_ids, norms[:, 0]) if n <= 1e-12]
        raise DegenerateInputError(f"supports of classes {bad} average to zero; mean prototype undefined")
    return means / norms


def _frozen_scale(ck: Checkpoint, cfg: ImplicitConfig | None) -> float:
    if cfg is not None and cfg.scale is not None:
        return float(cfg.scale)
    return abs(ck.scale)


# ---------------------------------------------------------------------------
# prototype strata
# ---------------------------------------------------------------------------


def prototypes_mean(ck: Checkpoint, task: FewShotTask) -> PrototypeTable:
    """No few-shot learning: ``c_k = normalize(mean_j normalize(W z_j))``."""
    u = represent(ck, task.support_features)
    return PrototypeTable(list(task.class_ids), Tensor(mean_prototypes_from_points(u, task.support_labels,
                                                                                   task.class_ids)))


def implicit_objective(u: np.ndarray, y: np.ndarray, c: np.ndarray, scale: float, lam: float = 0.0):
    """Summed loss of unit points ``u`` (local labels ``y``) against unit prototypes ``c``.

    Returns ``(value, gradient wrt c)``.  Scores are ``s^2 cos`` which equal
    ``-chi / 2`` up to a constant shift.
    """
    s2 = scale * scale
    logits = s2 * (u @ c.T)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    logp = logits - lse[:, None]
    p = np.exp(logp)
    n = len(y)
    value = float(np.sum(lse - logits[np.arange(n), y]))
    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    if lam:
        h = -np.sum(p * logp, axis=1)
        value += lam * float(h.sum())
        dlogits += lam * (-p * (logp + h[:, None]))
    return value, s2 * (dlogits.T @ u)


def solve_implicit_prototypes(u: np.ndarray, labels, class_ids, scale: float, init: np.ndarray | None = None,
                              max_steps: int = 500, tol: float = 1e-6, lam: float = 0.0, warn: bool = True):
    """Projected gradient descent on the sphere for the loss-minimizing prototypes.

    Starts at ``init`` (default: normalized class means) and uses Armijo
    backtracking, so the loss never rises above its starting value.  Stops
    when the tangent gradient norm drops below ``tol`` or after
    ``max_steps``; on non-convergence a warning is logged and the best
    iterate is returned (``warn=False`` leaves the reporting to the caller).
    Returns ``(prototypes, SolveInfo)``.
    """
    class_ids = list(class_ids)
    local = {c: i for i, c in enumerate(class_ids)}
    y = np.array([local[int(c)] for c in labels], dtype=np.int64)
    c = mean_prototypes_from_points(u, labels, class_ids) if init is None else np.array(init, dtype=np.float64)
    f, g = implicit_objective(u, y, c, scale, lam)
    f0 = f
    step = 1.0 / max(scale * scale * len(y), 1e-12)
    steps = 0
    converged = False
    gnorm = 0.0
    for steps in range(1, max_steps + 1):
        gt = g - np.sum(g * c, axis=1, keepdims=True) * c
        gnorm = float(np.linalg.norm(gt))
        if gnorm < tol:
            converged = True
            steps -= 1
            break
        while True:
            cand = c - step * gt
            cand /= np.linalg.norm(cand, axis=1, keepdims=True)
            fc, gc = implicit_objective(u, y, cand, scale, lam)
            if fc <= f - 1e-4 * step * gnorm * gnorm:
                break
            step *= 0.5
            if step < 1e-30:
                break
        if step < 1e-30 or fc > f:
            converged = True  # no descent possible at machine precision
            break
        c, f, g = cand, fc, gc
        step *= 2.0
    if not converged and warn:
        log.warning("implicit prototype solve stopped after %d steps (tangent grad %.2e)", steps, gnorm)
    return c, SolveInfo(steps, converged, f0, f, gnorm)


def prototypes_implicit(ck: Checkpoint, task: FewShotTask, opt_cfg: ImplicitConfig | None = None) -> PrototypeTable:
    """Prototypes defined as minimizers of the few-shot loss, with embedding and metric frozen.

    A single-way task has a constant objective (its posterior is always 1),
    so the mean initialization is returned unchanged.
    """
    cfg = opt_cfg or ImplicitConfig()
    u = represent(ck, task.support_features)
    c, _ = solve_implicit_prototypes(u, task.support_labels, task.class_ids, _frozen_scale(ck, cfg),
                                     max_steps=cfg.max_steps, tol=cfg.tol, lam=cfg.lam)
    return PrototypeTable(list(task.class_ids), Tensor(c))


def backfill_metric(ck: Checkpoint, tasks, opt_cfg: ImplicitConfig | None = None, learn_metric: bool = True):
    """Adapt the metric map and the new prototypes jointly on the pooled support data.

    The embedding stays frozen.  New prototypes start at their mean
    initialization.  Base prototypes are carried along the change of ``W``:
    ``c <- normalize(c + (W_new - W_old) W_old^+ c)``.  Returns
    ``(MetricMap, PrototypeTable)`` where the table lists base classes
    followed by the new ones.  ``learn_metric=False`` runs the same loop with
    ``W`` frozen, the fixed-metric control.
    """
    cfg = opt_cfg or ImplicitConfig()
    tasks = list(tasks)
    w_old = ck.metric.W.values.copy()
    metric = MetricMap(Tensor(w_old, requires_grad=learn_metric))
    base = ck.prototypes.copy() if ck.prototypes is not None else None
    if not tasks:
        return metric, base

    feats = np.vstack([t.support_features for t in tasks])
    labels = np.concatenate([t.support_labels for t in tasks])
    class_ids = []
    for t in tasks:
        class_ids.extend(c for c in t.class_ids if c not in class_ids)
    if base is not None and set(class_ids) & set(base.class_ids):
        raise ContractError("few-shot classes must be disjoint from the base classes")
    _check_input(ck, feats)
    z = embed_eval(ck.embedding, feats)
    init = mean_prototypes_from_points(_map_unit(z, ck.metric), labels, class_ids)
    novel = PrototypeTable(class_ids, Tensor(init, requires_grad=True))
    s = _frozen_scale(ck, cfg)
    opt = Adam([metric.W, novel.vectors] if learn_metric else [novel.vectors], lr=cfg.backfill_lr)
    zt = Tensor(z)
    for _ in range(cfg.backfill_steps):
        opt.zero_grad()
        with ad.Tape():
            rep = episode_loss(zt, labels, novel, metric, s, lam=cfg.lam)
            ad.backward(rep.loss)
        opt.step()
        novel.renormalize()
    metric.W.requires_grad = False
    novel.vectors.requires_grad = False

    if base is None:
        return metric, novel
    delta = metric.W.values - w_old
    if np.any(delta):
        moved = base.vectors.values + (delta @ np.linalg.pinv(w_old) @ base.vectors.values.T).T
        base = PrototypeTable(base.class_ids, Tensor(moved), normalized=False)
        base.renormalize()
    return metric, base.extend(novel)


def lifelong_update(ck: Checkpoint, task: FewShotTask, steps: int = 100, lr: float = 1e-3, lam: float = 1.0,
                    seed: int = 0) -> Checkpoint:
    """Add the task's classes to the prototype table and keep training every parameter.

    New prototypes start at their mean initialization; the loss is the
    meta-training loss restricted to the task's classes, computed on the full
    support set each step.
    """
    if ck.method != SHOTFREE:
        raise ContractError("lifelong updates need a shot-free checkpoint")
    new = ck.copy()
    new.embedding.requires_grad_(True)
    new.metric.W.requires_grad = True
    fresh = prototypes_mean(ck, task)
    table = (new.prototypes.extend(fresh) if new.prototypes is not None else fresh)
    table.vectors.requires_grad = True
    new.prototypes = table
    rng = np.random.default_rng(seed)
    params = new.embedding.parameters() + [new.metric.W, table.vectors]
    opt = Adam(params, lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        with ad.Tape():
            z = embed(new.embedding, task.support_features, EmbedMode.TRAIN, rng)
            rep = episode_loss(z, task.support_labels, table, new.metric, new.embedding.scale, lam=lam,
                               classes=task.class_ids)
            ad.backward(rep.loss)
        opt.step()
        table.renormalize()
    new.iteration = ck.iteration + steps
    return new.frozen()


# ---------------------------------------------------------------------------
# classification and evaluation
# ---------------------------------------------------------------------------


def _nearest(points: np.ndarray, protos: np.ndarray, class_ids) -> np.ndarray:
    """Nearest prototype by squared distance; ties go to the lowest id.

    A positive scale multiplies every distance by ``s^2`` and cannot change
    the ranking, so it is left out and predictions are exactly scale-free.
    """
    order = np.argsort(np.asarray(class_ids), kind="stable")
    ids = np.asarray(class_ids)[order]
    c = protos[order]
    d = (np.sum(points * points, axis=1)[:, None] + np.sum(c * c, axis=1)[None, :]) - 2.0 * (points @ c.T)
    return ids[np.argmin(d, axis=1)]


def classify(ck: Checkpoint, protos: PrototypeTable, query_rows, metric: MetricMap | None = None) -> np.ndarray:
    """Predicted class id per query: ``argmin_k chi(z, c_k)``, ties broken by lowest id.

    The result does not depend on the scale ``s``.
    """
    return _nearest(represent(ck, query_rows, metric), protos.vectors.values, protos.class_ids)


def posterior_argmax(ck: Checkpoint, protos: PrototypeTable, query_rows) -> np.ndarray:
    """Class with the highest posterior; agrees with :func:`classify`."""
    pts = represent(ck, query_rows)
    s = abs(ck.scale)
    c = protos.vectors.values
    chi = s * s * np.sum((pts[:, None, :] - c[None, :, :]) ** 2, axis=2)
    p = softmax(-0.5 * chi, axis=1)
    ids = np.asarray(protos.class_ids)
    best = [ids[np.flatnonzero(row == row.max())].min() for row in p]
    return np.array(best)


@dataclass
class Scenario:
    ways: int = 5
    shots: int = 1
    queries: int = DEFAULT_QUERIES
    episodes: int = DEFAULT_EPISODES

    @property
    def label(self) -> str:
        return f"{self.shots}-shot {self.ways}-way"


@dataclass
class EvalReport:
    """Episode-averaged accuracy (a fraction in [0, 1]) with its 95% interval half-width.

    ``ci95`` is None when it is not defined (a single episode).
    """

    scenario: str
    method: str
    ways: int
    shots: int
    queries: int
    episodes: int
    accuracy: float
    ci95: float | None
    seed: int
    checkpoint_id: str = ""
    per_episode: np.ndarray = field(default=None, repr=False)

    CSV_FIELDS = ("method", "scenario", "ways", "shots", "queries", "episodes", "accuracy", "ci95", "seed",
                  "checkpoint_id")

    def to_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}

    def to_json(self) -> dict:
        return self.to_row()


def ci95(acc) -> float | None:
    """``1.96 * std / sqrt(n)`` with the sample standard deviation; None for n < 2."""
    acc = np.asarray(acc, dtype=np.float64)
    if acc.size < 2:
        return None
    return float(1.96 * acc.std(ddof=1) / math.sqrt(acc.size))


class _Representations:
    """Precomputed EVAL representations of one split's rows."""

    def __init__(self, ck: Checkpoint, ds: SplitDataset, split):
        rows = ds.rows_in(split)
        self.pos = np.full(len(ds.labels), -1, dtype=np.int64)
        self.pos[rows] = np.arange(len(rows))
        x = ds.features[rows]
        _check_input(ck, x)
        if ck.method == PROTONET:
            with ad.no_grad():
                self.points = mlp_forward(ck.embedding, x).values
            self.z = None
        else:
            self.z = embed_eval(ck.embedding, x)
            self.points = _map_unit(self.z, ck.metric)


def _episode_accuracy(ck: Checkpoint, reps: _Representations, ds: SplitDataset, split, scenario: Scenario,
                      method: str, rng, opt_cfg: ImplicitConfig) -> tuple:
    """Accuracy on one sampled task and whether an implicit solve stopped short."""
    ep = sample_episode_support_query(ds, split, scenario.ways, scenario.shots, scenario.queries, rng)
    s_idx, s_lab = ep.support()
    q_idx, q_lab = ep.query()
    if len(q_idx) == 0:
        raise ProtocolError("evaluation needs at least one query per class")
    sp = reps.points[reps.pos[s_idx]]
    qp = reps.points[reps.pos[q_idx]]
    classes = list(ep.class_ids)
    unconverged = False
    if method == PROTONET:
        protos = np.stack([sp[s_lab == c].mean(axis=0) for c in classes])
        pred = _nearest(qp, protos, classes)
    else:
        s = _frozen_scale(ck, opt_cfg)
        if method == "mean":
            protos = mean_prototypes_from_points(sp, s_lab, classes)
        elif method == "implicit":
            protos, info = solve_implicit_prototypes(sp, s_lab, classes, s, max_steps=opt_cfg.max_steps,
                                                     tol=opt_cfg.tol, lam=opt_cfg.lam, warn=False)
            unconverged = not info.converged
        elif method == "backfill":
            task = FewShotTask(classes, ds.features[s_idx], s_lab)
            metric, table = backfill_metric(ck, [task], opt_cfg)
            novel = table.subset(classes)
            qp = _map_unit(reps.z[reps.pos[q_idx]], metric)
            protos = novel.vectors.values
        else:
            raise ContractError(f"unknown method {method!r}; choose from {METHODS}")
        pred = _nearest(qp, protos, classes)
    return float(np.mean(pred == q_lab)), unconverged


def evaluate(ck: Checkpoint, ds: SplitDataset, scenario: Scenario | None = None, method: str | None = None,
             seed: int = 0, split=Split.NOVEL, workers: int = 1, opt_cfg: ImplicitConfig | None = None) -> EvalReport:
    """Mean accuracy over ``scenario.episodes`` support/query tasks drawn from ``split``.

    Nothing here depends on how the checkpoint was trained, so one shot-free
    checkpoint serves every (ways, shots) scenario.  Episode ``i`` draws from
    its own random substream, making results independent of ``workers``.
    """
    scenario = scenario or Scenario()
    method = method or (PROTONET if ck.method == PROTONET else "mean")
    if (method == PROTONET) != (ck.method == PROTONET):
        raise ContractError(f"method {method!r} does not apply to a {ck.method} checkpoint")
    if scenario.episodes < 1:
        raise ContractError("need at least one evaluation episode")
    opt_cfg = opt_cfg or ImplicitConfig()
    ck = ck.frozen()
    reps = _Representations(ck, ds, split)
    streams = np.random.SeedSequence(seed).spawn(scenario.episodes)

    def run(i):
        return _episode_accuracy(ck, reps, ds, split, scenario, method, np.random.default_rng(streams[i]), opt_cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            acc = list(pool.map(run, range(scenario.episodes)))
    else:
        acc = [run(i) for i in range(scenario.episodes)]
    unconverged = sum(u for _, u in acc)
    if unconverged:
        log.warning("%s: implicit solve hit the step limit in %d of %d episodes (best iterate used)", method,
                    unconverged, scenario.episodes)
    acc = np.array([a for a, _ in acc])
    return EvalReport(scenario.label, method, scenario.ways, scenario.shots, scenario.queries, scenario.episodes,
                      float(acc.mean()), ci95(acc), seed, ck.checkpoint_id(), acc)
