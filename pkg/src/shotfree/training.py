"""Shot-free meta-training.

Every iteration draws ``episodes_per_iteration`` unsplit episodes from the
BASE classes and takes one optimizer step on the averaged episode loss over
all parameters at once: embedding weights, metric map, scale and the BASE
prototype table.  Prototypes are projected back onto the sphere after every
step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import SHOTFREE, Checkpoint
from .data import Split, SplitDataset, sample_episode_unsplit
from .embedding import DEFAULT_HIDDEN, EmbedMode, embed, init_embedding
from .errors import ContractError, DegenerateInputError, DivergenceError, NonFiniteError
from .fewshot import Scenario, evaluate
from .losses import episode_loss
from .metric import init_prototypes, lift_dimension
from .optim import RECIPES, Recipe, lr_schedule, make_optimizer

log = logging.getLogger(__name__)

# below this the posterior is uniform to double precision and training cannot recover
MIN_SCALE = 1e-6


@dataclass
class TrainConfig:
    """Meta-training settings.

    ``decay_every`` (ADAM step decay) and ``patience`` (SGD plateau decay)
    default to a tenth of ``max_iterations``; the full-scale constants are
    2000 and 1000 iterations.  Without an explicit ``lr`` the recipe's
    desk-scale rate is used (0.01 for SGD instead of the full-scale 0.1).
    """

    recipe: str = "adam"
    ways: int = 5
    per_class: int = 16
    episodes_per_iteration: int = 8
    max_iterations: int = 2000
    lam: float = 1.0
    entropy_sign: float = 1.0
    mu_factor: int = 1
    dropout_rate: float = 0.1
    seed: int = 0
    validation_interval: int = 100
    patience: int | None = None
    decay_every: int | None = None
    lr: float | None = None
    hidden: tuple = DEFAULT_HIDDEN
    embed_dim: int = 32
    scale_init: float = 10.0
    val_episodes: int = 200
    val_ways: int = 5
    val_shots: int = 1
    val_queries: int = 15
    # prototypical-network baseline only
    shots: int = 1
    queries: int = 15

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def problems(self) -> list:
        """Every violated constraint, so a caller can report them together."""
        out = []
        try:
            Recipe(self.recipe)
        except ValueError:
            out.append(f"recipe must be one of {[r.value for r in Recipe]}, got {self.recipe!r}")
        checks = [
            (self.ways >= 1, "ways must be >= 1"),
            (self.per_class >= 1, "per_class must be >= 1"),
            (self.episodes_per_iteration >= 1, "episodes_per_iteration must be >= 1"),
            (self.max_iterations >= 0, "max_iterations must be >= 0"),
            (self.lam >= 0, "lambda must be >= 0"),
            (self.entropy_sign in (1.0, -1.0), "entropy_sign must be +1 or -1"),
            (int(self.mu_factor) == self.mu_factor and self.mu_factor >= 1, "mu_factor must be a positive integer"),
            (0 <= self.dropout_rate < 1, "dropout_rate must lie in [0, 1)"),
            (self.validation_interval >= 1, "validation_interval must be >= 1"),
            (self.embed_dim >= 2, "embed_dim must be >= 2"),
            (self.scale_init > 0, "scale_init must be positive"),
            (self.lr is None or self.lr > 0, "lr must be positive"),
            (self.shots >= 1, "shots must be >= 1"),
            (self.queries >= 1, "queries must be >= 1"),
        ]
        out.extend(msg for ok, msg in checks if not ok)
        return out

    def validate(self) -> "TrainConfig":
        bad = self.problems()
        if bad:
            raise ContractError("invalid training config: " + "; ".join(bad))
        return self

    @property
    def resolved_decay_every(self) -> int:
        return self.decay_every if self.decay_every is not None else max(1, self.max_iterations // 10)

    @property
    def resolved_patience(self) -> int:
        return self.patience if self.patience is not None else max(1, self.max_iterations // 10)

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        d = RECIPES[Recipe(self.recipe)]
        return d.lr if d.desk_lr is None else d.desk_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ContractError(f"unknown config keys: {unknown}")
        return cls(**d)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    COLUMNS = ("iteration", "loss", "cross_entropy", "entropy", "near_uniform", "lr", "scale", "val_accuracy")

    def append(self, **row):
        self.rows.append(row)

    def series(self, key: str) -> np.ndarray:
        return np.array([np.nan if r.get(key) is None else r[key] for r in self.rows], dtype=np.float64)

    def validation(self) -> list:
        return [(r["iteration"], r["val_accuracy"]) for r in self.rows if r.get("val_accuracy") is not None]

    def to_csv(self, path, comment: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k])
                            for k in self.COLUMNS})

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(line for line in fh if not line.startswith("#"))
            rows = []
            for r in reader:
                rows.append({k: (None if r[k] == "" else int(r[k]) if k == "iteration" else float(r[k]))
                             for k in cls.COLUMNS})
        return cls(rows)


def _streams(seed: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def validation_scenario(cfg: TrainConfig) -> Scenario:
    return Scenario(cfg.val_ways, cfg.val_shots, cfg.val_queries, cfg.val_episodes)


def validate_checkpoint(ck: Checkpoint, ds: SplitDataset, cfg: TrainConfig, method: str | None = None):
    """Few-shot accuracy on VAL classes, or None when VAL is too small for the scenario."""
    sc = validation_scenario(cfg)
    val_classes = ds.classes(Split.VAL)
    need = sc.shots + sc.queries
    if len(val_classes) < sc.ways or any(len(ds.rows_of(c)) < need for c in val_classes):
        return None
    return evaluate(ck, ds, sc, method=method, seed=cfg.seed, split=Split.VAL).accuracy


def iteration_loss(emb, metric, protos, ds: SplitDataset, episodes, cfg: TrainConfig, rng):
    """Averaged loss of several episodes, embedded in a single forward pass.

    Returns ``(loss tensor, list of per-episode reports)``.
    """
    idx = np.concatenate([ep.indices() for ep in episodes])
    z = embed(emb, ds.features[idx], EmbedMode.TRAIN, rng)
    total = None
    reports = []
    start = 0
    for ep in episodes:
        n = len(ep.indices())
        ze = ad.take_rows(z, np.arange(start, start + n))
        start += n
        rep = episode_loss(ze, ep.labels(), protos, metric, emb.scale, lam=cfg.lam, classes=ep.class_ids,
                           entropy_sign=cfg.entropy_sign)
        reports.append(rep)
        total = rep.loss if total is None else ad.add(total, rep.loss)
    return ad.scale(total, ad.Tensor(1.0 / len(episodes))), reports


def init_model(ds: SplitDataset, cfg: TrainConfig):
    """Fresh (embedding, metric, BASE prototype table) for ``cfg``."""
    s_emb, s_met, s_pro = _streams(cfg.seed, 3)
    emb = init_embedding((ds.input_dim,) + cfg.hidden + (cfg.embed_dim,), s_emb, cfg.dropout_rate, cfg.scale_init)
    metric = lift_dimension(cfg.mu_factor, cfg.embed_dim, s_met)
    protos = init_prototypes(ds.classes(Split.BASE), metric.mu, s_pro)
    return emb, metric, protos


def meta_train(ds: SplitDataset, cfg: TrainConfig, init=None, on_step=None):
    """Meta-train a shot-free model; returns ``(best checkpoint, TrainLog)``.

    The checkpoint with the highest validation accuracy is kept; without a
    usable VAL split the final iterate is returned.  A NaN/Inf loss raises
    :class:`DivergenceError` carrying the iteration and learning rate.
    ``on_step(iteration, emb, metric, protos, episodes)`` is called after
    every parameter update, e.g. to monitor invariants.
    """
    cfg.validate()
    base = ds.classes(Split.BASE)
    if not base:
        raise ContractError("dataset has no BASE classes to meta-train on")
    emb, metric, protos = init if init is not None else init_model(ds, cfg)
    params = emb.parameters() + [metric.W, protos.vectors]
    opt = make_optimizer(cfg.recipe, params, cfg.resolved_lr, row_sparse=[protos.vectors])
    rng = np.random.default_rng(_streams(cfg.seed, 4)[3])
    trainlog = TrainLog()
    history = []
    best = None

    def snapshot(iteration, score):
        return Checkpoint(SHOTFREE, emb.copy(), metric.copy(), protos.copy(), cfg.to_dict(), iteration, score,
                          cfg.seed)

    for it in range(cfg.max_iterations):
        lr = lr_schedule(cfg.recipe, it, history, cfg.resolved_lr, cfg.resolved_decay_every, cfg.resolved_patience)
        episodes = [sample_episode_unsplit(ds, Split.BASE, cfg.ways, cfg.per_class, rng)
                    for _ in range(cfg.episodes_per_iteration)]
        opt.zero_grad()
        try:
            with ad.Tape():
                loss, reports = iteration_loss(emb, metric, protos, ds, episodes, cfg, rng)
                ad.backward(loss)
            if not np.isfinite(loss.item()):
                raise NonFiniteError("NaN loss")
            opt.step(lr)
            protos.renormalize(sorted({c for ep in episodes for c in ep.class_ids}))
        except (NonFiniteError, DegenerateInputError) as exc:
            raise DivergenceError(f"training diverged at iteration {it} (lr={lr:g}): {exc}", it, lr) from exc
        # the loss depends on s only through s^2; keep the positive representative
        emb.scale.values = np.abs(emb.scale.values)
        if emb.scale.item() < MIN_SCALE:
            raise DivergenceError(f"scale collapsed to {emb.scale.item():.2e} at iteration {it} (lr={lr:g}): "
                                  "posteriors are uniform; lower the learning rate", it, lr)
        if on_step is not None:
            on_step(it + 1, emb, metric, protos, episodes)

        row = dict(
            iteration=it + 1,
            loss=loss.item(),
            cross_entropy=float(np.mean([r.cross_entropy for r in reports])),
            entropy=float(np.mean([r.entropy_term for r in reports])),
            near_uniform=float(np.mean([r.near_uniform_fraction for r in reports])),
            lr=lr,
            scale=emb.scale.item(),
            val_accuracy=None,
        )
        if (it + 1) % cfg.validation_interval == 0 or it + 1 == cfg.max_iterations:
            ck = snapshot(it + 1, None)
            score = validate_checkpoint(ck, ds, cfg)
            if score is not None:
                row["val_accuracy"] = score
                history.append((it + 1, score))
                if best is None or score > best.validation_score:
                    ck.validation_score = score
                    best = ck
                log.info("iteration %d: loss %.4f val %.4f lr %.2g", it + 1, row["loss"], score, lr)
        trainlog.append(**row)

    if best is None:
        best = snapshot(cfg.max_iterations, None)
    return best.frozen(), trainlog
