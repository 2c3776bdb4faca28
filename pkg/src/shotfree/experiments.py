"""Desk-scale experiment protocols built on training and evaluation.

* :func:`eval_matrix` fills a (train config x test scenario) accuracy table.
* :func:`ablate` sweeps one training axis with paired seeds.
* :func:`shot_mismatch` runs the paired shot-free vs prototypical-network
  comparison across training and testing shots on heteroscedastic data.
* :func:`entropy_monitor` compares near-uniform posterior rates with and
  without the entropy penalty.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baseline import protonet_baseline_train
from .checkpoint import PROTONET, Checkpoint
from .data import SplitDataset, gen_heteroscedastic
from .errors import ContractError
from .fewshot import Scenario, evaluate
from .training import TrainConfig, meta_train

log = logging.getLogger(__name__)

DEFAULT_TEST_SHOTS = (1, 5, 10)

# one training axis at a time; everything else stays at the base config
AXES = {
    "mu_factor": (1, 2, 5, 10),
    "recipe": ("adam", "sgd"),
    "episodes_per_iteration": (8, 16),
    "lam": (0.0, 1.0),
    "entropy_sign": (1.0, -1.0),
}


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else v


def write_rows(path, rows: list, fields=None, comment: str | None = None) -> Path:
    """Write dict rows as CSV; floats keep full precision, None becomes an empty cell."""
    path = Path(path)
    fields = list(fields or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in fields})
    return path


def _parse(v: str):
    if v == "":
        return None
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    if v in ("True", "False"):
        return v == "True"
    return v


def read_rows(path) -> list:
    """Inverse of :func:`write_rows` for numeric, boolean and string cells."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [{k: _parse(v) for k, v in r.items()} for r in reader]


def write_json(path, obj, manifest: str | None = None) -> Path:
    path = Path(path)
    if manifest is not None:
        obj = {"manifest": manifest, **obj}
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def long_format(rows: list, id_fields, value_fields) -> list:
    """One ``(ids..., metric, value)`` row per metric, skipping missing values."""
    out = []
    for r in rows:
        ids = {k: r[k] for k in id_fields}
        for m in value_fields:
            if r.get(m) is not None and not (isinstance(r[m], float) and np.isnan(r[m])):
                out.append({**ids, "metric": m, "value": r[m]})
    return out


# ---------------------------------------------------------------------------
# evaluation matrix
# ---------------------------------------------------------------------------


def default_scenarios(ways: int = 5, shots=DEFAULT_TEST_SHOTS, queries: int = 30, episodes: int = 2000) -> list:
    return [Scenario(ways, k, queries, episodes) for k in shots]


def eval_matrix(checkpoints: dict, ds: SplitDataset, scenarios, methods=None, seed: int = 0,
                workers: int = 1) -> list:
    """Evaluate every checkpoint under every scenario.

    ``checkpoints`` maps a training label (e.g. ``"shot-free"`` or
    ``"protonet 1-shot"``) to a checkpoint.  ``methods`` lists the few-shot
    methods for shot-free checkpoints (default: mean); baseline checkpoints
    always use their own method.  Returns dict rows with a ``train`` column.
    """
    methods = list(methods or ["mean"])
    rows = []
    for label, ck in checkpoints.items():
        ck_methods = [PROTONET] if ck.method == PROTONET else methods
        for sc in scenarios:
            for m in ck_methods:
                rep = evaluate(ck, ds, sc, m, seed=seed, workers=workers)
                rows.append({"train": label, **rep.to_row()})
                log.info("%s / %s / %s: %.4f", label, sc.label, m, rep.accuracy)
    return rows


def pivot(rows: list) -> list:
    """Testing scenario down the rows, (train, method) across the columns."""
    cols = sorted({(r["train"], r["method"]) for r in rows})
    scen = sorted({(r["ways"], r["shots"]) for r in rows})
    table = []
    for ways, shots in scen:
        out = {"test": f"{shots}-shot {ways}-way"}
        for train, method in cols:
            hit = [r for r in rows if (r["ways"], r["shots"], r["train"], r["method"]) == (ways, shots, train, method)]
            out[f"{train} [{method}]"] = hit[0]["accuracy"] if hit else None
        table.append(out)
    return table


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    axis: str
    value: object
    seed: int
    accuracy: float
    ci95: float | None
    validation_score: float | None
    checkpoint_id: str
    seconds: float

    def to_row(self) -> dict:
        """Report row; wall-clock time is left out so reruns produce identical files."""
        d = asdict(self)
        del d["seconds"]
        return d


def _coerce(axis: str, v):
    kind = type(getattr(TrainConfig(), axis))
    return kind(v)


def ablate(ds: SplitDataset, base: TrainConfig, axis: str, values=None, seeds=(0,), scenario: Scenario | None = None,
           method: str = "mean", workers: int = 1) -> list:
    """Train one model per (value, seed) and evaluate each on NOVEL classes.

    Seeds are paired: value ``v`` and seed ``s`` share the dataset, the
    sampling streams and every other setting with all other values at
    ``s``.  Rows carry the checkpoint hash so reruns can be compared.
    """
    if axis not in AXES:
        raise ContractError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    values = AXES[axis] if values is None else tuple(_coerce(axis, v) for v in values)
    scenario = scenario or Scenario(5, 1)
    rows = []
    for v in values:
        for seed in seeds:
            t0 = time.perf_counter()
            cfg = replace(base, seed=int(seed), **{axis: v}).validate()
            ck, _ = meta_train(ds, cfg)
            rep = evaluate(ck, ds, scenario, method, seed=int(seed), workers=workers)
            rows.append(AblationRow(axis, v, int(seed), rep.accuracy, rep.ci95, ck.validation_score,
                                    ck.checkpoint_id(), time.perf_counter() - t0))
            log.info("%s=%s seed %d: %.4f (%.1fs)", axis, v, seed, rep.accuracy, rows[-1].seconds)
    return rows


def summarize_ablation(rows: list) -> list:
    """Mean accuracy per axis value over seeds."""
    out = []
    for v in dict.fromkeys(r.value for r in rows):
        acc = np.array([r.accuracy for r in rows if r.value == v])
        out.append({"axis": rows[0].axis, "value": v, "seeds": acc.size, "accuracy": float(acc.mean()),
                    "std": float(acc.std(ddof=1)) if acc.size > 1 else None})
    return out


# ---------------------------------------------------------------------------
# shot mismatch
# ---------------------------------------------------------------------------


@dataclass
class ShotMismatchConfig:
    """Settings of the paired train-shot / test-shot comparison.

    The shot-free model never sees a shot: its two "configurations" only
    differ in how many samples per class an episode holds, matching the
    total batch of the baseline's ``low_shot`` and ``high_shot`` episodes.
    """

    iterations: int = 1000
    ways: int = 5
    low_shot: int = 1
    high_shot: int = 5
    train_queries: int = 15
    test_queries: int = 30
    episodes: int = 2000
    validation_interval: int = 200
    val_episodes: int = 100
    max_shot_free_gap: float = 0.02
    min_protonet_gap: float = 0.03
    data: dict = field(default_factory=dict)

    def train_config(self, seed: int, **kw) -> TrainConfig:
        return TrainConfig(ways=self.ways, max_iterations=self.iterations, validation_interval=self.validation_interval,
                           val_episodes=self.val_episodes, queries=self.train_queries, seed=seed, **kw)


@dataclass
class ShotMismatchResult:
    seed: int
    # accuracy[(model, test_shot)]
    accuracy: dict
    seconds: float
    cfg: ShotMismatchConfig = field(repr=False, default_factory=ShotMismatchConfig)

    def acc(self, model: str, shot: int) -> float:
        return self.accuracy[(model, shot)]

    @property
    def shot_free_monotone(self) -> bool:
        """More shots never hurt the shot-free model."""
        lo, hi = self.cfg.low_shot, self.cfg.high_shot
        return self.acc("shot-free low", hi) >= self.acc("shot-free low", lo)

    @property
    def shot_free_gap(self) -> float:
        """Largest accuracy difference between the two shot-free batch configurations."""
        return max(abs(self.acc("shot-free low", k) - self.acc("shot-free high", k))
                   for k in (self.cfg.low_shot, self.cfg.high_shot))

    @property
    def protonet_gap(self) -> float:
        """High-shot test accuracy of the high-shot-trained baseline minus the low-shot-trained one."""
        hi = self.cfg.high_shot
        return self.acc("protonet high", hi) - self.acc("protonet low", hi)

    @property
    def passed(self) -> bool:
        return (self.shot_free_monotone and self.shot_free_gap <= self.cfg.max_shot_free_gap
                and self.protonet_gap >= self.cfg.min_protonet_gap)

    def to_rows(self) -> list:
        return [{"seed": self.seed, "model": m, "test_shots": k, "accuracy": a}
                for (m, k), a in sorted(self.accuracy.items())]

    def summary(self) -> dict:
        return {"seed": self.seed, "shot_free_monotone": self.shot_free_monotone,
                "shot_free_gap": self.shot_free_gap, "protonet_gap": self.protonet_gap, "passed": self.passed}


def shot_mismatch(seed: int, cfg: ShotMismatchConfig | None = None, ds: SplitDataset | None = None,
                  workers: int = 1) -> ShotMismatchResult:
    """One paired seed: two shot-free and two baseline trainings on the same data.

    Without ``ds`` the data come from :func:`gen_heteroscedastic` seeded by
    ``seed``.  Both shot-free checkpoints are tested at both shots; the
    baselines are tested at the high shot only.
    """
    cfg = cfg or ShotMismatchConfig()
    t0 = time.perf_counter()
    ds = ds if ds is not None else gen_heteroscedastic(seed=seed, **cfg.data)
    lo, hi = cfg.low_shot, cfg.high_shot

    def sc(k):
        return Scenario(cfg.ways, k, cfg.test_queries, cfg.episodes)

    acc = {}
    for tag, shots in (("low", lo), ("high", hi)):
        pc = shots + cfg.train_queries
        ck, _ = meta_train(ds, cfg.train_config(seed, per_class=pc))
        for k in (lo, hi):
            acc[(f"shot-free {tag}", k)] = evaluate(ck, ds, sc(k), "mean", seed=seed, workers=workers).accuracy
        ck, _ = protonet_baseline_train(ds, cfg.train_config(seed, shots=shots))
        acc[(f"protonet {tag}", hi)] = evaluate(ck, ds, sc(hi), PROTONET, seed=seed, workers=workers).accuracy
    res = ShotMismatchResult(seed, acc, time.perf_counter() - t0, cfg)
    log.info("shot mismatch seed %d (%.0fs): %s", seed, res.seconds, res.summary())
    return res


# ---------------------------------------------------------------------------
# entropy monitor
# ---------------------------------------------------------------------------


def entropy_monitor(ds: SplitDataset, cfg: TrainConfig, lams=(0.0, 1.0)) -> list:
    """Mean near-uniform posterior fraction and final entropy for each entropy weight."""
    rows = []
    for lam in lams:
        _, trainlog = meta_train(ds, replace(cfg, lam=float(lam)))
        nu = trainlog.series("near_uniform")
        rows.append({"lam": float(lam), "near_uniform_mean": float(np.mean(nu)),
                     "near_uniform_max": float(np.max(nu)), "final_entropy": float(trainlog.series("entropy")[-1])})
    return rows


def checkpoints_for_matrix(ds: SplitDataset, base: TrainConfig, protonet_shots=(1, 5)) -> dict:
    """One shot-free checkpoint plus one baseline checkpoint per training shot."""
    cks: dict[str, Checkpoint] = {"shot-free": meta_train(ds, base)[0]}
    for k in protonet_shots:
        cks[f"protonet {k}-shot"] = protonet_baseline_train(ds, replace(base, shots=int(k)))[0]
    return cks
