"""Model checkpoints and their JSON serialization.

Floats are written with ``repr`` precision (the json module's default), so a
save/load round trip reproduces every parameter bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .embedding import EmbeddingParams
from .errors import ContractError
from .metric import MetricMap, PrototypeTable

FORMAT = "shotfree-checkpoint"
FORMAT_VERSION = 1

SHOTFREE = "shotfree"
PROTONET = "protonet"


@dataclass
class Checkpoint:
    """Everything needed to embed data and classify it.

    ``metric`` and ``prototypes`` are None for the prototypical-network
    baseline, which compares raw MLP outputs by Euclidean distance.
    """

    method: str
    embedding: EmbeddingParams
    metric: MetricMap | None = None
    prototypes: PrototypeTable | None = None
    config: dict = field(default_factory=dict)
    iteration: int = 0
    validation_score: float | None = None
    seed: int = 0

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.method,
            self.embedding.copy(),
            None if self.metric is None else self.metric.copy(),
            None if self.prototypes is None else self.prototypes.copy(),
            json.loads(json.dumps(self.config)),
            self.iteration,
            self.validation_score,
            self.seed,
        )

    def frozen(self) -> "Checkpoint":
        """Copy whose tensors do not require gradients."""
        ck = self.copy()
        ck.embedding.requires_grad_(False)
        if ck.metric is not None:
            ck.metric.W.requires_grad = False
        if ck.prototypes is not None:
            ck.prototypes.vectors.requires_grad = False
        return ck

    @property
    def scale(self) -> float:
        return self.embedding.scale.item()

    def checkpoint_id(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:12]


def _arr(t: Tensor) -> dict:
    return {"shape": list(t.shape), "values": t.values.reshape(-1).tolist()}


def _tensor(d: dict, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(d["values"], dtype=np.float64).reshape(d["shape"]), requires_grad=requires_grad)


def to_dict(ck: Checkpoint, manifest: str | None = None) -> dict:
    emb = ck.embedding
    out = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "method": ck.method,
        "seed": ck.seed,
        "iteration": ck.iteration,
        "validation_score": ck.validation_score,
        "config": ck.config,
        "embedding": {
            "layer_sizes": list(emb.layer_sizes),
            "weights": [_arr(w) for w in emb.weights],
            "biases": [_arr(b) for b in emb.biases],
            "scale": float(emb.scale.item()),
            "dropout_rate": emb.dropout_rate,
        },
        "metric": None if ck.metric is None else _arr(ck.metric.W),
        "prototypes": None if ck.prototypes is None else {
            "class_ids": list(ck.prototypes.class_ids),
            "normalized": ck.prototypes.normalized,
            "vectors": _arr(ck.prototypes.vectors),
        },
    }
    if manifest is not None:
        out["manifest"] = manifest
    return out


def from_dict(d: dict) -> Checkpoint:
    if d.get("format") != FORMAT:
        raise ContractError("not a shotfree checkpoint")
    if d.get("version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {d.get('version')}")
    e = d["embedding"]
    emb = EmbeddingParams(
        tuple(e["layer_sizes"]),
        [_tensor(w) for w in e["weights"]],
        [_tensor(b) for b in e["biases"]],
        Tensor(e["scale"], requires_grad=True),
        e["dropout_rate"],
    )
    metric = None if d["metric"] is None else MetricMap(_tensor(d["metric"]))
    protos = None
    if d["prototypes"] is not None:
        p = d["prototypes"]
        protos = PrototypeTable(p["class_ids"], _tensor(p["vectors"]), p["normalized"])
    return Checkpoint(d["method"], emb, metric, protos, d["config"], d["iteration"], d["validation_score"], d["seed"])


def dumps(ck: Checkpoint, manifest: str | None = None) -> str:
    return json.dumps(to_dict(ck, manifest), sort_keys=True)


def save_checkpoint(ck: Checkpoint, path, manifest: str | None = None) -> Path:
    path = Path(path)
    path.write_text(dumps(ck, manifest))
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_dict(json.loads(Path(path).read_text()))
