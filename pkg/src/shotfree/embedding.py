"""MLP data representation producing embeddings on the unit sphere.

In TRAIN mode the normalized output goes through inverted dropout and is then
multiplied by a learnable scale ``s``; in EVAL mode only the normalization is
applied.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

DEFAULT_HIDDEN = (64, 64)
DEFAULT_SCALE = 10.0
DEFAULT_DROPOUT = 0.1


class EmbedMode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class EmbeddingParams:
    """Weights of the embedding MLP.

    ``weights[i]`` has shape ``(layer_sizes[i], layer_sizes[i + 1])`` so a
    layer computes ``h @ W + b``.
    """

    layer_sizes: tuple
    weights: list
    biases: list
    scale: Tensor = field(default_factory=lambda: Tensor(DEFAULT_SCALE, requires_grad=True))
    dropout_rate: float = DEFAULT_DROPOUT

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ContractError("layer_sizes needs at least an input and an output size")
        if self.layer_sizes[-1] < 2:
            raise ContractError(f"embedding dimension must be >= 2, got {self.layer_sizes[-1]}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.scale.item() <= 0:
            raise ContractError(f"scale must be positive, got {self.scale.item()}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def dim(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        params.append(self.scale)
        return params

    def requires_grad_(self, flag: bool) -> "EmbeddingParams":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def copy(self) -> "EmbeddingParams":
        return EmbeddingParams(
            self.layer_sizes,
            [Tensor(w.values, w.requires_grad) for w in self.weights],
            [Tensor(b.values, b.requires_grad) for b in self.biases],
            Tensor(self.scale.values, self.scale.requires_grad),
            self.dropout_rate,
        )


def init_embedding(layer_sizes, seed: int, dropout_rate: float = DEFAULT_DROPOUT,
                   scale_init: float = DEFAULT_SCALE) -> EmbeddingParams:
    """He-style uniform init: ``U(-a, a)`` with ``a = sqrt(6 / fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = tuple(int(n) for n in layer_sizes)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return EmbeddingParams(sizes, weights, biases, Tensor(scale_init, requires_grad=True), dropout_rate)


def mlp_forward(params: EmbeddingParams, x) -> Tensor:
    """Raw MLP output: ReLU after every layer except the last."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.values.ndim != 2 or h.shape[1] != params.input_dim:
        raise ContractError(f"expected input of shape (n, {params.input_dim}), got {h.shape}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = ad.relu(h)
    return h


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``rate``, survivors scaled by 1/(1-rate).

    A row that loses every coordinate is redrawn: an all-zero embedding has
    no direction and cannot be mapped back onto the sphere.
    """
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    if keep.ndim == 2:
        dead = ~keep.any(axis=1)
        while dead.any():
            keep[dead] = rng.random((int(dead.sum()), shape[1])) >= rate
            dead = ~keep.any(axis=1)
    return keep / (1.0 - rate)


def embed(params: EmbeddingParams, x, mode: EmbedMode = EmbedMode.EVAL,
          rng: np.random.Generator | None = None) -> Tensor:
    """Embed rows of ``x``.

    EVAL returns unit-norm rows.  TRAIN returns ``s * dropout(normalize(mlp(x)))``
    and needs ``rng`` for the dropout mask.
    """
    z = ad.l2_normalize_rows(mlp_forward(params, x))
    if mode is EmbedMode.EVAL:
        return z
    if rng is None:
        raise ContractError("TRAIN mode needs a seeded random generator for dropout")
    if params.dropout_rate > 0:
        z = ad.mul(z, Tensor(dropout_mask(z.shape, params.dropout_rate, rng)))
    return ad.scale(z, params.scale)


def embed_eval(params: EmbeddingParams, x) -> np.ndarray:
    """EVAL-mode embedding as a plain array, without recording gradients."""
    with ad.no_grad():
        return embed(params, x, EmbedMode.EVAL).values
