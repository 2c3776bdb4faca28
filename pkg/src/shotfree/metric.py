"""Class prototypes, the learnable metric map and the membership discriminant.

Embeddings ``z`` (dimension ``d``) are mapped to prototype space (dimension
``mu``) by ``W`` of shape ``(mu, d)`` and re-normalized.  The discriminant is

    chi(z, c) = |s * normalize(W z) - s * c|^2 = 2 s^2 (1 - cos(theta))

Class posteriors are ``softmax(-chi / 2)`` over the classes of an episode,
i.e. proportional to ``exp(<s u, s c>) = exp(s^2 cos(theta))``.  The factor
1/2 is the usual Gaussian convention; since ``s`` is learned it only fixes
how ``s`` is reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegenerateInputError, DimensionError, NonFiniteError


@dataclass
class PrototypeTable:
    """Per-class identity vectors, one row per entry of ``class_ids``."""

    class_ids: list
    vectors: Tensor
    normalized: bool = True

    def __post_init__(self):
        self.class_ids = [int(c) for c in self.class_ids]
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ContractError("prototype class ids must be unique")
        if self.vectors.values.ndim != 2 or self.vectors.shape[0] != len(self.class_ids):
            raise DimensionError(
                f"{len(self.class_ids)} class ids but prototype matrix has shape {self.vectors.shape}")
        self._pos = {c: i for i, c in enumerate(self.class_ids)}
        if self.normalized:
            norms = np.linalg.norm(self.vectors.values, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ContractError("normalized prototype table has rows off the unit sphere")

    @property
    def mu(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.class_ids)

    def index_of(self, class_ids) -> np.ndarray:
        try:
            return np.array([self._pos[int(c)] for c in class_ids], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"class {exc.args[0]} has no prototype") from None

    def renormalize(self, class_ids=None) -> None:
        """Project rows back onto the unit sphere, in place.

        ``class_ids`` limits the projection to those classes; the other rows
        are left bit for bit as they are.
        """
        v = self.vectors.values
        rows = slice(None) if class_ids is None else self.index_of(class_ids)
        with np.errstate(over="ignore", invalid="ignore"):
            norms = np.linalg.norm(v[rows], axis=1, keepdims=True)
        if not np.all(np.isfinite(norms)):
            raise NonFiniteError("a prototype left the representable range")
        if np.any(norms <= ad.DEFAULT_EPS):
            raise DegenerateInputError("a prototype collapsed to the origin")
        v[rows] = v[rows] / norms
        if class_ids is None:
            self.normalized = True

    def subset(self, class_ids) -> "PrototypeTable":
        idx = self.index_of(class_ids)
        return PrototypeTable(list(class_ids), Tensor(self.vectors.values[idx]), self.normalized)

    def extend(self, other: "PrototypeTable") -> "PrototypeTable":
        """Table holding the rows of ``self`` followed by the rows of ``other``."""
        if other.mu != self.mu:
            raise DimensionError(f"cannot merge prototype dimensions {self.mu} and {other.mu}")
        return PrototypeTable(
            self.class_ids + other.class_ids,
            Tensor(np.vstack([self.vectors.values, other.vectors.values])),
            self.normalized and other.normalized,
        )

    def sorted(self) -> "PrototypeTable":
        return self.subset(sorted(self.class_ids))

    def copy(self) -> "PrototypeTable":
        return PrototypeTable(list(self.class_ids), Tensor(self.vectors.values, self.vectors.requires_grad),
                              self.normalized)


@dataclass
class MetricMap:
    """Linear map from embedding space (``d``) to prototype space (``mu``)."""

    W: Tensor

    def __post_init__(self):
        if self.W.values.ndim != 2:
            raise DimensionError(f"W must be a matrix, got shape {self.W.shape}")

    @property
    def mu(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "MetricMap":
        return MetricMap(Tensor(self.W.values, self.W.requires_grad))


def init_prototypes(class_ids, mu: int, seed: int) -> PrototypeTable:
    """Rows uniform on the sphere S^(mu-1): Gaussian draws, then normalized.

    ``class_ids`` may be a count, in which case ids ``0..n-1`` are used.
    """
    if isinstance(class_ids, (int, np.integer)):
        class_ids = list(range(int(class_ids)))
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((len(class_ids), mu))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return PrototypeTable(list(class_ids), Tensor(v, requires_grad=True))


def lift_dimension(mu_factor: int, d: int, seed: int = 0) -> MetricMap:
    """Metric map into a space ``mu_factor`` times larger than the embedding.

    Factor 1 starts from the identity; larger factors use He-style uniform
    initialization with fan-in ``d``.
    """
    if int(mu_factor) != mu_factor or mu_factor < 1:
        raise ContractError(f"mu_factor must be a positive integer, got {mu_factor}")
    mu = int(mu_factor) * d
    if mu_factor == 1:
        return MetricMap(Tensor(np.eye(d), requires_grad=True))
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / d)
    return MetricMap(Tensor(rng.uniform(-bound, bound, size=(mu, d)), requires_grad=True))


def map_embeddings(z: Tensor, metric: MetricMap) -> Tensor:
    """``normalize(W z)`` for every row of ``z``."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.values.ndim != 2 or z.shape[1] != metric.d:
        raise DimensionError(f"embeddings of shape {z.shape} do not match W of shape {metric.W.shape}")
    try:
        return ad.l2_normalize_rows(ad.matmul(z, ad.transpose(metric.W)))
    except DegenerateInputError as exc:
        raise DegenerateInputError(f"metric map sends an embedding to ~0: {exc}") from None


def chi_matrix(u: Tensor, c: Tensor, s) -> Tensor:
    """``chi[i, k] = |s u_i - s c_k|^2`` for unit rows ``u`` and ``c``."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    return ad.sq_dists(ad.scale(u, s), ad.scale(c, s))


def _scale_value(s) -> float:
    return s.item() if isinstance(s, Tensor) else float(s)


def chi(z, c, metric: MetricMap, s) -> float:
    """Discriminant between one embedding ``z`` and one prototype ``c``."""
    if _scale_value(s) <= 0:
        raise ContractError("scale s must be positive")
    with ad.no_grad():
        u = map_embeddings(Tensor(np.reshape(_values(z), (1, -1))), metric)
        cv = Tensor(np.reshape(_values(c), (1, -1)))
        return float(chi_matrix(u, cv, _scale_value(s)).values[0, 0])


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def logits_from_chi(x):
    """Class scores used by every softmax in the package: ``-chi / 2``."""
    return -0.5 * x


def posterior(z, protos: PrototypeTable, metric: MetricMap, s) -> np.ndarray:
    """Class probabilities ``softmax(-chi / 2)`` of embedding(s) ``z`` over ``protos``.

    Accepts a single embedding (returns a vector) or a matrix of embeddings.
    """
    zv = _values(z)
    single = zv.ndim == 1
    with ad.no_grad():
        u = map_embeddings(Tensor(np.atleast_2d(zv)), metric)
        x = chi_matrix(u, Tensor(protos.vectors.values), _scale_value(s)).values
    p = softmax(logits_from_chi(x), axis=1)
    return p[0] if single else p


def cosine_logits(u: np.ndarray, c: np.ndarray, s: float) -> np.ndarray:
    """``s^2 cos(theta)``: equals ``-chi / 2`` up to the constant shift ``s^2``."""
    return s * s * (np.atleast_2d(u) @ np.atleast_2d(c).T)
