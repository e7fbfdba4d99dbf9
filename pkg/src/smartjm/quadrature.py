"""Fixed quadrature rules used by the likelihood and marginalization code.

Two families are provided:

* a 15-point Gauss-Kronrod rule for cumulative-hazard integrals over
  bounded intervals (exact through polynomial degree 22), and
* Gauss-Hermite rules for integrating smooth functions against Gaussian
  random-effect distributions, including the subject-adapted variant
  that recenters and rescales nodes at each subject's empirical Bayes
  mode and curvature.

Gauss-Kronrod abscissae and weights are embedded as literal constants
(31 significant digits) so results are identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, EvaluationError

__all__ = [
    "GK15_NODES",
    "GK15_WEIGHTS",
    "integrate_gk15",
    "gk15_points",
    "HermiteRule",
    "hermite_rule",
    "SubjectQuadrature",
    "pseudo_adaptive_nodes",
    "gaussian_expectation_pairs",
]

# 15-point Kronrod extension of the 7-point Gauss-Legendre rule on [-1, 1].
_GK15_POSITIVE_NODES = (
    "0.9914553711208126392068546975263",
    "0.9491079123427585245261896840479",
    "0.8648644233597690727897127886409",
    "0.7415311855993944398638647732808",
    "0.5860872354676911302941448382587",
    "0.4058451513773971669066064120770",
    "0.2077849550078984676006894037732",
    "0.0000000000000000000000000000000",
)
_GK15_POSITIVE_WEIGHTS = (
    "0.0229353220105292249637320080590",
    "0.0630920926299785532907006631892",
    "0.1047900103222501838398763225415",
    "0.1406532597155259187451895905102",
    "0.1690047266392679028265834265985",
    "0.1903505780647854099132564024210",
    "0.2044329400752988924141619992346",
    "0.2094821410847278280129991748917",
)


def _unfold(vals: tuple[str, ...], odd_center: bool, negate: bool) -> np.ndarray:
    pos = [float(v) for v in vals]
    head = pos[:-1] if odd_center else pos
    mirrored = [-v for v in head] if negate else list(head)
    return np.array(mirrored + [pos[-1]] + list(reversed(head)), dtype=float)


GK15_NODES: np.ndarray = _unfold(_GK15_POSITIVE_NODES, odd_center=True, negate=True)
GK15_WEIGHTS: np.ndarray = _unfold(_GK15_POSITIVE_WEIGHTS, odd_center=True, negate=False)


def gk15_points(a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the 15-point rule mapped onto [a, b]."""
    if not (np.isfinite(a) and np.isfinite(b)):
        raise EvaluationError("quadrature interval must be finite")
    if b < a:
        raise EvaluationError(f"quadrature interval reversed: [{a}, {b}]")
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    return mid + half * GK15_NODES, half * GK15_WEIGHTS


def integrate_gk15(f, a: float, b: float) -> float:
    """Integral of ``f`` over [a, b] by a single 15-point panel.

    ``f`` must accept an ndarray of abscissae and return values of the
    same shape; non-finite values raise an evaluation error.
    """
    t, w = gk15_points(a, b)
    y = np.asarray(f(t), dtype=float)
    if y.shape != t.shape:
        raise EvaluationError("integrand must return one value per node")
    if not np.all(np.isfinite(y)):
        raise EvaluationError("integrand returned a non-finite value")
    return float(np.dot(w, y))


@dataclass(frozen=True)
class HermiteRule:
    """Nodes and weights for integrals against exp(-x^2)."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray


_SUPPORTED_HERMITE_ORDERS = (3, 5, 7, 9)


@lru_cache(maxsize=None)
def hermite_rule(order: int) -> HermiteRule:
    """Gauss-Hermite rule of the given odd order (3, 5, 7, or 9)."""
    if order not in _SUPPORTED_HERMITE_ORDERS:
        raise ConfigError(f"unsupported Hermite order {order}; choose from {_SUPPORTED_HERMITE_ORDERS}")
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return HermiteRule(order=order, nodes=nodes, weights=weights)


def _tensor_pairs(rule: HermiteRule) -> tuple[np.ndarray, np.ndarray]:
    """All node pairs (K^2, 2) and the matching weight products (K^2,)."""
    k = rule.order
    i0, i1 = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    pairs = np.column_stack([rule.nodes[i0.ravel()], rule.nodes[i1.ravel()]])
    wprod = rule.weights[i0.ravel()] * rule.weights[i1.ravel()]
    return pairs, wprod


@dataclass(frozen=True)
class SubjectQuadrature:
    """Adapted integration plan for one subject's random effects.

    ``nodes`` has one bivariate point per row; ``log_weights`` are the
    logarithms of weights that already include the change-of-variables
    factor, so an integral of g(b) db is sum(exp(log_weights) * g(nodes)).
    """

    nodes: np.ndarray
    log_weights: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def size(self) -> int:
        return self.nodes.shape[0]


def pseudo_adaptive_nodes(
    mode: np.ndarray, curvature: np.ndarray, rule: HermiteRule
) -> SubjectQuadrature:
    """Recenter a tensor Hermite rule at a subject's posterior summary.

    ``mode`` is the empirical Bayes point estimate of the random effects
    and ``curvature`` the matching negative-Hessian (precision) matrix.
    Nodes are placed so the rule integrates exactly any bivariate
    Gaussian density with mean ``mode`` and covariance ``curvature^-1``.
    """
    mode = np.asarray(mode, dtype=float)
    curvature = np.asarray(curvature, dtype=float)
    q = mode.shape[0]
    if curvature.shape != (q, q):
        raise EvaluationError("curvature matrix shape does not match the mode")
    try:
        chol = np.linalg.cholesky(curvature)
    except np.linalg.LinAlgError as exc:
        raise EvaluationError("curvature matrix is not positive definite") from exc
    pairs, wprod = _tensor_pairs(rule)
    # b = mode + sqrt(2) * inv(chol).T @ phi gives node covariance curvature^-1.
    shift = solve_triangular(chol, pairs.T, lower=True, trans="T").T * np.sqrt(2.0)
    nodes = mode[None, :] + shift
    log_det_chol = float(np.sum(np.log(np.diag(chol))))
    log_w = (
        0.5 * q * np.log(2.0)
        - log_det_chol
        + np.log(wprod)
        + np.sum(pairs**2, axis=1)
    )
    if not np.all(np.isfinite(log_w)):
        raise EvaluationError("non-finite adapted quadrature weight")
    return SubjectQuadrature(nodes=nodes, log_weights=log_w)


def gaussian_expectation_pairs(
    cov: np.ndarray, rule: HermiteRule
) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E[g(b)] with b ~ N(0, cov), b bivariate.

    Returns (nodes (K^2, 2), weights (K^2,)); weights sum to 1 up to
    floating error and the density factor is folded in, so the
    expectation is sum(weights * g(nodes)).
    """
    cov = np.asarray(cov, dtype=float)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise EvaluationError("covariance matrix is not positive definite") from exc
    pairs, wprod = _tensor_pairs(rule)
    nodes = np.sqrt(2.0) * pairs @ chol.T
    weights = wprod / np.pi
    return nodes, weights
