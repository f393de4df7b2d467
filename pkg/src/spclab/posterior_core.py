"""Closed-form and Monte Carlo posterior quantities for the white-noise model.

With prior ``N(0, C0)``, whitened data ``z = B C0^{-1/2} x + delta xi`` and
``B = Sigma^{-1/2} K C0^{1/2}``, the posterior for regularization weight
``alpha`` has mean ``C0^{1/2} (alpha + H)^{-1} B^T z`` and covariance
``delta^2 C0^{1/2} (alpha + H)^{-1} C0^{1/2}``.

Trace quantities are evaluated in the eigenbasis of ``H`` where the three
terms of the squared posterior contraction separate mode by mode.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from . import index_calc as ic
from .errors import (
    ConditioningError,
    InvalidInputError,
    InvalidParameterError,
    NumericError,
)
from .opspace import CONDITION_CAP, SymOperator

SUMMARY_COLUMNS = ("alpha", "delta", "bias_sq", "variance", "spread", "spc",
                   "mc_spc", "mc_se", "n_samples")


@dataclass(frozen=True, eq=False)
class SmoothnessSpec:
    """Source element ``x* = phi(C0) v``.

    ``v = None`` stands for the worst case over the unit ball; quantities
    that depend on ``v`` (the bias) are then reported as operator norms.
    """

    phi: ic.IndexFunction
    v: Optional[np.ndarray]
    x_star: Optional[np.ndarray]
    case_tag: str
    classification: object = None

    @property
    def extremal(self):
        return self.v is None


def _positive_alpha(alpha):
    if not alpha > 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")


def _nonneg_delta(delta):
    if not delta >= 0:
        raise InvalidParameterError(f"delta must be non-negative, got {delta}")


def _c0_apply(inst, f, v):
    """``f(C0) v`` via the spectral decomposition of ``C0``."""
    C0 = inst.C0
    if C0.is_diagonal:
        return np.asarray(f(C0.diagonal), dtype=float) * v
    V = C0.eigenvectors
    return V @ (np.asarray(f(C0.eigenvalues), dtype=float) * (V.T @ v))


def _ratio_values(inst, phi):
    """Spectral values of ``(phi/phi0)(C0)`` with a conditioning check."""
    lam = inst.C0.diagonal if inst.C0.is_diagonal else inst.C0.eigenvalues
    r = np.asarray(phi(lam), dtype=float) / np.sqrt(lam)
    if not np.all(np.isfinite(r)) or r.min() <= 0:
        raise ConditioningError("phi(C0) C0^{-1/2} is not finite on the prior spectrum")
    if r.max() / r.min() > CONDITION_CAP:
        raise ConditioningError(
            f"phi(C0) C0^{{-1/2}} exceeds the condition cap ({r.max() / r.min():.3e})")
    return r


def make_smoothness(inst, phi, v="first", rng_seed=None, case_tag=None, u=2.0):
    """Source element for ``inst``.

    ``v`` is a vector, ``"first"`` (the leading prior eigenvector),
    ``"random"`` (uniform on the unit sphere, seeded) or ``None`` (extremal).
    """
    n = inst.dim
    if isinstance(v, str):
        if v == "first":
            vec = np.zeros(n)
            vec[0] = 1.0
            if not inst.C0.is_diagonal:
                vec = inst.C0.eigenvectors[:, 0].copy()
        elif v == "random":
            vec = np.random.default_rng(rng_seed).standard_normal(n)
            vec /= np.linalg.norm(vec)
        else:
            raise InvalidParameterError(f"unknown source element choice {v!r}")
    elif v is None:
        vec = None
    else:
        vec = np.array(v, dtype=float)
        if vec.shape != (n,):
            raise InvalidInputError(f"source element must have shape ({n},)")
        if np.linalg.norm(vec) > 1 + 1e-12:
            raise InvalidInputError("source element must lie in the unit ball")
    classification = None
    if case_tag is None:
        from .bounds import classify_case

        classification = classify_case(phi, inst.theta, u=u)
        case_tag = classification.case_tag
    x_star = None if vec is None else _c0_apply(inst, phi, vec)
    if vec is not None:
        vec.setflags(write=False)
        x_star.setflags(write=False)
    return SmoothnessSpec(phi, vec, x_star, case_tag, classification)


# ---------------------------------------------------------------------------
# data and posterior moments


def _rng_noise(rng_seed, shape):
    return np.random.default_rng(rng_seed).standard_normal(shape)


def _B_apply(inst, x):
    return inst.B * x if inst.B.ndim == 1 else x @ inst.B.T


def noiseless_data(inst, x_star):
    """``B C0^{-1/2} x*`` with a conditioning check on ``C0^{-1/2}``."""
    lam = inst.C0.eigenvalues
    if lam[-1] <= 0 or np.sqrt(lam[0] / lam[-1]) > CONDITION_CAP:
        raise ConditioningError("C0^{-1/2} exceeds the condition cap")
    w = _c0_apply(inst, lambda t: t ** -0.5, np.asarray(x_star, dtype=float))
    return _B_apply(inst, w)


def sample_data(inst, x_star, delta, rng_seed):
    """One draw ``z = B C0^{-1/2} x* + delta xi`` of whitened data."""
    _nonneg_delta(delta)
    x_star = np.asarray(x_star, dtype=float)
    if x_star.shape != (inst.dim,):
        raise InvalidInputError(f"x* must have shape ({inst.dim},)")
    z = noiseless_data(inst, x_star)
    if delta > 0:
        z = z + delta * _rng_noise(rng_seed, inst.dim)
    return z


def _cho(inst, alpha):
    A = inst.H.matrix + alpha * np.eye(inst.dim)
    try:
        return scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"Cholesky factorization of alpha*I + H failed at alpha={alpha:g}") from exc


def _c0_half_apply(inst, y):
    half = inst.c0_half
    return half * y if half.ndim == 1 else y @ half.T


def posterior_mean(inst, z, alpha):
    """``C0^{1/2} (alpha I + H)^{-1} B^T z``; ``z`` may be a batch of rows."""
    _positive_alpha(alpha)
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != inst.dim:
        raise InvalidInputError(f"data must have trailing dimension {inst.dim}")
    if inst.diagonal:
        h = inst.H.diagonal
        y = inst.B * z / (alpha + h)
    else:
        rhs = np.atleast_2d(z) @ inst.B  # rows of (B^T z)^T
        y = scipy.linalg.cho_solve(_cho(inst, alpha), rhs.T, check_finite=False).T
        y = y.reshape(z.shape)
    return _c0_half_apply(inst, y)


def posterior_cov(inst, alpha, delta):
    """``delta^2 C0^{1/2} (alpha I + H)^{-1} C0^{1/2}``."""
    _positive_alpha(alpha)
    _nonneg_delta(delta)
    if inst.diagonal:
        return SymOperator.from_diagonal(delta ** 2 * inst.C0.diagonal / (alpha + inst.H.diagonal),
                                         psd=True)
    half = inst.c0_half if inst.c0_half.ndim == 2 else np.diag(inst.c0_half)
    y = scipy.linalg.cho_solve(_cho(inst, alpha), half, check_finite=False)
    cov = delta ** 2 * (half @ y)
    return SymOperator.from_matrix(0.5 * (cov + cov.T), psd=True)


# ---------------------------------------------------------------------------
# closed forms


def bias(inst, spec, alpha):
    """``||C0^{1/2} s_alpha(H) C0^{-1/2} x*||`` with ``s_alpha(t) = alpha/(alpha+t)``.

    For an extremal spec this is the operator norm over the unit ball of
    source elements.
    """
    _positive_alpha(alpha)
    r = _ratio_values(inst, spec.phi)
    if inst.diagonal:
        filt = alpha / (alpha + inst.H.diagonal)
        terms = inst.c0_half * filt * r
        if spec.extremal:
            return float(np.max(np.abs(terms)))
        return float(np.linalg.norm(terms * spec.v))
    V = inst.H.eigenvectors
    filt = alpha / (alpha + inst.H.eigenvalues)
    if inst.C0.is_diagonal:
        rmat = None
    else:
        W = inst.C0.eigenvectors
        rmat = (W * r) @ W.T
    if spec.extremal:
        right = V.T * r if rmat is None else V.T @ rmat
        op = _c0_half_apply(inst, (V @ (filt[:, None] * right)).T).T
        return float(np.linalg.norm(op, 2))
    w = r * spec.v if rmat is None else rmat @ spec.v
    y = V @ (filt * (V.T @ w))
    return float(np.linalg.norm(_c0_half_apply(inst, y)))


def variance(inst, alpha, delta):
    """``delta^2 tr((alpha+H)^{-1} H (alpha+H)^{-1} C0)``."""
    _positive_alpha(alpha)
    _nonneg_delta(delta)
    h = inst.H.eigenvalues
    return float(delta ** 2 * np.sum(h * inst.c0_modal / (alpha + h) ** 2))


def spread(inst, alpha, delta):
    """``delta^2 tr((alpha+H)^{-1} C0)``, the trace of the posterior covariance."""
    _positive_alpha(alpha)
    _nonneg_delta(delta)
    h = inst.H.eigenvalues
    return float(delta ** 2 * np.sum(inst.c0_modal / (alpha + h)))


@dataclass(frozen=True)
class PosteriorSummary:
    alpha: float
    delta: float
    bias_sq: float
    variance: float
    spread: float
    spc: float
    mc_spc: Optional[float] = None
    mc_se: Optional[float] = None
    n_samples: Optional[int] = None

    def row(self):
        return asdict(self)


def spc_closed(inst, spec, alpha, delta):
    """Squared posterior contraction and its three terms."""
    b2 = bias(inst, spec, alpha) ** 2
    var = variance(inst, alpha, delta)
    spr = spread(inst, alpha, delta)
    return PosteriorSummary(float(alpha), float(delta), b2, var, spr, b2 + var + spr)


def spc_monte_carlo(inst, spec, alpha, delta, n_samples, rng_seed, block_size=2000, workers=1):
    """Monte Carlo estimate of the squared posterior contraction.

    The outer expectation over data is sampled; the inner posterior
    expectation is exact (squared distance of the mean plus the spread).
    ``rng_seed`` is an integer or a sequence of integers; block ``k`` draws
    from ``default_rng([*rng_seed, k])``, so the result does not depend on
    ``workers``.
    """
    if n_samples < 100:
        raise InvalidParameterError("n_samples must be at least 100")
    if spec.extremal:
        raise InvalidInputError("Monte Carlo needs an explicit source element")
    _positive_alpha(alpha)
    _nonneg_delta(delta)
    key = [int(s) for s in np.atleast_1d(rng_seed)]
    z0 = _B_apply(inst, _c0_apply(inst, lambda t: np.asarray(spec.phi(t)) / np.sqrt(t), spec.v))
    spr = spread(inst, alpha, delta)
    sizes = [min(block_size, n_samples - s) for s in range(0, n_samples, block_size)]

    def run(k):
        xi = _rng_noise(key + [k], (sizes[k], inst.dim))
        means = posterior_mean(inst, z0 + delta * xi, alpha)
        return np.sum((means - spec.x_star) ** 2, axis=1) + spr

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(k) for k in range(len(sizes))]
    vals = np.concatenate(parts)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if delta > 0 else 0.0
    return est, se


def with_monte_carlo(summary, estimate, se, n_samples):
    return PosteriorSummary(summary.alpha, summary.delta, summary.bias_sq, summary.variance,
                            summary.spread, summary.spc, estimate, se, int(n_samples))


def write_summaries_csv(summaries, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for s in summaries:
            writer.writerow({k: ("" if v is None else repr(v)) for k, v in s.row().items()})
