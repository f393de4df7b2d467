"""Bias, spread and SPC bounds, case classification, balancing and saturation.

All bounds are spectral functions of ``H`` together with ``f0^2`` evaluated
on its eigenvalues, scaled by the certified link constants.
"""

import csv
import functools
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.optimize
import scipy.stats

from . import index_calc as ic
from .errors import (
    BalanceError,
    HypothesisViolationError,
    InvalidInputError,
    InvalidParameterError,
    OutOfRangeError,
    PreconditionError,
    UnsupportedCaseError,
)

CASES = ("low", "regular", "high", "beyond_saturation", "unclassified")
REPORT_COLUMNS = ("alpha", "delta", "actual", "bound", "ratio")


# ---------------------------------------------------------------------------
# classification


def _relation(f, g, grid_size=256):
    """One of ``<``, ``>``, ``=``, ``?`` for ``f`` against ``g``."""
    try:
        verdict = ic.check_precedes(f, g, grid_size).relation
        flip = False
    except InvalidInputError:
        verdict = ic.check_precedes(g, f, grid_size).relation
        flip = True
    sym = {"g_precedes_h": "<", "h_precedes_g": ">", "equivalent": "=", "incomparable": "?"}[verdict]
    if flip and sym in "<>":
        sym = ">" if sym == "<" else "<"
    return sym


@dataclass(frozen=True, eq=False)
class CaseClassification:
    case_tag: str
    concavity_requirement: Optional[ic.IndexFunction]
    concavity_checked: str  # trusted | passed | refuted | untested
    lifting_power_u: Optional[float] = None
    relations: dict = field(default_factory=dict)

    @property
    def supported(self):
        return self.case_tag in ("low", "regular", "high")


def classify_case(phi, theta, u=2.0, grid_size=256):
    """Position of ``phi`` relative to ``phi0 = sqrt``, ``Theta`` and ``Theta^2``.

    Boundaries are inclusive and checked in the order low, regular, high.
    ``u`` is the lifting power offered for the high-order case.
    """
    a = min(phi.a_max, theta.a_max)
    phi0 = ic.varphi0(a)
    theta2 = theta.pow(2.0)
    rel = {
        "phi~phi0": _relation(phi, phi0, grid_size),
        "phi~theta": _relation(phi, theta, grid_size),
        "phi~theta2": _relation(phi, theta2, grid_size),
    }
    low_or_eq = rel["phi~phi0"] in "<="
    if low_or_eq:
        return CaseClassification("low", *_trust(phi.pow(2.0)), relations=rel)
    g2 = ic.compose(ic.ratio(phi, phi0).pow(2.0), ic.inverse(theta2))
    if rel["phi~phi0"] == ">" and rel["phi~theta"] in "<=":
        return CaseClassification("regular", *_trust(g2), relations=rel)
    if rel["phi~theta"] == ">" and u is not None and u > 1:
        rel["ratio~theta_u"] = _relation(ic.ratio(phi, phi0), theta.pow(u), grid_size)
        if rel["ratio~theta_u"] in "<=":
            req = ic.compose(g2, ic.make_power(1.0, 1.0 / u, g2.a_max ** u))
            return CaseClassification("high", *_trust(req), lifting_power_u=float(u), relations=rel)
    if rel["phi~theta2"] == ">":
        return CaseClassification("beyond_saturation", None, "untested", relations=rel)
    return CaseClassification("unclassified", None, "untested", relations=rel)


def _trust(req):
    return req, ("trusted" if req.trusted_concave else "untested")


def verify_concavity(classification, dim=4, trials=2000, rng_seed=0):
    """Run the refutation test on an untrusted concavity requirement."""
    if classification.concavity_checked in ("trusted", "passed", "refuted"):
        return classification
    if classification.concavity_requirement is None:
        return classification
    res = ic.refute_operator_concavity(classification.concavity_requirement, dim, trials, rng_seed)
    return replace(classification, concavity_checked="passed" if res.passed else "refuted")


def _gate(spec):
    cls = spec.classification
    tag = spec.case_tag
    if tag in ("beyond_saturation", "unclassified"):
        raise UnsupportedCaseError(f"no bias bound is available in the {tag} case")
    if tag not in CASES:
        raise InvalidInputError(f"unknown case tag {tag!r}")
    if cls is not None:
        if cls.concavity_checked == "refuted":
            raise HypothesisViolationError("the concavity requirement of this case was refuted")
        if cls.concavity_checked == "untested":
            raise HypothesisViolationError(
                "the concavity requirement is neither trusted nor tested; call verify_concavity")
    return tag


def _ratio(inst, tag, constant="stated"):
    """Constant in front of the bias bound.

    ``stated``: ``M/m``, from the lifting certificate in the high-order case.
    ``interpolation``: the constant obtained by chaining the range inequality
    ``||C0^{1/2} u|| <= (1/m) ||f0(H) u||`` with the interpolation estimate
    for each case, ``M/m`` (low), ``1/m^2`` (regular) and
    ``1/(m * m_lift^u)`` (high).
    """
    m, M = inst.link_m, inst.link_M
    if constant not in ("stated", "interpolation"):
        raise InvalidParameterError(f"unknown bias constant policy {constant!r}")
    if tag == "high":
        if inst.lifting is not None:
            ml, Ml, u = inst.lifting.m, inst.lifting.M, inst.lifting.u
        elif inst.diagonal:
            # commuting: the lifted quotients are the base ones at every power
            ml, Ml, u = m, M, 2.0
        else:
            raise PreconditionError("the high-order case needs a lifting certificate")
        if constant == "stated":
            return Ml / ml
        return max(1.0, ml ** -u) / m
    if constant == "stated" or tag == "low":
        return M / m
    return max(1.0, 1.0 / m) / m


# ---------------------------------------------------------------------------
# bias


def bias_bound_norm(inst, phi, alpha):
    """``max_i s_alpha(h_i) phi(f0^2(h_i))`` over the eigenvalues of ``H``.

    ``alpha`` may be an array; no case gating is applied.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise InvalidParameterError("alpha must be positive")
    h = inst.H.eigenvalues
    ph = np.asarray(phi(inst.f0sq_eigs), dtype=float)
    a = alpha[..., None]
    vals = np.max(a / (a + h) * ph, axis=-1)
    return float(vals) if vals.ndim == 0 else vals


def bias_bound(inst, spec, alpha, constant="stated"):
    """``(M/m) ||s_alpha(H) phi(f0^2(H))||``; lifted constants in the high-order case."""
    tag = _gate(spec)
    return _ratio(inst, tag, constant) * bias_bound_norm(inst, spec.phi, alpha)


def _f0sq_at(inst, alpha):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise InvalidParameterError("alpha must be positive")
    if np.any(alpha > inst.f0sq.a_max * (1 + 1e-12)):
        raise OutOfRangeError(f"alpha exceeds the domain [0, {inst.f0sq.a_max:.6g}] of f0^2")
    return inst.f0sq(alpha)


@functools.lru_cache(maxsize=256)
def _beyond_theta2(phi, theta):
    return _relation(phi, theta.pow(2.0)) == ">"


def _below_saturation(inst, spec, what):
    if _beyond_theta2(spec.phi, inst.theta):
        raise UnsupportedCaseError(f"{what} needs phi below Theta^2 (smoothness beyond saturation)")


def bias_bound_qualification(inst, spec, alpha, constant="stated"):
    """``(M/m) phi(f0^2(alpha))``, explicit in ``alpha``; needs ``phi`` below ``Theta^2``."""
    tag = _gate(spec)
    _below_saturation(inst, spec, "the qualification bound")
    return _ratio(inst, tag, constant) * spec.phi(_f0sq_at(inst, alpha))


# ---------------------------------------------------------------------------
# spread and SPC


@functools.lru_cache(maxsize=64)
def _probe_concave(f):
    return ic.refute_operator_concavity(f, 4, 2000, 0).passed


def _f0sq_concave(inst):
    # commuting C0 and H only need f0^2 to be monotone as a scalar function
    if inst.diagonal or inst.f0sq.trusted_concave:
        return True
    return _probe_concave(inst.f0sq)


def _trace_term(inst, alpha):
    alpha = np.asarray(alpha, dtype=float)
    h = inst.H.eigenvalues
    vals = np.sum(inst.f0sq_eigs / (alpha[..., None] + h), axis=-1)
    return float(vals) if vals.ndim == 0 else vals


def spread_bound(inst, alpha, delta):
    """``(delta^2/m^2) tr((alpha I + H)^{-1} f0^2(H))``."""
    if np.any(np.asarray(alpha) <= 0):
        raise InvalidParameterError("alpha must be positive")
    if not _f0sq_concave(inst):
        raise HypothesisViolationError("f0^2 failed the operator concavity refutation test")
    return delta ** 2 / inst.link_m ** 2 * _trace_term(inst, alpha)


def spc_bound(inst, spec, alpha, delta, constant="stated"):
    """``(M/m)^2 [phi^2(f0^2(alpha)) + 2 delta^2 tr((alpha I + H)^{-1} f0^2(H))]``."""
    tag = _gate(spec)
    _below_saturation(inst, spec, "the SPC bound")
    if not _f0sq_concave(inst):
        raise HypothesisViolationError("f0^2 failed the operator concavity refutation test")
    r = max(_ratio(inst, tag, constant), 1.0 / inst.link_m)
    return r ** 2 * (spec.phi(_f0sq_at(inst, alpha)) ** 2
                     + 2.0 * delta ** 2 * _trace_term(inst, alpha))


# ---------------------------------------------------------------------------
# balancing


def balance_alpha(inst, spec, delta, lower=None, upper=None, xtol=1e-12):
    """Solve ``phi^2(f0^2(alpha)) = 2 delta^2 tr((alpha I + H)^{-1} f0^2(H))``.

    The left side increases and the right side decreases in ``alpha``;
    the root is bracketed on a log scale.
    """
    if not delta > 0:
        raise InvalidParameterError("balancing needs delta > 0")
    if spec.case_tag in ("beyond_saturation", "unclassified"):
        raise UnsupportedCaseError(f"balancing is not available in the {spec.case_tag} case")
    _below_saturation(inst, spec, "balancing")
    lo = min(1e-14, 1e-6 * delta ** 2) if lower is None else float(lower)
    hi = min(10.0 * inst.H.norm(), inst.f0sq.a_max * (1 - 1e-9)) if upper is None else float(upper)

    def gap(log_alpha):
        al = np.exp(log_alpha)
        left = spec.phi(inst.f0sq(al)) ** 2
        right = 2.0 * delta ** 2 * _trace_term(inst, al)
        return np.log(left) - np.log(right)

    g_lo, g_hi = gap(np.log(lo)), gap(np.log(hi))
    if not (np.isfinite(g_lo) and np.isfinite(g_hi)) or g_lo > 0 or g_hi < 0:
        raise BalanceError(
            f"no sign change on [{lo:.3e}, {hi:.3e}]: log-gap {g_lo:.3e} at the lower "
            f"and {g_hi:.3e} at the upper end")
    root = scipy.optimize.brentq(gap, np.log(lo), np.log(hi), xtol=xtol, rtol=4 * np.finfo(float).eps)
    return float(np.exp(root))


# ---------------------------------------------------------------------------
# saturation


@dataclass(frozen=True)
class SaturationReport:
    saturated: bool
    slope: float
    linear_decay_constant: Optional[float]
    beyond_theta2: bool


def default_probe_grid(inst, points=81):
    """Geometric grid from well above the smallest eigenvalue of ``H`` up to ``1``."""
    h = inst.H.eigenvalues
    h_min = float(h[h > 0].min())
    lo = max(100.0 * h_min, 1e-12)
    return np.geomspace(lo, max(1.0, 1e4 * lo), points)


def saturation_probe(inst, spec, alpha_grid=None, tol=0.05):
    """Slope of ``log`` bias bound against ``log alpha`` over the smallest decade."""
    grid = default_probe_grid(inst) if alpha_grid is None else np.sort(np.asarray(alpha_grid, float))
    window = grid[grid <= 10.0 * grid[0] * (1 + 1e-12)]
    if window.size < 8:
        raise InvalidParameterError("the smallest decade of the grid needs at least 8 points")
    vals = bias_bound_norm(inst, spec.phi, window)
    fit = scipy.stats.linregress(np.log(window), np.log(vals))
    beyond = _relation(spec.phi, inst.theta.pow(2.0)) in ">="
    saturated = beyond and abs(fit.slope - 1.0) <= tol
    const = float(vals[0] / window[0]) if saturated else None
    return SaturationReport(bool(saturated), float(fit.slope), const, bool(beyond))


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True, eq=False)
class BoundReport:
    quantity: str
    alpha_grid: np.ndarray
    actual: np.ndarray
    bound: np.ndarray
    dominated: bool
    worst_ratio: float
    delta_grid: Optional[np.ndarray] = None

    @classmethod
    def build(cls, quantity, alphas, actual, bound, deltas=None, slack=1e-9):
        alphas = np.asarray(alphas, dtype=float).ravel()
        actual = np.asarray(actual, dtype=float).ravel()
        bound = np.asarray(bound, dtype=float).ravel()
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(bound > 0, actual / bound, np.where(actual > 0, np.inf, 0.0))
        worst = float(np.max(ratios))
        d = None if deltas is None else np.asarray(deltas, dtype=float).ravel()
        return cls(quantity, alphas, actual, bound, bool(worst <= 1 + slack), worst, d)

    def rows(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = self.actual / self.bound
        for i in range(self.alpha_grid.size):
            yield {
                "alpha": self.alpha_grid[i],
                "delta": "" if self.delta_grid is None else self.delta_grid[i],
                "actual": self.actual[i],
                "bound": self.bound[i],
                "ratio": ratio[i],
            }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: (v if v == "" else repr(float(v))) for k, v in row.items()})
