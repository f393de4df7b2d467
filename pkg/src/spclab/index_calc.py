"""Index functions and their calculus.

An index function is a continuous, non-decreasing ``f`` on ``[0, a_max]``
with ``f(0) = 0``. Three closed-form families are carried symbolically so
that powers, inverses and compositions stay exact:

* ``power``      ``c * t**q``
* ``exp_power``  ``exp(-c * t**(-gamma))``        (exponentially flat at 0)
* ``log_power``  ``c * log(1/t)**(-r)``, ``t < 1`` (inverse of ``exp_power``)

Anything else is a ``custom`` handle, inverted by bisection.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    InvalidInputError,
    InvalidParameterError,
    OutOfRangeError,
    PreconditionError,
)

BISECTION_ITERATIONS = 200
CLOSED_FAMILIES = ("power", "exp_power", "log_power")


@dataclass(frozen=True, eq=False)
class IndexFunction:
    """Function handle on ``[0, a_max]`` with a family tag and parameters.

    ``trusted_concave`` marks functions known to be operator concave on
    their domain (powers with exponent in [0, 1]; log-powers with exponent
    ``r`` in (0, 1] on ``[0, exp(-(r+2))]``). Anything else has to be
    probed with :func:`refute_operator_concavity`.
    """

    func: Callable[[np.ndarray], np.ndarray]
    a_max: float
    family: str
    params: dict = field(default_factory=dict)
    strictly_increasing: bool = True
    trusted_concave: bool = False

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", over="ignore", under="ignore", invalid="ignore"):
            out = np.asarray(self.func(t), dtype=float)
        return float(out) if out.ndim == 0 else out

    def with_domain(self, a_max):
        return IndexFunction(self.func, float(a_max), self.family, dict(self.params),
                             self.strictly_increasing, self.trusted_concave)

    def pow(self, k):
        """``t -> f(t)**k``, closed form where the family allows it."""
        k = float(k)
        p = self.params
        if self.family == "power":
            return _power(p["c"] ** k, p["q"] * k, self.a_max)
        if self.family == "exp_power":
            return _exp_power(p["c"] * k, p["gamma"], self.a_max)
        if self.family == "log_power":
            return _log_power(p["c"] ** k, p["r"] * k, self.a_max)
        f = self.func
        return IndexFunction(lambda t: f(t) ** k, self.a_max, "composition",
                             {"outer": "power", "k": k},
                             strictly_increasing=self.strictly_increasing and k > 0)

    def __repr__(self):
        args = ", ".join(f"{k}={v:g}" for k, v in self.params.items()
                         if isinstance(v, (int, float)))
        return f"IndexFunction({self.family}({args}), a_max={self.a_max:g})"


# ---------------------------------------------------------------------------
# closed-form families (internal constructors skip validation so that
# intermediate ratios such as phi/phi0 may carry non-positive exponents)


def _power(c, q, a_max):
    c, q = float(c), float(q)
    return IndexFunction(lambda t: c * t ** q, float(a_max), "power", {"c": c, "q": q},
                         strictly_increasing=q > 0,
                         trusted_concave=c > 0 and 0 <= q <= 1 + 1e-12)


def _exp_power(c, gamma, a_max):
    c, gamma = float(c), float(gamma)
    return IndexFunction(lambda t: np.exp(-c * t ** (-gamma)), float(a_max), "exp_power",
                         {"c": c, "gamma": gamma})


def _log_power(c, r, a_max):
    c, r = float(c), float(r)

    def f(s):
        return np.where(s < 1.0, c * (-np.log(s)) ** (-r), np.nan)

    # scalar concavity needs log(1/t) >= r + 1; one unit of margin beyond that
    # is where randomized probes stop finding operator-concavity violations
    trusted = 0 < r <= 1 + 1e-12 and a_max <= np.exp(-(r + 2.0))
    return IndexFunction(f, float(a_max), "log_power", {"c": c, "r": r},
                         trusted_concave=bool(trusted))


def make_power(c, q, a_max=1.0):
    """``t -> c * t**q`` on ``[0, a_max]``."""
    if not (c > 0 and q > 0 and a_max > 0):
        raise InvalidParameterError(f"power family needs c, q, a_max > 0 (got {c}, {q}, {a_max})")
    return _power(c, q, a_max)


def make_exp_power(c, gamma, a_max=1.0):
    """``t -> exp(-c * t**(-gamma))``; decays faster than any power at 0."""
    if not (c > 0 and gamma > 0 and a_max > 0):
        raise InvalidParameterError(f"exp_power needs c, gamma, a_max > 0 (got {c}, {gamma}, {a_max})")
    return _exp_power(c, gamma, a_max)


def make_log_power(c, r, a_max):
    """``t -> c * log(1/t)**(-r)`` on ``[0, a_max]`` with ``a_max < 1``."""
    if not (c > 0 and r > 0 and 0 < a_max < 1):
        raise InvalidParameterError(f"log_power needs c, r > 0 and 0 < a_max < 1 (got {c}, {r}, {a_max})")
    return _log_power(c, r, a_max)


def make_custom(func, a_max, strictly_increasing=True, trusted_concave=False):
    if not a_max > 0:
        raise InvalidParameterError("a_max must be positive")
    return IndexFunction(func, float(a_max), "custom", {}, strictly_increasing, trusted_concave)


def make_sampled(ts, values):
    """Piecewise-linear index function through the points ``(ts[i], values[i])``."""
    ts = np.asarray(ts, dtype=float)
    values = np.asarray(values, dtype=float)
    if ts.ndim != 1 or ts.shape != values.shape or ts.size < 2:
        raise InvalidInputError("sampled index function needs two equal-length 1-D arrays")
    if ts[0] != 0.0 or values[0] != 0.0:
        raise InvalidInputError("sampled index function must start at (0, 0)")
    if np.any(np.diff(ts) <= 0):
        raise InvalidInputError("sample abscissae must be strictly increasing")
    dv = np.diff(values)
    if np.any(dv < 0):
        raise InvalidInputError("sampled values must be non-decreasing")
    return IndexFunction(lambda t: np.interp(t, ts, values), float(ts[-1]), "sampled",
                         {"n": int(ts.size)}, strictly_increasing=bool(np.all(dv > 0)))


def sobolev_phi(beta, a, a_max=1.0):
    """Smoothness function ``t**(beta/(1+2a))`` for Sobolev order ``beta`` and prior decay ``a``."""
    return make_power(1.0, beta / (1.0 + 2.0 * a), a_max)


def identity_power(q, a_max=1.0):
    return make_power(1.0, q, a_max)


def varphi0(a_max=1.0):
    """The benchmark ``t -> sqrt(t)``."""
    return _power(1.0, 0.5, a_max)


# ---------------------------------------------------------------------------
# calculus


def compose(outer, inner):
    """``t -> outer(inner(t))``."""
    a_max = inner.a_max
    po, pi = outer.params, inner.params
    if outer.family == "power" and inner.family == "power":
        return _power(po["c"] * pi["c"] ** po["q"], po["q"] * pi["q"], a_max)
    if outer.family == "power" and inner.family == "log_power":
        return _log_power(po["c"] * pi["c"] ** po["q"], pi["r"] * po["q"], a_max)
    if outer.family == "power" and inner.family == "exp_power" and po["c"] == 1.0:
        return _exp_power(pi["c"] * po["q"], pi["gamma"], a_max)
    fo, fi = outer.func, inner.func
    return IndexFunction(lambda t: fo(fi(t)), a_max, "composition", {},
                         outer.strictly_increasing and inner.strictly_increasing)


def product(f, g):
    """``t -> f(t) * g(t)``."""
    a_max = min(f.a_max, g.a_max)
    if f.family == "power" and g.family == "power":
        return _power(f.params["c"] * g.params["c"], f.params["q"] + g.params["q"], a_max)
    ff, gf = f.func, g.func
    return IndexFunction(lambda t: ff(t) * gf(t), a_max, "product", {},
                         f.strictly_increasing and g.strictly_increasing)


def ratio(h, g):
    """``t -> h(t) / g(t)``; not necessarily an index function."""
    a_max = min(h.a_max, g.a_max)
    if h.family == "power" and g.family == "power":
        return _power(h.params["c"] / g.params["c"], h.params["q"] - g.params["q"], a_max)
    hf, gf = h.func, g.func
    return IndexFunction(lambda t: hf(t) / gf(t), a_max, "ratio", {}, strictly_increasing=False)


def inverse(f):
    """The inverse index function on ``[0, f(a_max)]``."""
    top = float(f(f.a_max))
    p = f.params
    if f.family == "power":
        if p["q"] <= 0:
            raise PreconditionError("power with non-positive exponent is not invertible")
        return _power(p["c"] ** (-1.0 / p["q"]), 1.0 / p["q"], top)
    if f.family == "exp_power":
        # s = exp(-c t^-g)  <=>  t = (log(1/s)/c)^(-1/g)
        return _log_power(p["c"] ** (1.0 / p["gamma"]), 1.0 / p["gamma"], top)
    if f.family == "log_power":
        # s = c L^-r  <=>  L = (s/c)^(-1/r)
        return _exp_power(p["c"] ** (1.0 / p["r"]), 1.0 / p["r"], top)
    if not f.strictly_increasing:
        raise PreconditionError(f"{f.family} index function is not flagged strictly increasing")
    return IndexFunction(lambda s: _bisect(f, s), top, "inverse", {})


def _bisect(f, s):
    s = np.asarray(s, dtype=float)
    lo = np.zeros_like(s)
    hi = np.full_like(s, f.a_max)
    flo = np.asarray(f.func(lo), dtype=float) * np.ones_like(s)
    fhi = np.asarray(f.func(hi), dtype=float) * np.ones_like(s)
    if np.any(fhi <= flo):
        raise PreconditionError("function is not strictly increasing on its domain")
    for _ in range(BISECTION_ITERATIONS):
        mid = 0.5 * (lo + hi)
        fm = np.asarray(f.func(mid), dtype=float)
        slack = 1e-12 * np.maximum(np.abs(flo), np.abs(fhi))
        if np.any((fm < flo - slack) | (fm > fhi + slack)):
            raise PreconditionError("function is not monotone on the bisection bracket")
        right = fm < s
        lo = np.where(right, mid, lo)
        flo = np.where(right, fm, flo)
        hi = np.where(right, hi, mid)
        fhi = np.where(right, fhi, fm)
        if np.all(hi - lo <= 4 * np.spacing(np.maximum(hi, 1e-300))):
            break
    return np.where(np.abs(flo - s) <= np.abs(fhi - s), lo, hi)


def invert_monotone(f, s):
    """Solve ``f(t) = s`` for ``t`` in ``[0, a_max]``.

    Closed form for the symbolic families, bracketed bisection otherwise.
    """
    s_arr = np.asarray(s, dtype=float)
    top = float(f(f.a_max))
    if np.any(s_arr < 0) or np.any(s_arr > top * (1 + 1e-12)):
        raise OutOfRangeError(f"value outside the range [0, {top:.6g}] of the index function")
    out = inverse(f)(np.minimum(s_arr, top))
    return out


def theta_from_psi(psi):
    """``t -> sqrt(t) * psi(t)``."""
    return product(varphi0(psi.a_max), psi)


def f0_squared(theta):
    """The inverse of ``theta**2``."""
    return inverse(theta.pow(2.0))


def f0_from_theta(theta):
    """``s -> ((theta**2)^{-1}(s))**(1/2)``."""
    return f0_squared(theta).pow(0.5)


# ---------------------------------------------------------------------------
# ordering


@dataclass(frozen=True)
class OrderingVerdict:
    relation: str  # g_precedes_h | h_precedes_g | equivalent | incomparable
    witness_grid: list

    @property
    def g_precedes_or_equivalent(self):
        return self.relation in ("g_precedes_h", "equivalent")

    @property
    def h_precedes_or_equivalent(self):
        return self.relation in ("h_precedes_g", "equivalent")


def check_precedes(g, h, grid_size=256, lower=1e-12, slack=1e-10):
    """Decide numerically whether ``g < h`` (``h/g`` is an index function).

    The ratio ``h/g`` is sampled on a geometric grid over
    ``[a*lower, a]``. This is a semi-decision: the ordering is a
    statement about ``t -> 0`` and the grid only sees a window.
    """
    if grid_size < 16:
        raise InvalidParameterError("grid_size must be at least 16")
    a = min(g.a_max, h.a_max)
    t = np.geomspace(a * lower, a, grid_size)
    gv = np.asarray(g(t), dtype=float)
    hv = np.asarray(h(t), dtype=float)
    if np.any(~np.isfinite(gv)) or np.any(gv <= 0):
        raise InvalidInputError("g vanishes or is undefined on the comparison grid")
    r = hv / gv
    if np.any(~np.isfinite(r)):
        raise InvalidInputError("ratio h/g is not finite on the comparison grid")
    witness = list(zip(t.tolist(), r.tolist()))
    rmin, rmax = float(r.min()), float(r.max())
    if rmin > 0 and rmax <= rmin * 1.0001 ** 2:
        return OrderingVerdict("equivalent", witness)
    increasing = bool(np.all(r[:-1] <= r[1:] + slack * np.abs(r[1:])))
    decreasing = bool(np.all(r[1:] <= r[:-1] + slack * np.abs(r[:-1])))
    if increasing and r[0] < 0.1 * r[-1]:
        return OrderingVerdict("g_precedes_h", witness)
    if decreasing and r[-1] < 0.1 * r[0]:
        return OrderingVerdict("h_precedes_g", witness)
    return OrderingVerdict("incomparable", witness)


# ---------------------------------------------------------------------------
# operator concavity


@dataclass(frozen=True, eq=False)
class ConcavityRefutation:
    passed: bool
    trials: int
    seed: int
    G: Optional[np.ndarray] = None
    G_prime: Optional[np.ndarray] = None
    min_eigenvalue: Optional[float] = None


def _random_psd_batch(rng, count, dim, a):
    z = rng.standard_normal((count, dim, dim))
    q, r = np.linalg.qr(z)
    signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    signs[signs == 0] = 1.0
    q = q * signs[:, None, :]
    lam = rng.uniform(0.0, a, size=(count, dim))
    return q, lam


def _apply_batch(q, lam, f):
    return np.einsum("bij,bj,bkj->bik", q, f(lam), q)


def refute_operator_concavity(f, dim, trials, rng_seed, a=None, batch=500):
    """Search for a pair ``G, G'`` violating midpoint operator concavity.

    Samples random PSD pairs with spectra in ``[0, a]`` and checks
    ``f((G+G')/2) >= (f(G)+f(G'))/2`` in Loewner order. Passing is
    evidence, never proof.
    """
    if dim < 2 or trials < 1:
        raise InvalidParameterError("need dim >= 2 and trials >= 1")
    a = f.a_max if a is None else float(a)
    rng = np.random.default_rng(rng_seed)
    eps = np.finfo(float).eps
    done = 0
    while done < trials:
        count = min(batch, trials - done)
        q1, l1 = _random_psd_batch(rng, count, dim, a)
        q2, l2 = _random_psd_batch(rng, count, dim, a)
        g1 = _apply_batch(q1, l1, lambda x: x)
        g2 = _apply_batch(q2, l2, lambda x: x)
        mid = 0.5 * (g1 + g2)
        lm, qm = np.linalg.eigh(mid)
        lm = np.clip(lm, 0.0, a)
        fvals = [np.asarray(f(x), dtype=float) for x in (l1, l2, lm)]
        if not all(np.all(np.isfinite(v)) for v in fvals):
            raise PreconditionError("index function is not finite on the sampled spectra")
        fmid = np.einsum("bij,bj,bkj->bik", qm, fvals[2], qm)
        f1 = np.einsum("bij,bj,bkj->bik", q1, fvals[0], q1)
        f2 = np.einsum("bij,bj,bkj->bik", q2, fvals[1], q2)
        delta = fmid - 0.5 * (f1 + f2)
        delta = 0.5 * (delta + np.swapaxes(delta, -1, -2))
        ev = np.linalg.eigvalsh(delta)
        norm = np.max(np.abs(ev), axis=1)
        scale = np.max(np.abs(np.concatenate(fvals, axis=1)), axis=1)
        # roundoff floor: f(G) carries absolute error ~ eps * ||f(G)||
        bad = ev[:, 0] < -np.maximum(1e-8 * norm, 64 * eps * dim * scale)
        if np.any(bad):
            i = int(np.argmax(bad))
            return ConcavityRefutation(False, done + i + 1, rng_seed, g1[i], g2[i], float(ev[i, 0]))
        done += count
    return ConcavityRefutation(True, done, rng_seed)


# ---------------------------------------------------------------------------
# structured-text specs


def to_spec(f):
    """Serializable dict for the closed-form families."""
    if f.family not in CLOSED_FAMILIES:
        raise InvalidInputError(f"{f.family} index functions are not serializable")
    return {"family": f.family, **f.params, "a_max": f.a_max}


def from_spec(spec):
    try:
        family = spec["family"]
        a_max = float(spec.get("a_max", 1.0))
        if family == "power":
            return make_power(float(spec["c"]), float(spec["q"]), a_max)
        if family == "exp_power":
            return make_exp_power(float(spec["c"]), float(spec["gamma"]), a_max)
        if family == "log_power":
            return make_log_power(float(spec["c"]), float(spec["r"]), float(spec.get("a_max", 0.5)))
    except KeyError as exc:
        raise InvalidInputError(f"index function spec is missing field {exc}") from exc
    raise InvalidInputError(f"unknown index function family {spec.get('family')!r}")
