"""Symmetric operators, problem instances and link certification."""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import index_calc as ic
from ._linalg import (
    block_orthogonal,
    clamp_psd,
    from_spectrum,
    random_orthogonal,
    sym_eig,
    symmetrize,
)
from .errors import (
    ConditioningError,
    InvalidInputError,
    InvalidParameterError,
    PreconditionError,
)

CONDITION_CAP = 1e14
DUMP_MAGIC = "# spclab-matrix-dump v1"


def _readonly(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# symmetric operators


@dataclass(frozen=True, eq=False)
class SymOperator:
    """Symmetric matrix whose spectrum is computed once, at construction.

    Eigenvalues are stored in descending order. Diagonal operators keep
    only their diagonal plus the sorting permutation; ``matrix`` and
    ``eigenvectors`` are materialized on request.
    """

    eigenvalues: np.ndarray
    _dense: Optional[np.ndarray] = field(default=None, repr=False)
    _vecs: Optional[np.ndarray] = field(default=None, repr=False)
    _diag: Optional[np.ndarray] = field(default=None, repr=False)
    _order: Optional[np.ndarray] = field(default=None, repr=False)
    psd: bool = False

    @classmethod
    def from_matrix(cls, a, psd=False):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidInputError(f"expected a square matrix, got shape {a.shape}")
        scale = max(float(np.max(np.abs(a))), np.finfo(float).tiny) if a.size else 1.0
        if a.size and np.max(np.abs(a - a.T)) > 1e-12 * scale:
            raise InvalidInputError("matrix is not symmetric")
        a = symmetrize(a)
        vals, vecs = sym_eig(a, psd=psd)
        return cls(_readonly(vals), _readonly(a), _readonly(vecs), psd=psd)

    @classmethod
    def from_diagonal(cls, d, psd=False):
        d = np.asarray(d, dtype=float)
        if d.ndim != 1:
            raise InvalidInputError("diagonal must be a 1-D array")
        if psd:
            d = clamp_psd(d)
        order = np.argsort(-d, kind="stable")
        return cls(_readonly(d[order]), _diag=_readonly(d), _order=order, psd=psd)

    @classmethod
    def from_spectrum(cls, vals, vecs, psd=False):
        order = np.argsort(-np.asarray(vals), kind="stable")
        vals = np.asarray(vals, dtype=float)[order]
        vecs = np.asarray(vecs, dtype=float)[:, order]
        return cls(_readonly(vals), _readonly(from_spectrum(vals, vecs)), _readonly(vecs), psd=psd)

    @property
    def dim(self):
        return int(self.eigenvalues.size)

    @property
    def is_diagonal(self):
        return self._diag is not None

    @property
    def diagonal(self):
        return self._diag if self._diag is not None else np.diag(self._dense).copy()

    @property
    def matrix(self):
        return np.diag(self._diag) if self._diag is not None else self._dense

    @property
    def eigenvectors(self):
        if self._vecs is not None:
            return self._vecs
        return np.eye(self.dim)[:, self._order]

    def norm(self):
        return float(np.max(np.abs(self.eigenvalues))) if self.dim else 0.0


def as_operator(A, psd=False):
    return A if isinstance(A, SymOperator) else SymOperator.from_matrix(A, psd=psd)


def apply_function(A, f):
    """Spectral calculus ``V f(L) V^T`` for a PSD operator ``A``."""
    A = as_operator(A, psd=True)
    if A.is_diagonal:
        vals = np.asarray(f(clamp_psd(A.diagonal)), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise PreconditionError("function is not finite on the operator spectrum")
        return SymOperator.from_diagonal(vals)
    vals = np.asarray(f(clamp_psd(A.eigenvalues)), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise PreconditionError("function is not finite on the operator spectrum")
    return SymOperator.from_spectrum(vals, A.eigenvectors)


# ---------------------------------------------------------------------------
# order relations


@dataclass(frozen=True)
class LoewnerResult:
    holds: bool
    witness: float  # lambda_min(B - A)

    def __bool__(self):
        return self.holds


def loewner_leq(A, Bop, tol=1e-9):
    """``A <= Bop`` in Loewner order, with the minimal eigenvalue of ``Bop - A``."""
    a = A.matrix if isinstance(A, SymOperator) else np.asarray(A, dtype=float)
    b = Bop.matrix if isinstance(Bop, SymOperator) else np.asarray(Bop, dtype=float)
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch {a.shape} vs {b.shape}")
    vals = np.linalg.eigvalsh(symmetrize(b - a))
    scale = max(1.0, float(np.max(np.abs(vals))))
    return LoewnerResult(bool(vals[0] >= -tol * scale), float(vals[0]))


@dataclass(frozen=True, eq=False)
class DouglasResult:
    holds: bool
    C: Optional[float] = None
    R: Optional[np.ndarray] = None
    witness: Optional[np.ndarray] = None

    def __bool__(self):
        return self.holds


def douglas_check(S, T, rank_tol=1e-10, residual_tol=1e-9):
    """Finite-dimensional range inclusion ``range(S) in range(T)``.

    On success returns the smallest ``C`` with ``S S^T <= C^2 T T^T`` and
    the factor ``R = T^+ S``; otherwise a unit vector of ``range(S)`` that
    is not in ``range(T)``.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    T = np.atleast_2d(np.asarray(T, dtype=float))
    if S.shape[0] != T.shape[0]:
        raise InvalidInputError("S and T must map into the same space")
    U, s, Vt = np.linalg.svd(T, full_matrices=False)
    r = int(np.sum(s > rank_tol * s[0])) if s.size and s[0] > 0 else 0
    Ur = U[:, :r]
    s_norm = max(float(np.linalg.norm(S, 2)), np.finfo(float).tiny)
    outside = S - Ur @ (Ur.T @ S)
    if np.linalg.norm(outside, 2) > residual_tol * s_norm:
        _, _, wt = np.linalg.svd(outside)
        w = S @ wt[0]
        return DouglasResult(False, witness=w / np.linalg.norm(w))
    # generalized extremal eigenvalue of S S^T against T T^T on range(T)
    Y = (Ur.T @ S) / s[:r, None]
    C = float(np.sqrt(max(np.linalg.eigvalsh(Y @ Y.T)[-1], 0.0))) if r else 0.0
    R = Vt[:r].T @ Y
    if np.linalg.norm(T @ R - S, 2) > residual_tol * s_norm:
        return DouglasResult(False, witness=outside[:, 0] / max(np.linalg.norm(outside[:, 0]), 1e-300))
    return DouglasResult(True, C=C, R=R)


# ---------------------------------------------------------------------------
# link certification


@dataclass(frozen=True, eq=False)
class LinkCertificate:
    m: float
    M: float
    extremal_vectors: tuple  # (argmin, argmax) unit vectors

    def as_dict(self):
        return {"m": self.m, "M": self.M}


def _inverse_psi(C0, psi):
    vals = np.asarray(psi(clamp_psd(C0.eigenvalues)), dtype=float)
    if np.any(vals <= 0) or vals.max() / vals.min() > CONDITION_CAP:
        cond = np.inf if np.any(vals <= 0) else vals.max() / vals.min()
        raise ConditioningError(f"psi(C0) is numerically singular (condition {cond:.3e})")
    return vals


def link_quotient(C0, psi, A, v):
    """``||Sigma^{-1/2} K v|| / ||psi(C0) v||`` with ``A = K^T Sigma^{-1} K``."""
    v = np.asarray(v, dtype=float)
    num = float(v @ (as_operator(A).matrix @ v))
    den = np.linalg.norm(apply_function(C0, psi).matrix @ v)
    return np.sqrt(max(num, 0.0)) / den


def certify_link(C0, psi, A):
    """Sharpest ``m, M`` with ``m^2 psi(C0)^2 <= A <= M^2 psi(C0)^2``."""
    C0 = as_operator(C0, psd=True)
    A = as_operator(A, psd=True)
    if C0.dim != A.dim:
        raise InvalidInputError("C0 and A must have equal dimensions")
    if C0.eigenvalues[-1] <= 0:
        raise PreconditionError("C0 must be positive definite")
    pvals = _inverse_psi(C0, psi)
    if C0.is_diagonal and A.is_diagonal:
        psi_d = np.asarray(psi(C0.diagonal), dtype=float)
        w = A.diagonal / psi_d ** 2
        i_min, i_max = int(np.argmin(w)), int(np.argmax(w))
        e = np.eye(C0.dim)
        return LinkCertificate(float(np.sqrt(w[i_min])), float(np.sqrt(w[i_max])),
                               (e[i_min], e[i_max]))
    V = C0.eigenvectors
    # W = psi(C0)^{-1} A psi(C0)^{-1}, formed in the eigenbasis of C0
    W = (V.T @ A.matrix @ V) / np.outer(pvals, pvals)
    wv, ww = sym_eig(symmetrize(W), psd=True)
    vecs = []
    for k in (-1, 0):
        u = V @ (ww[:, k] / pvals)
        vecs.append(u / np.linalg.norm(u))
    return LinkCertificate(float(np.sqrt(wv[-1])), float(np.sqrt(wv[0])), tuple(vecs))


@dataclass(frozen=True, eq=False)
class LiftingCertificate:
    """Link constants for ``Theta**u`` against ``H**(u/2)``.

    ``m**u`` and ``M**u`` are the extremal quotients
    ``||H^{u/2} x|| / ||Theta^u(C0) x||``.
    """

    u: float
    m: float
    M: float
    raw: LinkCertificate


def certify_lifting(C0, theta, H, u):
    """Extremal quotients ``||H^{u/2} x|| / ||Theta^u(C0) x||``.

    Computed from the singular values of ``H^{u/2} Theta^u(C0)^{-1}``
    rather than from a Gram matrix, which would square its condition.
    """
    if not u > 1:
        raise InvalidParameterError("lifting power u must exceed 1")
    C0 = as_operator(C0, psd=True)
    H = as_operator(H, psd=True)
    tu = theta.pow(u)
    inv = _inverse_psi(C0, tu)
    half = u / 2.0
    if half.is_integer():
        F = np.linalg.matrix_power(H.matrix, int(half))
    else:
        F = apply_function(H, ic.make_power(1.0, half, max(1.0, H.norm()))).matrix
    V = C0.eigenvectors
    X = (F @ V) / inv
    _, sv, wt = np.linalg.svd(X)
    vecs = []
    for k in (-1, 0):
        x = V @ (wt[k] / inv)
        vecs.append(x / np.linalg.norm(x))
    raw = LinkCertificate(float(sv[-1]), float(sv[0]), tuple(vecs))
    return LiftingCertificate(float(u), raw.m ** (1.0 / u), raw.M ** (1.0 / u), raw)


# ---------------------------------------------------------------------------
# problem instances


@dataclass(frozen=True)
class Distortion:
    """Recipe for the factor ``R = Q1 diag(sigma) Q2^T`` of a rotated instance.

    ``sigma`` defaults to ``N`` log-spaced values in ``[m_target, M_target]``.
    ``block`` restricts ``Q2`` to independent orthogonal blocks of that size
    (local mixing); ``identity`` uses ``Q1 = Q2 = I``.
    """

    m_target: float = 0.5
    M_target: float = 2.0
    sigma: Optional[tuple] = None
    block: Optional[int] = None
    identity: bool = False
    q2: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0 < self.m_target <= 1:
            raise InvalidParameterError(f"m_target must lie in (0, 1], got {self.m_target}")
        if self.M_target < 1:
            raise InvalidParameterError(f"M_target must be at least 1, got {self.M_target}")
        if self.sigma is not None:
            s = np.asarray(self.sigma, dtype=float)
            if np.any(s < self.m_target * (1 - 1e-12)) or np.any(s > self.M_target * (1 + 1e-12)):
                raise InvalidParameterError("singular values must lie in [m_target, M_target]")
        if self.block is not None and self.block < 1:
            raise InvalidParameterError("block size must be positive")

    def singular_values(self, n):
        if self.sigma is not None:
            s = np.asarray(self.sigma, dtype=float)
            if s.size != n:
                raise InvalidParameterError(f"expected {n} singular values, got {s.size}")
            return s
        return np.geomspace(self.m_target, self.M_target, n)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Finite-dimensional prior covariance, whitened forward map and link data.

    For diagonal instances ``B`` is stored as its diagonal (1-D array).
    ``f0sq_eigs`` holds ``f0^2`` evaluated on ``H.eigenvalues`` (same order).
    """

    C0: SymOperator
    B: np.ndarray
    H: SymOperator
    psi: ic.IndexFunction
    theta: ic.IndexFunction
    f0: ic.IndexFunction
    f0sq: ic.IndexFunction
    f0sq_eigs: np.ndarray
    link_m: float
    link_M: float
    a: float
    p: float
    kind: str
    certificate: Optional[LinkCertificate] = None
    lifting: Optional[LiftingCertificate] = None
    c0_half: np.ndarray = field(init=False, repr=False)
    c0_modal: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # construction-time caches: C0^{1/2} and diag(V^T C0 V) in the eigenbasis of H
        if self.C0.is_diagonal:
            half = np.sqrt(self.C0.diagonal)
        else:
            half = apply_function(self.C0, ic.make_power(1.0, 0.5, max(1.0, self.C0.norm()))).matrix
        if self.C0.is_diagonal and self.H.is_diagonal:
            modal = self.C0.diagonal[self.H._order]
        else:
            V = self.H.eigenvectors
            modal = np.einsum("ij,ik,kj->j", V, self.C0.matrix, V)
        object.__setattr__(self, "c0_half", _readonly(half))
        object.__setattr__(self, "c0_modal", _readonly(modal))

    @property
    def dim(self):
        return self.C0.dim

    @property
    def diagonal(self):
        return self.C0.is_diagonal and self.H.is_diagonal

    def B_dense(self):
        return np.diag(self.B) if self.B.ndim == 1 else self.B

    def link_ratio(self, lifted=False):
        if lifted:
            if self.lifting is None:
                raise PreconditionError("instance carries no lifting certificate")
            return self.lifting.M / self.lifting.m
        return self.link_M / self.link_m

    def with_lifting(self, u):
        cert = certify_lifting(self.C0, self.theta, self.H, u)
        return replace(self, lifting=cert)


def _power_functions(a, p, a_top):
    kappa = p / (1.0 + 2.0 * a)
    psi = ic.make_power(1.0, kappa, 1.0)
    theta = ic.theta_from_psi(psi)
    f0sq = ic.f0_squared(theta).with_domain(max(1.0, a_top))
    return psi, theta, f0sq, f0sq.pow(0.5)


def _check_ap(a, p, N):
    if not (a > 0 and p > 0):
        raise InvalidParameterError(f"a and p must be positive (got a={a}, p={p})")
    if int(N) != N or N < 2:
        raise InvalidParameterError(f"dimension must be an integer >= 2 (got {N})")


def prior_spectrum(a, N):
    return np.arange(1, N + 1, dtype=float) ** (-(1.0 + 2.0 * a))


def make_commuting_instance(a, p, N, sigma=None):
    """Diagonal instance ``C0 = diag(j^{-(1+2a)})``, ``K = diag(sigma_j j^{-p})``.

    With ``sigma = None`` (all ones) the link holds with ``m = M = 1`` and
    ``H = Theta^2(C0)``.
    """
    _check_ap(a, p, N)
    N = int(N)
    c = prior_spectrum(a, N)
    j = np.arange(1, N + 1, dtype=float)
    s = np.ones(N) if sigma is None else np.asarray(sigma, dtype=float)
    if s.shape != (N,) or np.any(s <= 0):
        raise InvalidParameterError("sigma must hold N positive factors")
    b = s * j ** (-p) * np.sqrt(c)
    h = b * b
    C0 = SymOperator.from_diagonal(c, psd=True)
    H = SymOperator.from_diagonal(h, psd=True)
    psi, theta, f0sq, f0 = _power_functions(a, p, float(h.max()))
    if sigma is None:
        f0sq_eigs = c[H._order]
    else:
        f0sq_eigs = np.asarray(f0sq(H.eigenvalues), dtype=float)
    K2 = SymOperator.from_diagonal((s * j ** (-p)) ** 2, psd=True)
    cert = certify_link(C0, psi, K2)
    return ProblemInstance(C0, _readonly(b), H, psi, theta, f0, f0sq, _readonly(f0sq_eigs),
                           cert.m, cert.M, float(a), float(p), "commuting", cert)


def make_noncommuting_instance(a, p, N, distortion=None, rng_seed=0):
    """Instance with forward map ``K = R psi(C0)``, ``R = Q1 diag(sigma) Q2^T``."""
    _check_ap(a, p, N)
    N = int(N)
    distortion = Distortion() if distortion is None else distortion
    sigma = distortion.singular_values(N)
    if distortion.identity and distortion.q2 is None:
        return make_commuting_instance(a, p, N, None if np.all(sigma == 1.0) else sigma)
    rng = np.random.default_rng(rng_seed)
    if distortion.identity:
        q1 = np.eye(N)
    else:
        q1 = random_orthogonal(N, rng)
    if distortion.q2 is not None:
        q2 = np.asarray(distortion.q2, dtype=float)
        if q2.shape != (N, N) or not np.allclose(q2.T @ q2, np.eye(N), atol=1e-12):
            raise InvalidParameterError("q2 must be an N x N orthogonal matrix")
    elif distortion.block is not None:
        q2 = block_orthogonal(N, distortion.block, rng)
    else:
        q2 = random_orthogonal(N, rng)
    c = prior_spectrum(a, N)
    C0 = SymOperator.from_diagonal(c, psd=True)
    kappa = p / (1.0 + 2.0 * a)
    R = (q1 * sigma) @ q2.T
    theta_c = c ** (kappa + 0.5)
    B = R * theta_c  # R Theta(C0)
    H = SymOperator.from_matrix(symmetrize(B.T @ B), psd=True)
    psi, theta, f0sq, f0 = _power_functions(a, p, H.norm())
    # K^T K = psi S psi with S = Q2 diag(sigma^2) Q2^T
    S = symmetrize((q2 * sigma ** 2) @ q2.T)
    psi_c = c ** kappa
    cert = certify_link(C0, psi, symmetrize(S * np.outer(psi_c, psi_c)))
    f0sq_eigs = np.asarray(f0sq(H.eigenvalues), dtype=float)
    return ProblemInstance(C0, _readonly(B), H, psi, theta, f0, f0sq, _readonly(f0sq_eigs),
                           cert.m, cert.M, float(a), float(p), "rotated", cert)


def heat_theta(a):
    """``Theta(t) = exp(-t^{-2/(1+2a)})``, so that ``Theta^2(C0)`` has entries ``exp(-2 j^2)``."""
    return ic.make_exp_power(1.0, 2.0 / (1.0 + 2.0 * a), 1.0)


def make_heat_instance(a, N):
    """Commuting instance with exponentially decaying singular values.

    ``H = diag(exp(-2 j^2))``; entries underflow to zero for large ``j``,
    so ``f0sq_eigs`` is taken as ``C0`` itself (``f0^2`` inverts
    ``Theta^2``).
    """
    if not a > 0:
        raise InvalidParameterError("a must be positive")
    if int(N) != N or N < 2:
        raise InvalidParameterError("dimension must be an integer >= 2")
    N = int(N)
    c = prior_spectrum(a, N)
    theta = heat_theta(a)
    gamma = theta.params["gamma"]
    psi = ic.make_custom(lambda t: t ** -0.5 * np.exp(-t ** (-gamma)), 1.0)
    with np.errstate(under="ignore"):
        b = np.asarray(theta(c), dtype=float)
        h = b * b
    f0sq = ic.f0_squared(theta)
    C0 = SymOperator.from_diagonal(c, psd=True)
    H = SymOperator.from_diagonal(h, psd=True)
    return ProblemInstance(C0, _readonly(b), H, psi, theta, f0sq.pow(0.5), f0sq,
                           _readonly(c[H._order]), 1.0, 1.0, float(a), float("nan"), "heat")


def conjugate_instance(inst, Q):
    """The same problem in rotated coordinates ``x -> Q x``."""
    Q = np.asarray(Q, dtype=float)
    C0 = SymOperator.from_matrix(symmetrize(Q @ inst.C0.matrix @ Q.T), psd=True)
    B = inst.B_dense() @ Q.T
    H = SymOperator.from_matrix(symmetrize(B.T @ B), psd=True)
    return replace(inst, C0=C0, B=_readonly(B), H=H, kind=inst.kind + "+conjugated",
                   certificate=None, lifting=None)


def instance_from_spec(spec, seed=None):
    """Build an instance from ``{kind, a, p, N, distortion, lift_u}``."""
    try:
        kind = spec.get("kind", "commuting")
        a = float(spec["a"])
        N = int(spec["N"])
        if kind == "heat":
            return make_heat_instance(a, N)
        p = float(spec["p"])
        if kind == "commuting":
            inst = make_commuting_instance(a, p, N)
        elif kind == "rotated":
            d = dict(spec.get("distortion", {}))
            dseed = d.pop("seed", 0)
            dist = Distortion(**{k: d[k] for k in ("m_target", "M_target", "block", "identity")
                                 if k in d})
            inst = make_noncommuting_instance(a, p, N, dist, dseed if seed is None else seed)
        else:
            raise InvalidInputError(f"unknown instance kind {kind!r}")
    except KeyError as exc:
        raise InvalidInputError(f"instance spec is missing field {exc}") from exc
    except TypeError as exc:
        raise InvalidInputError(f"malformed instance spec: {exc}") from exc
    if spec.get("lift_u") is not None:
        inst = inst.with_lifting(float(spec["lift_u"]))
    return inst


# ---------------------------------------------------------------------------
# plain-text matrix dumps


def export_instance(inst, path):
    """Write ``C0``, ``B`` and ``H`` as row-major text blocks.

    Format: a magic first line, then for each matrix a header line
    ``# <name> <rows> <cols>`` followed by ``rows`` lines of
    space-separated ``repr`` floats.
    """
    with open(path, "w") as fh:
        fh.write(DUMP_MAGIC + "\n")
        fh.write(f"# link_m {inst.link_m!r} link_M {inst.link_M!r}\n")
        for name, mat in (("C0", inst.C0.matrix), ("B", inst.B_dense()), ("H", inst.H.matrix)):
            fh.write(f"# {name} {mat.shape[0]} {mat.shape[1]}\n")
            for row in mat:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_matrix_dump(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != DUMP_MAGIC:
        raise InvalidInputError(f"{path} is not a matrix dump")
    out, i = {}, 1
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) == 4 and parts[0] == "#" and parts[1] not in ("link_m",):
            name, rows, cols = parts[1], int(parts[2]), int(parts[3])
            block = np.array([[float(x) for x in ln.split()] for ln in lines[i + 1:i + 1 + rows]])
            out[name] = block.reshape(rows, cols)
            i += rows + 1
        else:
            i += 1
    return out
