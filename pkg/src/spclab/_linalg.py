"""Small dense linear-algebra helpers shared by the operator modules."""

import numpy as np
import scipy.linalg

from .errors import NumericError, PreconditionError

# eigenvalues above -PSD_CLAMP * lambda_max are treated as roundoff and set to 0
PSD_CLAMP = 1e-10


def random_orthogonal(n, rng):
    """Haar-distributed orthogonal matrix via QR with sign-fixed R diagonal."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def block_orthogonal(n, block, rng):
    """Block-diagonal orthogonal matrix with independent Haar blocks of size ``block``."""
    q = np.zeros((n, n))
    for start in range(0, n, block):
        stop = min(n, start + block)
        q[start:stop, start:stop] = random_orthogonal(stop - start, rng)
    return q


def symmetrize(a):
    return 0.5 * (a + a.T)


def sym_eig(a, psd=False):
    """Eigenpairs of a symmetric matrix, eigenvalues in descending order.

    With ``psd=True`` tiny negative eigenvalues are clamped to zero and
    clearly negative ones raise.
    """
    try:
        vals, vecs = scipy.linalg.eigh(a)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(
            f"symmetric eigendecomposition failed for {a.shape[0]}x{a.shape[0]} "
            f"matrix (finite entries: {bool(np.all(np.isfinite(a)))}): {exc}"
        ) from exc
    vals = vals[::-1].copy()
    vecs = vecs[:, ::-1].copy()
    if psd:
        vals = clamp_psd(vals)
    return vals, vecs


def clamp_psd(vals):
    top = max(float(np.max(vals)), 0.0) if vals.size else 0.0
    floor = -PSD_CLAMP * top
    if vals.size and np.min(vals) < floor and np.min(vals) < 0:
        raise PreconditionError(
            f"matrix is not positive semidefinite: lambda_min={np.min(vals):.3e}, "
            f"lambda_max={top:.3e}"
        )
    return np.where(vals < 0, 0.0, vals)


def from_spectrum(vals, vecs):
    return symmetrize((vecs * vals) @ vecs.T)
