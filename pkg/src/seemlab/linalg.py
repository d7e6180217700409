"""Dense real linear algebra used by all diagnostics.

Matrices are 2-D float64 numpy arrays in row-major (C) order. The
non-symmetric eigensolver is LAPACK's dgeev (balancing + Hessenberg +
shifted QR) reached through numpy; everything here wraps it behind small,
strictly-checked entry points so the rest of the package never calls
numpy.linalg directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Mat = np.ndarray  # 2-D float64, row-major


class LinalgError(ValueError):
    """Bad input to a linear algebra routine (shape or degeneracy)."""


class EigenConvergenceError(RuntimeError):
    """The QR iteration failed to converge within LAPACK's iteration cap."""


@dataclass(frozen=True)
class Spectrum:
    """All eigenvalues of a real square matrix.

    `values` is a complex128 vector of length n. Complex eigenvalues come
    in conjugate pairs because the input is real; `max_real` is the largest
    real part, the quantity the divergence detector is built on.
    """

    values: np.ndarray

    @property
    def max_real(self) -> float:
        return float(np.max(self.values.real))

    def pairs(self) -> list[tuple[float, float]]:
        return [(float(v.real), float(v.imag)) for v in self.values]


@dataclass(frozen=True)
class LineFit:
    """Ordinary least squares fit y = slope * x + intercept."""

    slope: float
    intercept: float
    r_squared: float

    def predict(self, x: float) -> float:
        return self.slope * x + self.intercept

    def root(self) -> float:
        """x at which the fitted line crosses zero."""
        if self.slope == 0.0:
            raise LinalgError("fitted line has zero slope; no finite root")
        return -self.intercept / self.slope


def as_matrix(a, name: str = "matrix") -> Mat:
    """Validate and convert input to a 2-D float64 C-ordered array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got ndim={m.ndim}")
    return m

def matmul(a, b) -> Mat:
    """Matrix product with an explicit shape check.

    Raises LinalgError naming both shapes on a dimension mismatch.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise LinalgError(
            f"matmul dimension mismatch: a is {a.shape[0]}x{a.shape[1]}, "
            f"b is {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


MAX_EIG_ORDER = 2000


def eigenvalues(a) -> Spectrum:
    """All eigenvalues of a real non-symmetric square matrix.

    The input must be square of order <= 2000 with finite entries.
    Raises EigenConvergenceError if the underlying QR iteration gives up
    (practically unreachable for the Gram-difference matrices this package
    builds, but surfaced as a distinct error so callers can map it to a
    numeric-failure exit path).
    """
    a = as_matrix(a, "a")
    n, m = a.shape
    if n != m:
        raise LinalgError(f"eigenvalues requires a square matrix, got {n}x{m}")
    if n > MAX_EIG_ORDER:
        raise LinalgError(f"matrix order {n} exceeds supported cap {MAX_EIG_ORDER}")
    if not np.all(np.isfinite(a)):
        raise LinalgError("eigenvalues requires finite entries")
    if n == 0:
        return Spectrum(values=np.zeros(0, dtype=np.complex128))
    try:
        vals = np.linalg.eigvals(a)
    except np.linalg.LinAlgError as exc:
        raise EigenConvergenceError(f"eigensolver did not converge: {exc}") from exc
    return Spectrum(values=np.asarray(vals, dtype=np.complex128))


def max_real_eigenvalue(a) -> float:
    """Largest real part over the spectrum of `a`."""
    return eigenvalues(a).max_real


def dominant_eigenvector(a, max_iter: int = 1000, tol: float = 1e-12):
    """Right eigenvector for the eigenvalue of largest real part.

    Power iteration on a shifted to dominance: B = A + s*I with s chosen so
    the target eigenvalue has the largest modulus. Returns (vector, converged).
    When the dominant eigenvalue is complex the iteration cannot settle; the
    flag comes back False and the last iterate is returned.
    """
    a = as_matrix(a, "a")
    n, m = a.shape
    if n != m:
        raise LinalgError(f"dominant_eigenvector requires a square matrix, got {n}x{m}")
    shift = float(np.linalg.norm(a, ord="fro")) + 1.0
    b = a + shift * np.eye(n)
    v = np.ones(n) / np.sqrt(n)
    converged = False
    for _ in range(max_iter):
        w = b @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            converged = True
            break
        v = w
    return v, converged


def fit_line(xs, ys) -> LineFit:
    """Ordinary least squares line through (xs, ys).

    Solved from the closed-form normal equations of the 2-parameter
    problem (centered for stability). Requires >= 2 points and xs not all
    equal; refitting points that lie exactly on a line reproduces it.
    """
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise LinalgError(f"fit_line length mismatch: {x.size} xs vs {y.size} ys")
    if x.size < 2:
        raise LinalgError(f"fit_line needs at least 2 points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise LinalgError("fit_line requires finite inputs")
    xm = x.mean()
    ym = y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise LinalgError("fit_line is degenerate: all xs are equal")
    slope = float(dx @ (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float((y - ym) @ (y - ym))
    if ss_tot == 0.0:
        # constant ys: the fit is exact (slope 0 through the mean)
        r_squared = 1.0
    else:
        r_squared = 1.0 - ss_res / ss_tot
    return LineFit(slope=slope, intercept=intercept, r_squared=r_squared)
