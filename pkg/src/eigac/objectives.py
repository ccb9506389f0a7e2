"""Objective oracles: logistic regression and l_p^p finite sums.

A problem is a finite-sum objective over a data matrix A (columns are
samples) with labels b in {-1,+1}.  Value, gradient, Hessian-vector and
third-directional-derivative oracles are closed forms; everything here is
pure and safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DataError

DENSE_HESSIAN_MAX_DIM = 512


@dataclass(frozen=True)
class ProblemSpec:
    """A sampled finite-sum minimization instance.

    kind: "logistic" or "lpp"; for lpp, p is an even integer >= 4.
    A has shape (n, N) with samples as columns, entries in [-1, 1];
    b has shape (N,) with entries in {-1, +1}.  L caches the Lipschitz
    estimate min(||A^T A||/N, 4*lambda_max(H(1/n))) used for step sizes.
    """

    kind: str
    A: np.ndarray
    b: np.ndarray
    p: int = 4
    L: float = field(default=0.0)

    def __post_init__(self):
        if self.kind not in ("logistic", "lpp"):
            raise DataError(f"unknown objective kind {self.kind!r}")
        if self.kind == "lpp" and (self.p < 4 or self.p % 2 != 0):
            raise DataError("lpp exponent must be an even integer >= 4")
        if self.A.ndim != 2 or self.b.shape != (self.A.shape[1],):
            raise DataError("A must be (n, N) with b of length N")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return self.A.shape[1]

    def margins(self, x):
        return self.A.T @ x

    def value(self, x) -> float:
        m = self.margins(x)
        if self.kind == "logistic":
            # log(1 + exp(-b m)) evaluated as logaddexp for large margins
            return float(np.mean(np.logaddexp(0.0, -self.b * m)))
        r = m - self.b
        return float(np.mean(r**self.p) / self.p)

    def gradient(self, x) -> np.ndarray:
        m = self.margins(x)
        if self.kind == "logistic":
            w = -self.b * expit(-self.b * m)
            return self.A @ w / self.N
        r = m - self.b
        return self.A @ (r ** (self.p - 1)) / self.N

    def value_and_gradient(self, x):
        m = self.margins(x)
        if self.kind == "logistic":
            val = float(np.mean(np.logaddexp(0.0, -self.b * m)))
            w = -self.b * expit(-self.b * m)
            return val, self.A @ w / self.N
        r = m - self.b
        val = float(np.mean(r**self.p) / self.p)
        return val, self.A @ (r ** (self.p - 1)) / self.N

    def _hess_weights(self, x):
        m = self.margins(x)
        if self.kind == "logistic":
            s = expit(self.b * m)
            return s * (1.0 - s)
        return (self.p - 1) * (m - self.b) ** (self.p - 2)

    def hvp(self, x, u) -> np.ndarray:
        """Hessian-vector product without materializing the Hessian."""
        w = self._hess_weights(x)
        return self.A @ (w * (self.A.T @ u)) / self.N

    def hvp_operator(self, x):
        """u -> H(x) u with the Hessian weights computed once."""
        w = self._hess_weights(x) / self.N
        A = self.A

        def apply(u):
            return A @ (w * (A.T @ u))

        return apply

    def hessian(self, x) -> np.ndarray:
        """Dense Hessian; only for small dimensions (tests, diagnostics)."""
        if self.n > DENSE_HESSIAN_MAX_DIM:
            raise DataError(f"refusing to materialize {self.n}x{self.n} Hessian")
        w = self._hess_weights(x)
        return (self.A * w) @ self.A.T / self.N

    def third_dir(self, x, z) -> np.ndarray:
        """Directional third derivative D^3 f(x)[z, z, .] as a vector.

        Closed forms differentiate the Hessian weights along z; certified
        against second-order finite differences of hvp in the test suite.
        """
        m = self.margins(x)
        az = self.A.T @ z
        if self.kind == "logistic":
            s = expit(self.b * m)
            w3 = self.b * s * (1.0 - s) * (1.0 - 2.0 * s)
        else:
            w3 = (self.p - 1) * (self.p - 2) * (m - self.b) ** (self.p - 3)
        return self.A @ (w3 * az**2) / self.N


def lambda_max(problem, x, seed=0, max_iters=10, tol=1e-6, z0=None):
    """Largest Hessian eigenvalue by power iteration on hvp.

    Iterates z <- H z / ||H z|| from a seeded unit Gaussian (or a supplied
    warm start) until successive iterates differ by <= tol or max_iters is
    hit, then reports the Rayleigh quotient of the final iterate.  A zero
    Hessian yields 0 with an arbitrary unit vector.
    """
    n = problem.n
    if z0 is None:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(n)
    else:
        z = np.asarray(z0, dtype=float).copy()
    z /= np.linalg.norm(z)
    apply_h = problem.hvp_operator(x)
    for _ in range(max_iters):
        hz = apply_h(z)
        nrm = np.linalg.norm(hz)
        if nrm == 0.0:
            return 0.0, z
        z_new = hz / nrm
        if np.linalg.norm(z_new - z) <= tol:
            z = z_new
            break
        z = z_new
    return float(z @ apply_h(z)), z


def spectral_norm_gram(A, max_iters=200, tol=1e-12, seed=0):
    """||A^T A|| via power iteration applied through A (same spectrum as AA^T)."""
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(A.shape[0])
    u /= np.linalg.norm(u)
    lam = 0.0
    for _ in range(max_iters):
        w = A @ (A.T @ u)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        u_new = w / nrm
        lam_new = float(u_new @ (A @ (A.T @ u_new)))
        if abs(lam_new - lam) <= tol * max(1.0, lam_new):
            return lam_new
        u, lam = u_new, lam_new
    return lam


def lipschitz_bound(kind, A, b, p=4, seed=0):
    """min(||A^T A||/N, 4*lambda_max(Hessian at ones/n)) per the shared convention."""
    n, N = A.shape
    gram = spectral_norm_gram(A, seed=seed) / N
    probe = ProblemSpec(kind, A, b, p=p, L=1.0)
    lam, _ = lambda_max(probe, np.full(n, 1.0 / n), seed=seed, max_iters=200, tol=1e-10)
    return min(gram, 4.0 * lam)


def make_problem(kind, A, b, p=4, seed=0) -> ProblemSpec:
    """Build a ProblemSpec with its Lipschitz estimate cached."""
    L = lipschitz_bound(kind, A, b, p=p, seed=seed)
    return ProblemSpec(kind, A, b, p=p, L=L)


class ConstantEstimator:
    """Lambda(x, f) = L, a fixed curvature bound."""

    def __init__(self, L):
        self.L = float(L)

    def estimate(self, problem, x) -> float:
        return self.L

    def grad_x(self, problem, x) -> np.ndarray:
        return np.zeros(problem.n)


class PowerEstimator:
    """Lambda(x, f) = lambda_max(H(x)) via power iteration.

    Keeps the last eigenvector as a warm start so repeated calls along a
    trajectory converge in a couple of Hessian-vector products.  The
    eigenvector is treated as constant in grad_x, which then reduces to the
    directional third derivative along it.
    """

    def __init__(self, seed=0, max_iters=10, tol=1e-6):
        self.seed = seed
        self.max_iters = max_iters
        self.tol = tol
        self._z = None

    def estimate(self, problem, x) -> float:
        lam, z = lambda_max(problem, x, seed=self.seed, max_iters=self.max_iters,
                            tol=self.tol, z0=self._z)
        self._z = z
        return lam

    def grad_x(self, problem, x) -> np.ndarray:
        if self._z is None:
            self.estimate(problem, x)
        return problem.third_dir(x, self._z)


class L0L1Estimator:
    """Lambda(x, f) = L1 ||grad f(x)|| + L0, the affine curvature model."""

    def __init__(self, L0, L1):
        self.L0 = float(L0)
        self.L1 = float(L1)

    def estimate(self, problem, x) -> float:
        return self.L1 * float(np.linalg.norm(problem.gradient(x))) + self.L0

    def grad_x(self, problem, x) -> np.ndarray:
        g = problem.gradient(x)
        nrm = np.linalg.norm(g)
        if nrm == 0.0:
            return np.zeros(problem.n)
        return self.L1 * problem.hvp(x, g / nrm)


def fit_l0l1(trace):
    """Least-squares affine fit Lambda ~ L1 * g + L0 from (g, Lambda) pairs.

    Both coefficients are clamped to be nonnegative; a constant trace
    degenerates to L1 = 0 with L0 the common value.
    """
    trace = np.asarray(trace, dtype=float)
    if trace.ndim != 2 or trace.shape[0] < 2:
        raise DataError("need at least two (grad_norm, Lambda) points")
    g, lam = trace[:, 0], trace[:, 1]
    if np.ptp(g) == 0.0:
        return float(np.mean(lam)), 0.0
    X = np.column_stack([np.ones_like(g), g])
    (l0, l1), *_ = np.linalg.lstsq(X, lam, rcond=None)
    return max(float(l0), 0.0), max(float(l1), 0.0)
