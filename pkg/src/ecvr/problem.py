"""Regularized logistic regression in primal and primal-dual form.

The objective is mean logistic loss plus ``lam1 ||x||_1 + lam2/2 ||x||^2``.
Two placements of the l2 term are supported so that the step-size theory's
assumptions hold literally in each regime:

* ``composite`` mode keeps the losses smooth-only and puts both regularizers
  in the prox term, which is then lam2-strongly convex;
* ``smooth`` mode (lam1 = 0) folds the l2 term into every loss, leaving no
  prox term and a lam2-strongly convex smooth objective.

The dual formulation works on the composite objective written as
``(1/N) sum phi_j(a_j' x) + lam g(x)`` with ``g(x) = 1/2 ||x||^2 + c ||x||_1``,
``lam = lam2`` and ``c = lam1/lam2``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import expit, xlogy

from .dataset import Dataset, Partition

COMPOSITE = "composite"
SMOOTH = "smooth"

# Feature matrices up to this many entries are densified for fast column math.
_DENSE_LIMIT = 8_000_000


class PowerIterationError(RuntimeError):
    """Leading-eigenvalue iteration did not reach the requested tolerance."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"power iteration stalled at residual {residual:.3e} after {iterations} iterations"
        )
        self.residual = residual
        self.iterations = iterations


def soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def prox_elastic_net(v: np.ndarray, eta: float, lam1: float, lam2: float) -> np.ndarray:
    """argmin_y 1/2 ||y - v||^2 + eta (lam1 ||y||_1 + lam2/2 ||y||^2)."""
    return soft_threshold(v, eta * lam1) / (1.0 + eta * lam2)


class _Design:
    """Shared view of the retained examples with fast column access."""

    def __init__(self, dataset: Dataset, part: Partition, dense: bool | None = None):
        N = part.retained
        self.N = N
        self.d = dataset.d
        self.A = sparse.csc_matrix(dataset.features[:, :N])
        self.b = np.asarray(dataset.labels[:N], dtype=np.float64)
        if dense is None:
            dense = self.d * N <= _DENSE_LIMIT
        self.A_dense = self.A.toarray() if dense else None

    def margins(self, x: np.ndarray) -> np.ndarray:
        if self.A_dense is not None:
            return self.A_dense.T @ x
        return self.A.T @ x

    def column(self, j: int) -> np.ndarray:
        if self.A_dense is not None:
            return self.A_dense[:, j]
        return self.A[:, [j]].toarray().ravel()

    def col_dot(self, j: int, x: np.ndarray) -> float:
        if self.A_dense is not None:
            return float(self.A_dense[:, j] @ x)
        start, stop = self.A.indptr[j], self.A.indptr[j + 1]
        return float(self.A.data[start:stop] @ x[self.A.indices[start:stop]])

    def combine(self, coef: np.ndarray, cols: slice | None = None) -> np.ndarray:
        """Return A[:, cols] @ coef as a dense vector."""
        if self.A_dense is not None:
            block = self.A_dense if cols is None else self.A_dense[:, cols]
            return block @ coef
        block = self.A if cols is None else self.A[:, cols]
        return np.asarray(block @ coef).ravel()


@dataclass
class PrimalProblem:
    """Finite-sum view used by the gradient methods."""

    dataset: Dataset
    part: Partition
    lam1: float
    lam2: float
    mode: str = COMPOSITE

    def __post_init__(self) -> None:
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("regularization weights must be nonnegative")
        if self.mode not in (COMPOSITE, SMOOTH):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == SMOOTH and self.lam1 != 0:
            raise ValueError("smooth mode requires lam1 = 0")
        self._design = _Design(self.dataset, self.part)

    @property
    def d(self) -> int:
        return self._design.d

    @property
    def n(self) -> int:
        return self.part.n

    @property
    def m(self) -> int:
        return self.part.m

    # -- loss derivatives ---------------------------------------------------

    def _loss_coef(self, margins: np.ndarray, b: np.ndarray) -> np.ndarray:
        # d/dt log(1 + exp(-b t)) = -b * sigmoid(-b t)
        return -b * expit(-b * margins)

    def grad_fi(self, x: np.ndarray, tau: int, i: int) -> np.ndarray:
        """Gradient of one example's loss (plus the l2 term in smooth mode)."""
        j = self.part.example_index(tau, i)
        dz = self._design.col_dot(j, x)
        coef = -self._design.b[j] * expit(-self._design.b[j] * dz)
        g = coef * self._design.column(j)
        if self.mode == SMOOTH:
            g = g + self.lam2 * x
        return g

    def grad_f_node(self, x: np.ndarray, tau: int) -> np.ndarray:
        sl = self.part.node_slice(tau)
        z = self._design.margins(x)[sl]
        coef = self._loss_coef(z, self._design.b[sl]) / self.part.m
        g = self._design.combine(coef, sl)
        if self.mode == SMOOTH:
            g = g + self.lam2 * x
        return g

    def grad_f(self, x: np.ndarray) -> np.ndarray:
        z = self._design.margins(x)
        coef = self._loss_coef(z, self._design.b) / self._design.N
        g = self._design.combine(coef)
        if self.mode == SMOOTH:
            g = g + self.lam2 * x
        return g

    # -- objective values ---------------------------------------------------

    def loss_value(self, x: np.ndarray) -> float:
        z = self._design.margins(x)
        return float(np.mean(np.logaddexp(0.0, -self._design.b * z)))

    def psi_value(self, x: np.ndarray) -> float:
        if self.mode == SMOOTH:
            return 0.0
        return self.lam1 * float(np.abs(x).sum()) + 0.5 * self.lam2 * float(x @ x)

    def primal_value(self, x: np.ndarray) -> float:
        # Same total in both modes; only the smooth/prox split differs.
        return (
            self.loss_value(x)
            + self.lam1 * float(np.abs(x).sum())
            + 0.5 * self.lam2 * float(x @ x)
        )

    def prox_psi(self, v: np.ndarray, eta: float) -> np.ndarray:
        if self.mode == SMOOTH:
            warnings.warn("prox_psi called in smooth mode; psi is zero", stacklevel=2)
            return np.asarray(v, dtype=np.float64).copy()
        if eta <= 0:
            raise ValueError(f"prox step must be positive, got {eta}")
        return prox_elastic_net(np.asarray(v, dtype=np.float64), eta, self.lam1, self.lam2)


@dataclass
class DualProblem:
    """Primal-dual view with one scalar dual variable per example."""

    dataset: Dataset
    part: Partition
    lam: float
    c: float = 0.0
    gamma: float = 4.0  # logistic losses are (1/gamma)-smooth for +-1 labels

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ValueError("lam must be positive (it scales the dual map)")
        if self.c < 0:
            raise ValueError("l1 weight inside g must be nonnegative")
        self._design = _Design(self.dataset, self.part)

    @classmethod
    def from_regularization(
        cls, dataset: Dataset, part: Partition, lam1: float, lam2: float
    ) -> "DualProblem":
        return cls(dataset=dataset, part=part, lam=lam2, c=lam1 / lam2)

    @property
    def d(self) -> int:
        return self._design.d

    @property
    def N(self) -> int:
        return self._design.N

    @property
    def labels(self) -> np.ndarray:
        return self._design.b

    def column(self, j: int) -> np.ndarray:
        return self._design.column(j)

    def margins(self, x: np.ndarray) -> np.ndarray:
        return self._design.margins(x)

    # -- smooth losses and their conjugates ----------------------------------

    def phi_value(self, t, b):
        return np.logaddexp(0.0, -b * t)

    def phi_grad(self, t, b):
        return -b * expit(-b * t)

    def phi_conj_neg(self, alpha: np.ndarray, b: np.ndarray) -> np.ndarray:
        """phi*(-alpha) for feasible blocks, with 0 log 0 = 0."""
        u = b * alpha
        if np.any(u < -1e-12) or np.any(u > 1 + 1e-12):
            bad = int(np.argmax((u < -1e-12) | (u > 1 + 1e-12)))
            raise ValueError(
                f"infeasible dual block {bad} (node {bad // self.part.m},"
                f" local {bad % self.part.m}): b*alpha = {u[bad]}"
            )
        u = np.clip(u, 0.0, 1.0)
        return xlogy(u, u) + xlogy(1.0 - u, 1.0 - u)

    # -- the strongly convex regularizer g and its conjugate ------------------

    def g_value(self, x: np.ndarray) -> float:
        return 0.5 * float(x @ x) + self.c * float(np.abs(x).sum())

    def gstar_grad(self, u: np.ndarray) -> np.ndarray:
        return soft_threshold(np.asarray(u, dtype=np.float64), self.c)

    def gstar_value(self, u: np.ndarray) -> float:
        # g* evaluated at its own maximizer soft(u, c); consistent with
        # gstar_grad through the Fenchel equality g(y*) + g*(u) = <u, y*>.
        y = self.gstar_grad(u)
        return float(u @ y) - self.g_value(y)

    # -- primal/dual objectives ----------------------------------------------

    def dual_aggregate(self, alpha: np.ndarray) -> np.ndarray:
        """(1/(lam N)) sum_j a_j alpha_j, the argument fed to grad g*."""
        return self._design.combine(np.asarray(alpha) / (self.lam * self.N))

    def primal_value(self, x: np.ndarray) -> float:
        z = self.margins(x)
        return float(np.mean(self.phi_value(z, self._design.b))) + self.lam * self.g_value(x)

    def dual_value(self, alpha: np.ndarray) -> float:
        conj = self.phi_conj_neg(np.asarray(alpha, dtype=np.float64), self._design.b)
        return -self.lam * self.gstar_value(self.dual_aggregate(alpha)) - float(np.mean(conj))

    def duality_gap(self, x: np.ndarray, alpha: np.ndarray) -> float:
        return self.primal_value(x) - self.dual_value(alpha)


@dataclass(frozen=True)
class ProblemConstants:
    """Data-dependent smoothness and curvature constants."""

    r_m: float  # max example column norm
    r_bar_sq: float  # max over nodes of lambda_max(node Gram) / m
    r_sq: float  # lambda_max(full Gram) / N
    l: float  # per-example smoothness
    l_bar: float  # per-node smoothness
    l_f: float  # full-objective smoothness
    mu: float  # strong convexity

    @property
    def r(self) -> float:
        return self.r_sq**0.5

    @property
    def r_bar(self) -> float:
        return self.r_bar_sq**0.5


def power_iteration(
    matvec,
    dim: int,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    seed: int = 0,
    restarts: int = 3,
) -> float:
    """Largest eigenvalue of a symmetric PSD operator given as a matvec.

    Deterministic: the start vector comes from a fixed seed, and stagnation
    triggers restarts from the following seeds before giving up.
    """
    last_residual = np.inf
    total_iters = 0
    for attempt in range(restarts):
        rng = np.random.default_rng(seed + attempt)
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        residual = np.inf
        for _ in range(max_iter):
            total_iters += 1
            w = matvec(v)
            norm_w = np.linalg.norm(w)
            if norm_w == 0.0:
                return 0.0
            lam_new = float(v @ w)
            v = w / norm_w
            residual = abs(lam_new - lam)
            lam = lam_new
            if residual <= tol * max(abs(lam), 1e-30):
                return lam
        last_residual = residual
    raise PowerIterationError(last_residual, total_iters)


def compute_constants(problem: PrimalProblem | DualProblem) -> ProblemConstants:
    """Column-norm and Gram-spectrum constants for step-size formulas.

    ``r_m`` comes from an exact column scan; the spectral radii use power
    iteration on the Gram operators A A' (full and per node).
    """
    design = problem._design
    part = problem.part
    A, d, N, m = design.A, design.d, design.N, part.m

    col_sq = np.asarray(A.multiply(A).sum(axis=0)).ravel()
    r_m = float(np.sqrt(col_sq.max()))

    def gram(block):
        bt = block.T.tocsr() if sparse.issparse(block) else block.T

        def matvec(v):
            return block @ (bt @ v)

        return matvec

    r_sq = power_iteration(gram(A), d) / N
    r_bar_sq = max(
        power_iteration(gram(A[:, part.node_slice(tau)]), d) / m for tau in range(part.n)
    )

    smooth_shift = 0.0
    mu = 0.0
    if isinstance(problem, PrimalProblem):
        mu = problem.lam2
        if problem.mode == SMOOTH:
            smooth_shift = problem.lam2
    else:
        mu = problem.lam

    return ProblemConstants(
        r_m=r_m,
        r_bar_sq=r_bar_sq,
        r_sq=r_sq,
        l=float(col_sq.max()) / 4.0 + smooth_shift,
        l_bar=r_bar_sq / 4.0 + smooth_shift,
        l_f=r_sq / 4.0 + smooth_shift,
        mu=mu,
    )
