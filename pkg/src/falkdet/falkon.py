"""Nystrom kernel ridge regression solved by preconditioned conjugate iterations.

The model is ``f(x) = sum_j alpha_j K(x, c_j)`` over ``M`` centers ``c_j``.
Training solves the Nystrom normal equations

    (K_nM^T K_nM + lambda n K_MM) alpha = K_nM^T y

without ever forming an ``n x n`` (or even ``n x M``) matrix: ``K_nM`` is
streamed in row tiles at every iteration.  The system is preconditioned
with ``B = n^{-1/2} T^{-1} A^{-1}``, ``T = chol(K_MM)``,
``A = chol(T T^T / M + lambda I)`` (upper Cholesky factors), which makes
``B^T H B`` close to the identity when the centers are representative.

Dense solvers for the full and the Nystrom problem are provided as oracles.
"""
from __future__ import annotations

import logging
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import ConvergenceWarning, IngestionError, InputError, NumericalError
from .kernels import DEFAULT_TILE_ROWS, GaussianKernelParams, KernelTiler, kernel_block

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"FLKN"
MODEL_VERSION = 1
_JITTER_ESCALATIONS = 3


@dataclass(frozen=True)
class SolverConfig:
    max_cg_iterations: int = 100
    cg_tolerance: float = 1e-7
    # initial Cholesky jitter, relative to trace(K_MM) / M
    cholesky_jitter: float = 1e-10
    tile_rows: int = DEFAULT_TILE_ROWS

    def __post_init__(self):
        if self.max_cg_iterations < 1:
            raise InputError("max_cg_iterations must be >= 1")
        if not self.cg_tolerance >= 0:
            raise InputError("cg_tolerance must be >= 0")
        if not self.cholesky_jitter >= 0:
            raise InputError("cholesky_jitter must be >= 0")
        if self.tile_rows < 1:
            raise InputError("tile_rows must be >= 1")


@dataclass
class SolverInfo:
    n: int = 0
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    residuals: tuple = ()
    jitter: float = 0.0
    seconds: float = 0.0


@dataclass(eq=False)
class FalkonModel:
    centers: np.ndarray
    alpha: np.ndarray
    kernel: GaussianKernelParams
    lam: float
    meta: SolverInfo = field(default_factory=SolverInfo)

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers))
        self.alpha = np.asarray(self.alpha, dtype=np.float64).ravel()
        if self.centers.shape[0] < 1 or self.centers.shape[0] != self.alpha.shape[0]:
            raise InputError(
                f"model needs M >= 1 centers and as many coefficients, got "
                f"{self.centers.shape[0]} centers and {self.alpha.shape[0]} coefficients")
        if not np.all(np.isfinite(self.alpha)):
            raise NumericalError("model coefficients are not finite")

    @property
    def num_centers(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def predict(self, Q, tile_rows: int = DEFAULT_TILE_ROWS) -> np.ndarray:
        return falkon_predict(self, Q, tile_rows)


def _check_xy(X, y):
    X = np.atleast_2d(np.asarray(X))
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] < 1:
        raise InputError("need at least one training point")
    if X.shape[0] != y.shape[0]:
        raise InputError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
    if not np.all(np.isfinite(y)):
        raise InputError("targets must be finite")
    return X, y


def _check_lambda(lam):
    if not (np.isfinite(lam) and lam > 0):
        raise InputError(f"regularization must be positive, got lambda={lam!r}")


def _cholesky_upper(mat: np.ndarray, base_jitter: float, what: str) -> tuple[np.ndarray, float]:
    """Upper Cholesky factor of ``mat + jitter I`` with jitter escalation."""
    jitter = base_jitter
    eye = np.eye(mat.shape[0])
    for attempt in range(_JITTER_ESCALATIONS + 1):
        try:
            return scipy.linalg.cholesky(mat + jitter * eye, lower=False), jitter
        except np.linalg.LinAlgError:
            logger.debug("Cholesky of %s failed with jitter %.3g", what, jitter)
            jitter = jitter * 10 if jitter > 0 else 1e-12 * max(1.0, np.trace(mat) / mat.shape[0])
    raise NumericalError(f"Cholesky factorization of {what} failed after jitter escalation")


def krr_direct_full(X, y, lam: float, kernel: GaussianKernelParams) -> np.ndarray:
    """Solve ``(K_nn + lambda n I) alpha = y`` densely.  Oracle only."""
    X, y = _check_xy(X, y)
    _check_lambda(lam)
    n = X.shape[0]
    knn = kernel_block(X, X, kernel)
    knn[np.diag_indices(n)] += lam * n
    try:
        factor = scipy.linalg.cho_factor(knn, lower=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("full KRR system is not positive definite") from exc
    return scipy.linalg.cho_solve(factor, y)


def nystrom_krr_direct(X, y, centers, lam: float, kernel: GaussianKernelParams) -> np.ndarray:
    """Dense solve of the Nystrom normal equations.  Oracle for :func:`falkon_train`."""
    X, y = _check_xy(X, y)
    _check_lambda(lam)
    centers = np.atleast_2d(np.asarray(centers))
    if centers.shape[1] != X.shape[1]:
        raise InputError(f"dimension mismatch: X has d={X.shape[1]}, centers have d={centers.shape[1]}")
    n, m = X.shape[0], centers.shape[0]
    knm = kernel_block(X, centers, kernel)
    kmm = kernel_block(centers, centers, kernel)
    H = knm.T @ knm + lam * n * kmm
    rhs = knm.T @ y
    jitter = 0.0
    for _ in range(_JITTER_ESCALATIONS + 2):
        try:
            factor = scipy.linalg.cho_factor(H + jitter * np.eye(m), lower=False)
            return scipy.linalg.cho_solve(factor, rhs)
        except np.linalg.LinAlgError:
            jitter = jitter * 10 if jitter else 1e-10 * np.trace(H) / m
    raise NumericalError("Nystrom normal equations are singular beyond jitter repair")


class Preconditioner:
    """``B = n^{-1/2} T^{-1} A^{-1}`` built from the center kernel matrix."""

    def __init__(self, kmm: np.ndarray, lam: float, n: int, jitter_factor: float = 1e-10):
        m = kmm.shape[0]
        self.n = n
        self.T, self.jitter = _cholesky_upper(
            kmm, jitter_factor * np.trace(kmm) / m, "K_MM")
        self.A, _ = _cholesky_upper(self.T @ self.T.T / m + lam * np.eye(m), 0.0,
                                    "T T^T / M + lambda I")
        self._scale = 1.0 / np.sqrt(n)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``B v``"""
        w = scipy.linalg.solve_triangular(self.A, v, lower=False)
        return scipy.linalg.solve_triangular(self.T, w, lower=False) * self._scale

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        """``B^T v``"""
        w = scipy.linalg.solve_triangular(self.T, v, lower=False, trans="T")
        return scipy.linalg.solve_triangular(self.A, w, lower=False, trans="T") * self._scale

    def dense(self) -> np.ndarray:
        return self.apply(np.eye(self.T.shape[0]))


class NystromSystem:
    """Streaming products with ``K_nM`` for fixed training points and centers."""

    def __init__(self, X, centers, lam: float, kernel: GaussianKernelParams,
                 tile_rows: int = DEFAULT_TILE_ROWS):
        self.X = np.atleast_2d(np.asarray(X))
        self.centers = np.atleast_2d(np.asarray(centers))
        if self.X.shape[1] != self.centers.shape[1]:
            raise InputError(
                f"dimension mismatch: X has d={self.X.shape[1]}, centers have d={self.centers.shape[1]}")
        self.lam = lam
        self.kernel = kernel
        self.tile_rows = tile_rows
        self.tiler = KernelTiler(self.centers, kernel)
        self.kmm = kernel_block(self.centers, self.centers, kernel)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def _tiles(self):
        for start in range(0, self.n, self.tile_rows):
            stop = min(start + self.tile_rows, self.n)
            yield start, stop, self.tiler.rows(self.X[start:stop])

    def knm_t(self, y: np.ndarray) -> np.ndarray:
        """``K_nM^T y``"""
        out = np.zeros(self.centers.shape[0])
        for start, stop, tile in self._tiles():
            out += tile.T @ y[start:stop]
        return out

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """``(K_nM^T K_nM + lambda n K_MM) v``"""
        out = np.zeros_like(v, dtype=np.float64)
        for _, _, tile in self._tiles():
            out += tile.T @ (tile @ v)
        out += (self.lam * self.n) * (self.kmm @ v)
        return out


class PreconditionedOperator:
    """``W = B^T (K_nM^T K_nM + lambda n K_MM) B``, symmetric positive definite."""

    def __init__(self, system: NystromSystem, precond: Preconditioner):
        self.system = system
        self.precond = precond

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.precond.apply_transpose(self.system.matvec(self.precond.apply(v)))

    def rhs(self, y: np.ndarray) -> np.ndarray:
        return self.precond.apply_transpose(self.system.knm_t(y))


def build_preconditioned_operator(X, centers, lam: float, kernel: GaussianKernelParams,
                                  config: SolverConfig = SolverConfig()) -> PreconditionedOperator:
    _check_lambda(lam)
    system = NystromSystem(X, centers, lam, kernel, config.tile_rows)
    precond = Preconditioner(system.kmm, lam, system.n, config.cholesky_jitter)
    return PreconditionedOperator(system, precond)


def conjugate_residual(op, b: np.ndarray, max_iterations: int, tolerance: float):
    """Conjugate residual iterations for a symmetric positive definite ``op``.

    Among the conjugate-direction Krylov methods this variant minimizes
    ``||b - op(x)||`` over the Krylov space, so the recorded residual norms
    never increase.  One operator application per iteration.

    Returns ``(x, residual_norms, converged)`` where ``residual_norms[0]``
    is ``||b||``.
    """
    x = np.zeros_like(b)
    r = b.copy()
    norm_b = float(np.linalg.norm(b))
    residuals = [norm_b]
    if norm_b == 0.0:
        return x, residuals, True
    threshold = tolerance * norm_b
    wr = op(r)
    p = r.copy()
    wp = wr.copy()
    rwr = float(r @ wr)
    for _ in range(max_iterations):
        wpwp = float(wp @ wp)
        if wpwp == 0.0 or rwr <= 0.0:
            break
        step = rwr / wpwp
        x += step * p
        r -= step * wp
        res = float(np.linalg.norm(r))
        residuals.append(res)
        if res <= threshold:
            return x, residuals, True
        wr = op(r)
        rwr_next = float(r @ wr)
        ratio = rwr_next / rwr
        rwr = rwr_next
        p *= ratio
        p += r
        wp *= ratio
        wp += wr
    return x, residuals, residuals[-1] <= threshold


def falkon_train(X, y, centers, lam: float, kernel: GaussianKernelParams,
                 config: SolverConfig = SolverConfig()) -> FalkonModel:
    """Fit a Nystrom KRR model with the preconditioned iterative solver.

    Stopping at ``config.max_cg_iterations`` before the tolerance is met is
    not an error: the returned model has ``meta.converged = False`` and a
    :class:`ConvergenceWarning` is emitted.
    """
    started = time.perf_counter()
    X, y = _check_xy(X, y)
    centers = np.atleast_2d(np.asarray(centers))
    if centers.shape[0] < 1:
        raise InputError("need at least one center")
    op = build_preconditioned_operator(X, centers, lam, kernel, config)
    beta, residuals, converged = conjugate_residual(
        op, op.rhs(y), config.max_cg_iterations, config.cg_tolerance)
    alpha = op.precond.apply(beta)
    rel = residuals[-1] / residuals[0] if residuals[0] > 0 else 0.0
    if not converged:
        warnings.warn(
            f"solver stopped after {len(residuals) - 1} iterations with relative "
            f"residual {rel:.3g} > {config.cg_tolerance:.3g}", ConvergenceWarning, stacklevel=2)
    info = SolverInfo(n=X.shape[0], iterations=len(residuals) - 1, residual=rel,
                      converged=converged, residuals=tuple(residuals),
                      jitter=op.precond.jitter, seconds=time.perf_counter() - started)
    return FalkonModel(centers=centers, alpha=alpha, kernel=kernel, lam=lam, meta=info)


def falkon_predict(model: FalkonModel, Q, tile_rows: int = DEFAULT_TILE_ROWS) -> np.ndarray:
    Q = np.asarray(Q)
    if Q.ndim == 1:
        Q = Q[None, :]
    if Q.ndim != 2 or Q.shape[1] != model.dim:
        raise InputError(f"dimension mismatch: queries have shape {Q.shape}, model has d={model.dim}")
    tiler = KernelTiler(model.centers, model.kernel)
    out = np.empty(Q.shape[0])
    for start in range(0, Q.shape[0], tile_rows):
        stop = min(start + tile_rows, Q.shape[0])
        out[start:stop] = tiler.rows(Q[start:stop]) @ model.alpha
    return out


# -- serialization -----------------------------------------------------------

_HEADER = struct.Struct("<4sIIIdd")


def model_to_bytes(model: FalkonModel) -> bytes:
    m, d = model.centers.shape
    head = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, m, d, model.kernel.sigma, model.lam)
    centers = np.ascontiguousarray(model.centers, dtype="<f4").tobytes()
    alpha = np.ascontiguousarray(model.alpha, dtype="<f8").tobytes()
    return head + centers + alpha


def model_from_bytes(data: bytes, source: str = "<bytes>") -> FalkonModel:
    if len(data) < _HEADER.size:
        raise IngestionError(f"{source}: truncated model header ({len(data)} bytes)")
    magic, version, m, d, sigma, lam = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise IngestionError(f"{source}: bad magic {magic!r} at offset 0, expected {MODEL_MAGIC!r}")
    if version != MODEL_VERSION:
        raise IngestionError(f"{source}: unsupported model version {version} at offset 4")
    expected = _HEADER.size + 4 * m * d + 8 * m
    if len(data) != expected:
        raise IngestionError(f"{source}: expected {expected} bytes for M={m}, d={d}, found {len(data)}")
    off = _HEADER.size
    centers = np.frombuffer(data, dtype="<f4", count=m * d, offset=off).reshape(m, d).astype(np.float32)
    alpha = np.frombuffer(data, dtype="<f8", count=m, offset=off + 4 * m * d).astype(np.float64)
    try:
        kernel = GaussianKernelParams(sigma)
        return FalkonModel(centers=centers, alpha=alpha, kernel=kernel, lam=lam)
    except (InputError, NumericalError) as exc:
        raise IngestionError(f"{source}: {exc}") from exc


def save_model(model: FalkonModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> FalkonModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read model file ({exc.strerror})") from exc
    return model_from_bytes(data, str(path))
