"""
Dense linear-algebra substrate shared by every synthesis module.

Matrices are plain 2-D float64 numpy arrays. Everything here is a pure
function of its inputs; nothing mutates an argument.
"""
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
import scipy.linalg

from core.exceptions import (DimensionMismatchError, MatrixError,
                             NonSingularityViolation, SvdConvergenceError)
from utils.log_main import logger

Matrix = np.ndarray

# --- Numerical tolerances ---
DEFAULT_TOL_FACTOR = 1e-10
CONDITION_CEILING = 1e12
EXACTNESS_TOL = 1e-8
# ----------------------------

# --- Random schemes ---
SCHEME_XAVIER_UNIFORM = "xavier_uniform"
SCHEME_STANDARD_GAUSSIAN = "standard_gaussian"
RANDOM_SCHEMES = (SCHEME_XAVIER_UNIFORM, SCHEME_STANDARD_GAUSSIAN)
# ----------------------


@dataclass(frozen=True)
class SvdResult:
    u: Matrix
    singular_values: np.ndarray
    v: Matrix

    def reconstruct(self) -> Matrix:
        return (self.u * self.singular_values) @ self.v.T


@dataclass(frozen=True)
class RankReport:
    numerical_rank: int
    threshold: float
    singular_values: np.ndarray


def as_matrix(data: Any, name: str = "matrix") -> Matrix:
    """Validates and converts data into a finite 2-D float64 array."""
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise MatrixError(f"'{name}' must be a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise MatrixError(f"'{name}' contains non-finite entries")
    return m


def condition_number(m: Matrix) -> float:
    """2-norm condition estimate; inf when the smallest singular value is zero."""
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[-1] == 0.0:
        return float("inf")
    return float(s[0] / s[-1])


def svd(m: Matrix, name: str = "matrix") -> SvdResult:
    """Thin SVD with a fallback LAPACK driver before giving up."""
    m = as_matrix(m, name)
    for driver in ("gesdd", "gesvd"):
        try:
            u, s, vt = scipy.linalg.svd(m, full_matrices=False, lapack_driver=driver)
            return SvdResult(u=u, singular_values=s, v=vt.T)
        except (np.linalg.LinAlgError, ValueError) as e:
            logger.warning(f"SVD driver {driver} failed for '{name}': {e}", extra={"msg_type": "system"})
    raise SvdConvergenceError(name, condition_number(m))


def sigma_k(m: Matrix, k: int) -> float:
    """k-th largest singular value (1-based); zero past the dimension."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    s = np.linalg.svd(as_matrix(m), compute_uv=False)
    return float(s[k - 1]) if k <= s.size else 0.0


def spectral_norm(m: Matrix) -> float:
    return sigma_k(m, 1)


def frobenius_norm(m: Matrix) -> float:
    return float(np.linalg.norm(as_matrix(m), "fro"))


def best_rank_approx(m: Matrix, r: int) -> Matrix:
    """alpha_r(m): truncated SVD keeping the r leading singular triplets."""
    if r < 0:
        raise ValueError(f"rank must be nonnegative, got {r}")
    m = as_matrix(m)
    if r >= min(m.shape):
        return m.copy()
    f = svd(m)
    return (f.u[:, :r] * f.singular_values[:r]) @ f.v[:, :r].T


def numerical_rank(m: Matrix, tol_factor: float = DEFAULT_TOL_FACTOR) -> RankReport:
    if tol_factor <= 0:
        raise ValueError(f"tol_factor must be positive, got {tol_factor}")
    m = as_matrix(m)
    s = np.linalg.svd(m, compute_uv=False)
    sigma_1 = float(s[0]) if s.size else 0.0
    if sigma_1 == 0.0:
        return RankReport(numerical_rank=0, threshold=float(np.finfo(np.float64).tiny), singular_values=s)
    threshold = tol_factor * sigma_1 * max(m.shape)
    return RankReport(numerical_rank=int(np.sum(s > threshold)), threshold=threshold, singular_values=s)


def chain_product(ws: Sequence[Matrix], dim: Optional[int] = None) -> Matrix:
    """W_L ... W_1 for ws = [W_1, ..., W_L]; identity for an empty chain."""
    if not ws:
        if dim is None:
            raise DimensionMismatchError("An empty chain needs an explicit dimension")
        return np.eye(dim)
    d = ws[0].shape[0]
    if dim is not None and d != dim:
        raise DimensionMismatchError(f"Chain dimension {d} does not match requested {dim}")
    product = np.eye(d)
    for index, w in enumerate(ws, start=1):
        if w.shape != (d, d):
            raise DimensionMismatchError(f"Chain entry {index} has shape {w.shape}, expected {(d, d)}")
        product = w @ product
    return product


def _check_invertible(a: Matrix, name: str) -> float:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"'{name}' must be square, got shape {a.shape}")
    cond = condition_number(a)
    if not np.isfinite(cond) or cond > CONDITION_CEILING:
        raise NonSingularityViolation(name, cond)
    return cond


def solve(a: Matrix, b: Matrix, name: str = "a") -> Matrix:
    """X with a·X = b via LU factorization."""
    a = as_matrix(a, name)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != a.shape[0]:
        raise DimensionMismatchError(f"Right-hand side has {b.shape[0]} rows, '{name}' has {a.shape[0]}")
    _check_invertible(a, name)
    return scipy.linalg.lu_solve(scipy.linalg.lu_factor(a), b)


def solve_right(b: Matrix, a: Matrix, name: str = "a") -> Matrix:
    """X with X·a = b."""
    return solve(np.asarray(a).T, np.asarray(b).T, name=name).T


# --- Random generation ---

def make_rng(seed: Union[int, Sequence[int], None]) -> np.random.Generator:
    return np.random.default_rng(seed)


def random_matrix(rows: int,
                  scheme: str = SCHEME_XAVIER_UNIFORM,
                  seed: Union[int, Sequence[int], None] = None,
                  cols: Optional[int] = None,
                  rng: Optional[np.random.Generator] = None) -> Matrix:
    """Draws a rows x cols matrix (square by default).

    Deterministic per (scheme, shape, seed); pass rng to draw from a shared stream.
    """
    cols = rows if cols is None else cols
    if rows < 1 or cols < 1:
        raise ValueError(f"Matrix dimensions must be positive, got {rows}x{cols}")
    rng = make_rng(seed) if rng is None else rng
    if scheme == SCHEME_XAVIER_UNIFORM:
        bound = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-bound, bound, size=(rows, cols))
    if scheme == SCHEME_STANDARD_GAUSSIAN:
        return rng.standard_normal((rows, cols))
    raise ValueError(f"Unknown random scheme '{scheme}'. Expected one of {RANDOM_SCHEMES}")


def uniform_bias(dim: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=dim)


def sample_in_ball(dim: int, count: int, radius: Optional[float], rng: np.random.Generator) -> Matrix:
    """count standard Gaussian columns, redrawing any column outside the radius."""
    x = rng.standard_normal((dim, count))
    if radius is None:
        return x
    outside = np.linalg.norm(x, axis=0) > radius
    while np.any(outside):
        x[:, outside] = rng.standard_normal((dim, int(outside.sum())))
        outside = np.linalg.norm(x, axis=0) > radius
    return x


# --- Serialization ---

def matrix_to_json(m: Matrix) -> Dict[str, Any]:
    m = np.asarray(m, dtype=np.float64)
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": m.reshape(-1).tolist()}


def matrix_from_json(obj: Dict[str, Any], name: str = "matrix") -> Matrix:
    try:
        rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    except (KeyError, TypeError) as e:
        raise MatrixError(f"'{name}' is not a matrix object: {e}") from e
    if len(data) != rows * cols:
        raise MatrixError(f"'{name}' declares {rows}x{cols} but carries {len(data)} entries")
    return as_matrix(np.asarray(data, dtype=np.float64).reshape(rows, cols), name)
