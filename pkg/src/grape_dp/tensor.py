"""Deterministic dense linear algebra on float64 matrices.

Matrices are plain 2-D ``numpy`` arrays (row-major, float64). Randomness comes
from a counter-based generator (SplitMix64 stream + Box-Muller), so any draw is
a pure function of ``(seed, counter)`` and sequences can be regenerated
bit-exactly regardless of chunking or thread count. The truncated SVD is a
one-sided Jacobi iteration, adequate for the matrix sizes this toolkit targets
(well under 512x512).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError

Matrix = np.ndarray

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = 0xFFFFFFFFFFFFFFFF
# 2**-53, and a one-past shift so uniforms land in (0, 1] (log never sees 0).
_U53 = 2.0 ** -53


def _splitmix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _raw_u64(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the SplitMix64 stream for ``seed``."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _splitmix(np.uint64(seed & _MASK64) + idx * _GOLDEN)


def hash_combine(*values: int) -> int:
    """Deterministically mix integers into one 64-bit value."""
    h = np.uint64(0x8AC7230489E7FFD9)
    with np.errstate(over="ignore"):
        for v in values:
            h = _splitmix(h ^ (np.uint64(int(v) & _MASK64) + _GOLDEN))
    return int(h)


@dataclass(frozen=True)
class RngStream:
    """A position in a deterministic random stream.

    ``counter`` indexes Gaussian draws; the k-th draw is a pure function of
    ``(seed, counter + k)``, so identical streams yield identical sequences
    on every platform and under any parallel schedule.
    """

    seed: int
    counter: int = 0

    def advance(self, n: int) -> "RngStream":
        return RngStream(self.seed, self.counter + int(n))

    def derive(self, *keys: int) -> "RngStream":
        """Fork an independent stream keyed off this seed."""
        return RngStream(hash_combine(self.seed, *keys), 0)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles in (0, 1], one per counter position."""
        if n < 0:
            raise InvalidArgumentError("n must be non-negative")
        bits = _raw_u64(self.seed, self.counter, n)
        return ((bits >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _U53

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard-normal draws at counters ``counter .. counter+n-1``.

        Each draw k consumes the pair of stream outputs (2k, 2k+1) via
        Box-Muller, so draws are independent of how calls are chunked.
        """
        if n < 0:
            raise InvalidArgumentError("n must be non-negative")
        base = 2 * self.counter
        bits = _raw_u64(self.seed, base, 2 * n)
        u = ((bits >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _U53
        u1, u2 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, n: int, upper: int) -> np.ndarray:
        """``n`` integers uniform on [0, upper)."""
        if upper <= 0:
            raise InvalidArgumentError("upper must be positive")
        bits = _raw_u64(self.seed, self.counter, n)
        return (bits % np.uint64(upper)).astype(np.int64)


def gaussian_matrix(stream: RngStream, m: int, r: int, variance: float) -> Matrix:
    """m x r matrix of i.i.d. Gaussian(0, variance) entries.

    Pure in ``(stream.seed, stream.counter, m, r, variance)``: the same inputs
    always reproduce the same matrix bit-for-bit.
    """
    if m < 1 or r < 1:
        raise InvalidArgumentError(f"matrix dimensions must be >= 1, got {m}x{r}")
    if not variance > 0:
        raise InvalidArgumentError(f"variance must be positive, got {variance}")
    draws = stream.normals(m * r)
    return (draws * np.sqrt(variance)).reshape(m, r)


# ---------------------------------------------------------------------------
# Elementary products and norms (thin shape-checked wrappers).
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def t_matmul(a: Matrix, b: Matrix) -> Matrix:
    """a.T @ b with an explicit row-count check."""
    if a.shape[0] != b.shape[0]:
        raise InvalidArgumentError(f"row counts differ: {a.shape} vs {b.shape}")
    return a.T @ b


def fro_norm(a: Matrix) -> float:
    return float(np.sqrt(np.sum(a * a)))


def l2_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(v.ravel()))


def flatten_concat(arrays: list[np.ndarray]) -> np.ndarray:
    """Row-major flatten of each array, concatenated in order."""
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a).ravel() for a in arrays])


def split_concat(flat: np.ndarray, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    """Inverse of :func:`flatten_concat` for the given shapes."""
    sizes = [int(np.prod(s)) for s in shapes]
    if flat.size != sum(sizes):
        raise InvalidArgumentError(
            f"flat vector of length {flat.size} cannot split into {shapes}"
        )
    out, pos = [], 0
    for size, shape in zip(sizes, shapes):
        out.append(flat[pos : pos + size].reshape(shape))
        pos += size
    return out


# ---------------------------------------------------------------------------
# One-sided Jacobi SVD.
# ---------------------------------------------------------------------------

_JACOBI_TOL = 1e-14


def _orthonormal_fill(u: Matrix, cols: list[int]) -> None:
    """Replace the listed (numerically zero) columns with orthonormal fill-ins."""
    m = u.shape[0]
    for j in cols:
        # residual of each basis vector against the current columns; the
        # largest one always has positive mass since fewer than m columns
        # are filled
        residuals = np.eye(m) - u @ u.T
        norms = np.linalg.norm(residuals, axis=0)
        best = int(np.argmax(norms))
        u[:, j] = residuals[:, best] / norms[best]


def _jacobi_tall(a: Matrix, max_sweeps: int) -> tuple[Matrix, np.ndarray, Matrix]:
    """Thin SVD of ``a`` (m >= n) by one-sided Jacobi column rotations."""
    m, n = a.shape
    b = np.array(a, dtype=np.float64, copy=True)
    v = np.eye(n)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                bp, bq = b[:, p], b[:, q]
                alpha = float(bp @ bp)
                beta = float(bq @ bq)
                gamma = float(bp @ bq)
                if alpha * beta == 0.0 or abs(gamma) <= _JACOBI_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * bp - s * bq
                new_q = s * bp + c * bq
                b[:, p], b[:, q] = new_p, new_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericFailureError(
            f"Jacobi SVD did not converge within {max_sweeps} sweeps",
            iterations=max_sweeps,
        )
    sigma = np.sqrt(np.sum(b * b, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    b = b[:, order]
    v = v[:, order]
    u = np.zeros((m, n))
    scale = sigma[0] if sigma.size and sigma[0] > 0 else 1.0
    dead = []
    for j in range(n):
        if sigma[j] > scale * 1e-300 and sigma[j] > 0:
            u[:, j] = b[:, j] / sigma[j]
        else:
            dead.append(j)
    if dead:
        _orthonormal_fill(u, dead)
    return u, sigma, v


def svd(a: Matrix, max_sweeps: int = 60) -> tuple[Matrix, np.ndarray, Matrix]:
    """Thin SVD ``a = U diag(s) V.T`` with s non-increasing.

    Raises NumericFailureError (carrying the sweep count) if the rotation
    sweeps do not converge.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidArgumentError("svd expects a 2-D matrix")
    if a.shape[0] >= a.shape[1]:
        return _jacobi_tall(a, max_sweeps)
    ut, sigma, vt = _jacobi_tall(a.T, max_sweeps)
    return vt, sigma, ut


def topk_svd(a: Matrix, k: int, max_sweeps: int = 60) -> tuple[Matrix, np.ndarray]:
    """Top-k left singular vectors and singular values of ``a``."""
    a = np.asarray(a, dtype=np.float64)
    if k < 1 or k > min(a.shape):
        raise InvalidArgumentError(
            f"k={k} outside [1, min{a.shape}] for a {a.shape[0]}x{a.shape[1]} matrix"
        )
    u, sigma, _ = svd(a, max_sweeps=max_sweeps)
    return u[:, :k], sigma[:k]


def singular_values(a: Matrix, k: int, max_sweeps: int = 60) -> np.ndarray:
    """Top-k singular values of ``a``, non-increasing."""
    _, sigma = topk_svd(a, k, max_sweeps=max_sweeps)
    return sigma
