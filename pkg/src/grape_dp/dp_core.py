"""Clipping, the Gaussian mechanism, noise calibration, and sensitivity probes.

Noise convention: ``sigma`` is always a multiplier of the clipping threshold,
i.e. the mechanism adds noise with standard deviation ``C * sigma``. The
closed-form calibration is stated per batch *sum*; entry points that fold the
threshold into sigma convert at the boundary.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import CalibrationError, ConfigurationError, InvalidArgumentError
from .tensor import RngStream

# Clip scales are shaved by one part in 2^48 so the clipped norm is strictly
# below C in floating point, which makes clipping idempotent bit-for-bit.
_CLIP_NUDGE = 1.0 - 2.0 ** -48


@dataclass
class PrivacySpec:
    """Privacy target and mechanism parameters for one training run."""

    epsilon: float | None = None
    delta: float | None = None
    clip: float | None = None  # None disables clipping
    sigma: float | None = None  # noise std = clip * sigma
    steps: int = 1
    n: int = 1
    batch: int = 1

    def __post_init__(self):
        if self.delta is not None and not 0.0 < self.delta < 1.0:
            raise InvalidArgumentError(f"delta must lie in (0,1), got {self.delta}")
        if self.clip is not None and not self.clip > 0:
            raise InvalidArgumentError(f"clip threshold must be positive, got {self.clip}")
        if self.sigma is not None and self.sigma < 0:
            raise InvalidArgumentError(f"sigma must be non-negative, got {self.sigma}")

    def resolved_sigma(self) -> float:
        """Explicit sigma if given, else the closed-form calibration."""
        if self.sigma is not None:
            return self.sigma
        if self.epsilon is None or self.delta is None:
            raise CalibrationError(
                "need either an explicit sigma or an (epsilon, delta) target"
            )
        return calibrate_sigma(self.steps, self.n, self.epsilon, self.delta, batch=self.batch)

    def with_resolved_sigma(self) -> "PrivacySpec":
        return PrivacySpec(
            epsilon=self.epsilon,
            delta=self.delta,
            clip=self.clip,
            sigma=self.resolved_sigma(),
            steps=self.steps,
            n=self.n,
            batch=self.batch,
        )


def calibrate_sigma(
    steps: int, n: int, epsilon: float, delta: float, batch: int | None = None
) -> float:
    """Noise multiplier making ``steps`` privatized sums (eps, delta)-DP.

    Returns 2*sqrt(steps*log(1/delta)) / (n*epsilon); the clipping threshold
    is applied at mechanism time. Valid for 0 < eps <= 2*ln(2/delta); warns
    when eps > 2*B^2*steps/n^2, the regime the guarantee was derived for.
    """
    if not 0.0 < delta < 1.0:
        raise CalibrationError(f"delta must lie in (0,1), got {delta}")
    if not epsilon > 0:
        raise CalibrationError(f"epsilon must be positive, got {epsilon}")
    bound = 2.0 * math.log(2.0 / delta)
    if epsilon > bound:
        raise CalibrationError(
            f"epsilon={epsilon} exceeds the validity bound 2*ln(2/delta)={bound:.6g}"
        )
    if steps < 1 or n < 1:
        raise CalibrationError("steps and n must be positive")
    if batch is not None and epsilon > 2.0 * batch * batch * steps / (n * n):
        warnings.warn(
            f"epsilon={epsilon} exceeds 2*B^2*T/n^2="
            f"{2.0 * batch * batch * steps / (n * n):.6g}; the closed-form "
            "guarantee was derived for the smaller-epsilon regime",
            stacklevel=2,
        )
    return 2.0 * math.sqrt(steps * math.log(1.0 / delta)) / (n * epsilon)


def epsilon_spent(steps_so_far: int, n: int, sigma: float, delta: float) -> float:
    """Closed-form epsilon consumed after ``steps_so_far`` privatized sums."""
    if sigma <= 0:
        return math.inf
    if steps_so_far <= 0:
        return 0.0
    return 2.0 * math.sqrt(steps_so_far * math.log(1.0 / delta)) / (n * sigma)


def _clip_scales(norms: np.ndarray, c: float) -> np.ndarray:
    return np.where(norms > c, np.divide(c, norms, out=np.ones_like(norms), where=norms > 0) * _CLIP_NUDGE, 1.0)


def clip(v: np.ndarray, c: float | None) -> np.ndarray:
    """Rescale ``v`` to l2 norm at most ``c``; identity inside the ball.

    ``c=None`` disables clipping. Vectors already inside the ball come back
    unchanged bit-for-bit, so clipping is idempotent.
    """
    v = np.asarray(v, dtype=np.float64)
    if c is None:
        return v
    return clip_batch(v[None, :], c)[0]


def clip_batch(rows: np.ndarray, c: float | None) -> np.ndarray:
    """Row-wise :func:`clip` of a (B, D) matrix."""
    rows = np.asarray(rows, dtype=np.float64)
    if c is None:
        return rows
    if not c > 0:
        raise InvalidArgumentError(f"clip threshold must be positive, got {c}")
    norms = np.linalg.norm(rows, axis=1)
    return rows * _clip_scales(norms, c)[:, None]


def gaussian_mechanism(
    v: np.ndarray, c: float | None, sigma: float, stream: RngStream
) -> np.ndarray:
    """``v`` plus i.i.d. Gaussian noise of standard deviation ``c * sigma``.

    Pure in (v, c, sigma, stream); sigma=0 returns ``v`` unchanged. With
    clipping disabled the multiplier acts as an absolute noise scale.
    """
    v = np.asarray(v, dtype=np.float64)
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0.0:
        return v.copy()
    std = (c if c is not None else 1.0) * sigma
    return v + std * stream.normals(v.size).reshape(v.shape)


SumFn = Callable[[Sequence], np.ndarray]


def sensitivity_probe(
    sum_fn: SumFn,
    samples: Sequence,
    candidates: Sequence,
    c: float | None,
    swaps: int,
    stream: RngStream,
) -> float:
    """Max l2 change of a pre-noise clipped sum under replace-one swaps.

    ``sum_fn`` maps a sample sequence to the flat clipped sum a privatized
    optimizer would feed to the Gaussian mechanism. The returned maximum must
    stay within the theoretical replace-one bound 2c.
    """
    if c is None:
        raise InvalidArgumentError(
            "sensitivity probe needs a finite clip threshold; unclipped sums are unbounded"
        )
    if swaps < 1:
        raise InvalidArgumentError("need at least one swap")
    samples = list(samples)
    candidates = list(candidates)
    base = np.asarray(sum_fn(samples), dtype=np.float64)
    which = stream.integers(swaps, len(samples))
    repl = stream.advance(swaps).integers(swaps, len(candidates))
    worst = 0.0
    for i, j in zip(which, repl):
        swapped = list(samples)
        swapped[int(i)] = candidates[int(j)]
        delta = np.asarray(sum_fn(swapped), dtype=np.float64) - base
        worst = max(worst, float(np.linalg.norm(delta)))
    return worst


def require_mechanism_config(priv: PrivacySpec) -> tuple[float | None, float]:
    """Validate the (clip, sigma) pairing a privatized step needs.

    Returns (clip, sigma). Clipping enabled with no sigma is a configuration
    error (nothing to scale the noise by would silently yield no privacy);
    sigma > 0 with clipping disabled has unbounded sensitivity.
    """
    if priv.clip is not None and priv.sigma is None:
        raise ConfigurationError(
            "sigma is not set; calibrate it from (epsilon, delta) or pass sigma=0 explicitly"
        )
    sigma = priv.sigma if priv.sigma is not None else 0.0
    if priv.clip is None and sigma > 0:
        raise ConfigurationError(
            "noise without clipping has unbounded sensitivity; enable clipping or set sigma=0"
        )
    return priv.clip, sigma
