"""Seeded projector lifecycle: schedules, project/back-project, flattening.

Projectors are never stored across steps; they are regenerated bit-exactly
from per-layer seeds derived as hash(master_seed, t - t mod F, layer), so the
backward pass and the weight update see the same matrix without keeping it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .tensor import Matrix, RngStream, gaussian_matrix, hash_combine


@dataclass(frozen=True)
class SubspaceSchedule:
    """Projection rank, refresh frequency, and replayable per-layer seeds."""

    rank: int
    refresh_every: int
    master_seed: int
    n_layers: int

    def __post_init__(self):
        if self.rank < 1:
            raise InvalidArgumentError("rank must be >= 1")
        if self.refresh_every < 1:
            raise InvalidArgumentError("refresh frequency must be >= 1")
        if self.n_layers < 1:
            raise InvalidArgumentError("need at least one layer")

    def epoch(self, t: int) -> int:
        """Step at which the seeds in force at step t were generated."""
        return t - (t % self.refresh_every)

    def refreshed_at(self, t: int) -> bool:
        return t % self.refresh_every == 0

    def seeds_at(self, t: int) -> tuple[int, ...]:
        """Per-layer seeds in force at step t; distinct across layers."""
        epoch = self.epoch(t)
        seeds = [hash_combine(self.master_seed, epoch, layer) for layer in range(self.n_layers)]
        salt = 0
        while len(set(seeds)) < len(seeds):  # 64-bit collisions: effectively never
            salt += 1
            seen: set[int] = set()
            for i, s in enumerate(seeds):
                while s in seen:
                    s = hash_combine(s, salt)
                seen.add(s)
                seeds[i] = s
        return tuple(seeds)


def projector(schedule: SubspaceSchedule, t: int, layer: int, m: int) -> Matrix:
    """The m x r Gaussian projector for (step, layer), entries N(0, 1/r)."""
    r = schedule.rank
    if r > m:
        warnings.warn(
            f"rank {r} exceeds layer rows {m}; projection would expand this layer",
            stacklevel=2,
        )
    seed = schedule.seeds_at(t)[layer]
    return gaussian_matrix(RngStream(seed), m, r, 1.0 / r)


def project(p: Matrix, g: Matrix) -> Matrix:
    """R = P^T G, mapping an m x n gradient into the r x n subspace."""
    if p.shape[0] != g.shape[0]:
        raise InvalidArgumentError(f"row counts differ: P {p.shape}, G {g.shape}")
    return p.T @ g


def project_batch(p: Matrix, blocks: np.ndarray) -> np.ndarray:
    """Apply :func:`project` to a (B, m, n) stack, yielding (B, r, n)."""
    if p.shape[0] != blocks.shape[1]:
        raise InvalidArgumentError(f"row counts differ: P {p.shape}, blocks {blocks.shape}")
    return np.einsum("mr,bmn->brn", p, blocks)


def back_project(p: Matrix, r: Matrix) -> Matrix:
    """P R, mapping an r x n update back to the m x n layer shape."""
    if p.shape[1] != r.shape[0]:
        raise InvalidArgumentError(f"inner dims differ: P {p.shape}, R {r.shape}")
    return p @ r


@dataclass
class FlatLayout:
    """Shapes of the per-sample segments that form one flat clipping vector."""

    weight_shapes: list[tuple[int, int]]
    bias_sizes: list[int] | None = None

    @property
    def dim(self) -> int:
        total = sum(m * n for m, n in self.weight_shapes)
        if self.bias_sizes is not None:
            total += sum(self.bias_sizes)
        return total

    def slices(self) -> list[slice]:
        out, pos = [], 0
        for m, n in self.weight_shapes:
            out.append(slice(pos, pos + m * n))
            pos += m * n
        if self.bias_sizes is not None:
            for size in self.bias_sizes:
                out.append(slice(pos, pos + size))
                pos += size
        return out

    def unflatten(self, flat: np.ndarray):
        """Split a flat vector back into (weight-shaped mats, bias vectors)."""
        if flat.size != self.dim:
            raise InvalidArgumentError(f"flat length {flat.size} != layout dim {self.dim}")
        cuts = self.slices()
        n_w = len(self.weight_shapes)
        weights = [flat[cuts[i]].reshape(self.weight_shapes[i]) for i in range(n_w)]
        biases = None
        if self.bias_sizes is not None:
            biases = [flat[cuts[n_w + i]] for i in range(len(self.bias_sizes))]
        return weights, biases


@dataclass
class ProjectedGrads:
    """Per-sample projected gradients: (B, r, n) per layer, or (B, m, n) when
    a layer is too small to project; bias gradients stay at full dimension."""

    layers: list[np.ndarray]
    projected: list[bool]
    biases: list[np.ndarray] | None = None

    @property
    def batch_size(self) -> int:
        return self.layers[0].shape[0]

    def layout(self) -> FlatLayout:
        shapes = [(blk.shape[1], blk.shape[2]) for blk in self.layers]
        sizes = [b.shape[1] for b in self.biases] if self.biases is not None else None
        return FlatLayout(shapes, sizes)


def flatten_for_clipping(pg: ProjectedGrads, sample: int) -> np.ndarray:
    """Sample's projected layer grads and bias grads as one flat vector."""
    if not 0 <= sample < pg.batch_size:
        raise InvalidArgumentError(f"sample index {sample} out of range")
    parts = [blk[sample].ravel() for blk in pg.layers]
    if pg.biases is not None:
        parts.extend(b[sample] for b in pg.biases)
    return np.concatenate(parts)


def flatten_batch(pg: ProjectedGrads) -> np.ndarray:
    """All samples' flat clipping vectors as a (B, D) matrix."""
    parts = [blk.reshape(pg.batch_size, -1) for blk in pg.layers]
    if pg.biases is not None:
        parts.extend(pg.biases)
    return np.concatenate(parts, axis=1)
