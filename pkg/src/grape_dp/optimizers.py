"""Training step functions: DP projected Adam, its baselines, and block SGD.

All privatized steps share one pipeline shape: per-sample gradients are
flattened into one clipping vector per sample (projected layer gradients where
applicable, bias gradients always at full dimension), clipped as a whole,
summed, passed once through the Gaussian mechanism, and averaged. Noise comes
from a dedicated stream stored in the optimizer state, independent of the
projector seeds.

Steps mutate ``params``/``state`` in place and return them; a step owns its
state exclusively for the step's duration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import memory_model as mem
from .dp_core import PrivacySpec, _clip_scales, gaussian_mechanism, require_mechanism_config
from .errors import ConfigurationError, InvalidArgumentError
from .models import Dataset, ModelSpec, Params, per_sample_grads
from .projection import (
    FlatLayout,
    SubspaceSchedule,
    back_project,
    project,
    project_batch,
    projector,
)
from .tensor import Matrix, RngStream, gaussian_matrix, hash_combine, topk_svd

# Test hook: factory(t, layer, m, rank) -> Matrix, replacing seeded projectors.
ProjectorFactory = Callable[[int, int, int, int], Matrix]


@dataclass(frozen=True)
class AdamHyper:
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    phi: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidArgumentError("decay rates must lie in [0, 1)")
        if not self.phi > 0:
            raise InvalidArgumentError("stability constant must be positive")

    def step_size(self, t: int) -> float:
        return self.eta * np.sqrt(1.0 - self.beta2 ** t) / (1.0 - self.beta1 ** t)


@dataclass
class AdamState:
    """Full-shape Adam moments, one (m, n) pair per layer."""

    step: int
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray] | None
    v_b: list[np.ndarray] | None
    noise: RngStream | None = None


@dataclass
class ProjectedState:
    """Projected Adam moments: (r, n) per projected layer, full shape elsewhere.

    ``p`` holds SVD projectors for the GaLore family; seeded methods
    regenerate projectors and keep nothing here.
    """

    step: int
    rank: int
    projected: list[bool]
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray] | None
    v_b: list[np.ndarray] | None
    p: list[Matrix | None] | None = None
    noise: RngStream | None = None


def _noise_stream(master_seed: int | None) -> RngStream | None:
    if master_seed is None:
        return None
    return RngStream(hash_combine(master_seed, 0x6E6F6973))  # "nois" tag


def init_adam_state(params: Params, noise_seed: int | None = None) -> AdamState:
    m_w = [np.zeros_like(w) for w in params.weights]
    v_w = [np.zeros_like(w) for w in params.weights]
    m_b = v_b = None
    if params.biases is not None:
        m_b = [np.zeros_like(b) for b in params.biases]
        v_b = [np.zeros_like(b) for b in params.biases]
    floats = 2 * sum(a.size for a in m_w)
    if m_b is not None:
        floats += 2 * sum(a.size for a in m_b)
    mem.TRACKER.alloc(mem.OPTIMIZER_STATES, floats)
    return AdamState(0, m_w, v_w, m_b, v_b, noise=_noise_stream(noise_seed))


def grape_projected_layers(spec: ModelSpec, rank: int) -> list[bool]:
    """DP-GRAPE projects a layer iff the rank does not exceed its rows."""
    return [rank <= m for m, _ in spec.layer_dims]


def svd_projected_layers(spec: ModelSpec, rank: int) -> list[bool]:
    """The GaLore family needs rank-many singular vectors to exist."""
    return [rank <= min(m, n) for m, n in spec.layer_dims]


def init_projected_state(
    params: Params,
    rank: int,
    projected: list[bool],
    svd_projectors: bool = False,
    noise_seed: int | None = None,
) -> ProjectedState:
    m_w, v_w = [], []
    for proj, (m, n) in zip(projected, params.spec.layer_dims):
        shape = (rank, n) if proj else (m, n)
        m_w.append(np.zeros(shape))
        v_w.append(np.zeros(shape))
    m_b = v_b = None
    if params.biases is not None:
        m_b = [np.zeros_like(b) for b in params.biases]
        v_b = [np.zeros_like(b) for b in params.biases]
    floats = 2 * sum(a.size for a in m_w)
    if m_b is not None:
        floats += 2 * sum(a.size for a in m_b)
    mem.TRACKER.alloc(mem.OPTIMIZER_STATES, floats)
    return ProjectedState(
        0,
        rank,
        list(projected),
        m_w,
        v_w,
        m_b,
        v_b,
        p=[None] * params.spec.num_layers if svd_projectors else None,
        noise=_noise_stream(noise_seed),
    )


# ---------------------------------------------------------------------------
# Shared pieces.
# ---------------------------------------------------------------------------


def _adam_direction(m: np.ndarray, v: np.ndarray, g: np.ndarray, hyper: AdamHyper) -> np.ndarray:
    """In-place moment update; returns m / (sqrt(v) + phi)."""
    assert m.shape == g.shape and v.shape == g.shape
    m *= hyper.beta1
    m += (1.0 - hyper.beta1) * g
    v *= hyper.beta2
    v += (1.0 - hyper.beta2) * (g * g)
    return m / (np.sqrt(v) + hyper.phi)


def _apply_adam_full(params, w_grads, b_grads, state: AdamState, hyper: AdamHyper, t: int):
    alpha = hyper.step_size(t)
    for idx, w in enumerate(params.weights):
        assert state.m_w[idx].shape == w.shape, "full Adam moments must match layer shape"
        w -= alpha * _adam_direction(state.m_w[idx], state.v_w[idx], w_grads[idx], hyper)
    if params.biases is not None:
        for idx, b in enumerate(params.biases):
            b -= alpha * _adam_direction(state.m_b[idx], state.v_b[idx], b_grads[idx], hyper)
    state.step = t


def _tracked_batch_grads(params: Params, batch: Dataset):
    """Mean-loss gradients with the batch-gradient buffers tracked."""
    spec = params.spec
    inv_b = 1.0 / len(batch)
    w_grads: list[np.ndarray | None] = [None] * spec.num_layers
    b_grads: list[np.ndarray | None] = [None] * spec.num_layers

    def visit(idx, block, bias_block):
        mem.TRACKER.alloc(mem.TRANSIENT, block.size)
        w_grads[idx] = np.sum(block, axis=0) * inv_b
        mem.TRACKER.alloc(mem.GRADIENTS, w_grads[idx].size)
        if bias_block is not None:
            b_grads[idx] = np.sum(bias_block, axis=0) * inv_b
            mem.TRACKER.alloc(mem.GRADIENTS, b_grads[idx].size)
        mem.TRACKER.free(mem.TRANSIENT, block.size)

    per_sample_grads(params, batch, visitor=visit)
    return w_grads, (b_grads if params.biases is not None else None)


def _free_grads(w_grads, b_grads):
    mem.TRACKER.free(mem.GRADIENTS, sum(g.size for g in w_grads))
    if b_grads is not None:
        mem.TRACKER.free(mem.GRADIENTS, sum(g.size for g in b_grads))


def full_layout(spec: ModelSpec) -> FlatLayout:
    return FlatLayout(
        list(spec.layer_dims),
        [m for m, _ in spec.layer_dims] if spec.include_bias else None,
    )


def _micro_ranges(total: int, micro: int | None):
    if micro is not None and micro < 1:
        raise InvalidArgumentError("micro-batch size must be >= 1")
    size = total if micro is None else min(micro, total)
    return [(lo, min(lo + size, total)) for lo in range(0, total, size)]


def _draw_noise(state, total: np.ndarray, c, sigma: float) -> np.ndarray:
    """Apply the Gaussian mechanism using the state's dedicated noise stream."""
    if sigma == 0:
        return total
    if state.noise is None:
        raise ConfigurationError(
            "state has no noise stream; initialize it with a noise_seed to add noise"
        )
    noised = gaussian_mechanism(total, c, sigma, state.noise)
    state.noise = state.noise.advance(total.size)
    return noised


def full_grad_clipped_sum(
    params: Params, batch: Dataset, c: float | None, micro_batch: int | None = None
) -> np.ndarray:
    """Sum of per-sample full-gradient vectors, each flat-clipped at ``c``.

    This is the pre-noise quantity DP-Adam and naive DP-GaLore privatize.
    Micro-batches are summed before any noise is drawn.
    """
    layout = full_layout(params.spec)
    slices = layout.slices()
    n_layers = params.spec.num_layers
    total = np.zeros(layout.dim)
    for lo, hi in _micro_ranges(len(batch), micro_batch):
        chunk = batch.subset(np.arange(lo, hi))
        flat = np.empty((len(chunk), layout.dim))
        mem.TRACKER.alloc(mem.GRADIENTS, flat.size)

        def visit(idx, block, bias_block):
            with mem.TRACKER.scoped(mem.TRANSIENT, block):
                flat[:, slices[idx]] = block.reshape(len(chunk), -1)
            if bias_block is not None:
                flat[:, slices[n_layers + idx]] = bias_block

        per_sample_grads(params, chunk, visitor=visit)
        if c is not None:
            flat *= _clip_scales(np.linalg.norm(flat, axis=1), c)[:, None]
        total += np.sum(flat, axis=0)
        mem.TRACKER.free(mem.GRADIENTS, flat.size)
    return total


# ---------------------------------------------------------------------------
# Plain Adam and DP-Adam.
# ---------------------------------------------------------------------------


def adam_step(params: Params, batch: Dataset, state: AdamState, hyper: AdamHyper):
    """One standard Adam step on the mean batch loss."""
    t = state.step + 1
    w_grads, b_grads = _tracked_batch_grads(params, batch)
    _apply_adam_full(params, w_grads, b_grads, state, hyper, t)
    _free_grads(w_grads, b_grads)
    return params, state


def dp_adam_step(
    params: Params,
    batch: Dataset,
    priv: PrivacySpec,
    state: AdamState,
    hyper: AdamHyper,
    micro_batch: int | None = None,
):
    """Per-sample flat clipping, one Gaussian-mechanism call, full-shape Adam."""
    c, sigma = require_mechanism_config(priv)
    t = state.step + 1
    total = full_grad_clipped_sum(params, batch, c, micro_batch)
    gtilde = _draw_noise(state, total, c, sigma) * (1.0 / len(batch))
    w_grads, b_grads = full_layout(params.spec).unflatten(gtilde)
    _apply_adam_full(params, w_grads, b_grads, state, hyper, t)
    return params, state


# ---------------------------------------------------------------------------
# GaLore and naive DP-GaLore (SVD projectors, kept in state between refreshes).
# ---------------------------------------------------------------------------


def _refresh_svd_projectors(state: ProjectedState, w_grads, rank: int):
    first_time = all(p is None for p in state.p)
    for idx, proj in enumerate(state.projected):
        if not proj:
            continue
        u, _ = topk_svd(w_grads[idx], rank)
        if first_time:
            mem.TRACKER.alloc(mem.PROJECTORS, u.size)
        state.p[idx] = u


def _apply_adam_projected_explicit(params, w_grads, b_grads, state, hyper, t):
    """Projected Adam update using the explicit projectors in ``state.p``."""
    alpha = hyper.step_size(t)
    for idx, w in enumerate(params.weights):
        if state.projected[idx]:
            r_mat = project(state.p[idx], w_grads[idx])
            assert state.m_w[idx].shape == r_mat.shape, "projected moments must be r x n"
            direction = _adam_direction(state.m_w[idx], state.v_w[idx], r_mat, hyper)
            w -= alpha * back_project(state.p[idx], direction)
        else:
            direction = _adam_direction(state.m_w[idx], state.v_w[idx], w_grads[idx], hyper)
            w -= alpha * direction
    if params.biases is not None:
        for idx, b in enumerate(params.biases):
            b -= alpha * _adam_direction(state.m_b[idx], state.v_b[idx], b_grads[idx], hyper)
    state.step = t


def galore_step(
    params: Params,
    batch: Dataset,
    state: ProjectedState,
    hyper: AdamHyper,
    refresh_every: int,
    rank: int,
):
    """Non-private projected Adam with top-r SVD subspaces of the batch gradient."""
    t = state.step + 1
    w_grads, b_grads = _tracked_batch_grads(params, batch)
    if t % refresh_every == 0 or any(
        state.p[i] is None for i, proj in enumerate(state.projected) if proj
    ):
        _refresh_svd_projectors(state, w_grads, rank)
    _apply_adam_projected_explicit(params, w_grads, b_grads, state, hyper, t)
    _free_grads(w_grads, b_grads)
    return params, state


def naive_dp_galore_step(
    params: Params,
    batch: Dataset,
    priv: PrivacySpec,
    state: ProjectedState,
    hyper: AdamHyper,
    refresh_every: int,
    rank: int,
    micro_batch: int | None = None,
):
    """Privatize full-dimensional gradients first, then SVD-project them.

    The subspace is computed from the already-privatized gradient, so the SVD
    consumes no extra privacy budget.
    """
    c, sigma = require_mechanism_config(priv)
    t = state.step + 1
    total = full_grad_clipped_sum(params, batch, c, micro_batch)
    gtilde = _draw_noise(state, total, c, sigma) * (1.0 / len(batch))
    w_grads, b_grads = full_layout(params.spec).unflatten(gtilde)
    if t % refresh_every == 0 or any(
        state.p[i] is None for i, proj in enumerate(state.projected) if proj
    ):
        _refresh_svd_projectors(state, w_grads, rank)
    _apply_adam_projected_explicit(params, w_grads, b_grads, state, hyper, t)
    return params, state


# ---------------------------------------------------------------------------
# DP-GRAPE: seeded random projections, privatized in the projected space.
# ---------------------------------------------------------------------------


def _grape_projector(
    schedule: SubspaceSchedule,
    t: int,
    layer: int,
    m: int,
    factory: ProjectorFactory | None,
) -> Matrix:
    if factory is not None:
        return factory(t, layer, m, schedule.rank)
    return projector(schedule, t, layer, m)


def grape_layout(spec: ModelSpec, rank: int, projected: list[bool]) -> FlatLayout:
    shapes = [
        (rank, n) if proj else (m, n)
        for proj, (m, n) in zip(projected, spec.layer_dims)
    ]
    return FlatLayout(shapes, [m for m, _ in spec.layer_dims] if spec.include_bias else None)


def dp_grape_clipped_sum(
    params: Params,
    batch: Dataset,
    schedule: SubspaceSchedule,
    t: int,
    c: float | None,
    micro_batch: int | None = None,
    projected: list[bool] | None = None,
    _projector_factory: ProjectorFactory | None = None,
) -> tuple[np.ndarray, FlatLayout]:
    """Pre-noise sum of flat-clipped projected per-sample gradients at step t.

    Projection happens layer by layer during the backward pass, so at most one
    layer's full per-sample gradient block exists at any instant.
    """
    spec = params.spec
    if schedule.n_layers != spec.num_layers:
        raise InvalidArgumentError("schedule layer count does not match the model")
    if projected is None:
        projected = grape_projected_layers(spec, schedule.rank)
    layout = grape_layout(spec, schedule.rank, projected)
    slices = layout.slices()
    n_layers = spec.num_layers
    total = np.zeros(layout.dim)
    for lo, hi in _micro_ranges(len(batch), micro_batch):
        chunk = batch.subset(np.arange(lo, hi))
        flat = np.empty((len(chunk), layout.dim))
        mem.TRACKER.alloc(mem.GRADIENTS, flat.size)

        def visit(idx, block, bias_block):
            with mem.TRACKER.scoped(mem.TRANSIENT, block):
                if projected[idx]:
                    p = _grape_projector(schedule, t, idx, block.shape[1], _projector_factory)
                    with mem.TRACKER.scoped(mem.PROJECTORS, p):
                        flat[:, slices[idx]] = project_batch(p, block).reshape(len(chunk), -1)
                else:
                    flat[:, slices[idx]] = block.reshape(len(chunk), -1)
            if bias_block is not None:
                flat[:, slices[n_layers + idx]] = bias_block

        per_sample_grads(params, chunk, visitor=visit)
        if c is not None:
            flat *= _clip_scales(np.linalg.norm(flat, axis=1), c)[:, None]
        total += np.sum(flat, axis=0)
        mem.TRACKER.free(mem.GRADIENTS, flat.size)
    return total, layout


def adam_update_projected(
    params: Params,
    rt_layers: list[np.ndarray],
    rt_biases: list[np.ndarray] | None,
    schedule: SubspaceSchedule,
    t: int,
    state: ProjectedState,
    hyper: AdamHyper,
    _projector_factory: ProjectorFactory | None = None,
):
    """Adam on projected moments; projectors regenerated from schedule seeds."""
    alpha = hyper.step_size(t)
    for idx, w in enumerate(params.weights):
        assert state.m_w[idx].shape == rt_layers[idx].shape, (
            "projected moments must match the privatized gradient shape"
        )
        direction = _adam_direction(state.m_w[idx], state.v_w[idx], rt_layers[idx], hyper)
        if state.projected[idx]:
            p = _grape_projector(schedule, t, idx, w.shape[0], _projector_factory)
            with mem.TRACKER.scoped(mem.PROJECTORS, p):
                w -= alpha * back_project(p, direction)
        else:
            w -= alpha * direction
    if params.biases is not None:
        for idx, b in enumerate(params.biases):
            b -= alpha * _adam_direction(state.m_b[idx], state.v_b[idx], rt_biases[idx], hyper)
    state.step = t
    return params, state


def dp_grape_step(
    params: Params,
    batch: Dataset,
    schedule: SubspaceSchedule,
    priv: PrivacySpec,
    state: ProjectedState,
    hyper: AdamHyper,
    micro_batch: int | None = None,
    reset_moments_on_refresh: bool = False,
    _projector_factory: ProjectorFactory | None = None,
):
    """One DP-GRAPE step: project per layer, clip flat, privatize, update.

    Moments are kept across subspace refreshes by default;
    ``reset_moments_on_refresh`` zeroes the projected moments instead
    (ablation only).
    """
    c, sigma = require_mechanism_config(priv)
    t = state.step + 1
    if reset_moments_on_refresh and schedule.refreshed_at(t):
        for idx, proj in enumerate(state.projected):
            if proj:
                state.m_w[idx][:] = 0.0
                state.v_w[idx][:] = 0.0
    total, layout = dp_grape_clipped_sum(
        params,
        batch,
        schedule,
        t,
        c,
        micro_batch=micro_batch,
        projected=state.projected,
        _projector_factory=_projector_factory,
    )
    rtilde = _draw_noise(state, total, c, sigma) * (1.0 / len(batch))
    rt_layers, rt_biases = layout.unflatten(rtilde)
    return adam_update_projected(
        params, rt_layers, rt_biases, schedule, t, state, hyper, _projector_factory
    )


# ---------------------------------------------------------------------------
# Generalized block SGD on a flat parameter vector.
# ---------------------------------------------------------------------------

PerSampleGradFn = Callable[[np.ndarray, Dataset], np.ndarray]


def _check_partition(partition: Sequence[np.ndarray], dim: int) -> list[np.ndarray]:
    blocks = [np.asarray(b, dtype=np.int64) for b in partition]
    merged = np.concatenate(blocks) if blocks else np.zeros(0, dtype=np.int64)
    if len(merged) != dim or not np.array_equal(np.sort(merged), np.arange(dim)):
        raise InvalidArgumentError("partition must cover all indices exactly once")
    return blocks


def block_clipped_sum(
    w: np.ndarray,
    partition: Sequence[np.ndarray],
    grad_fn: PerSampleGradFn,
    batch: Dataset,
    rank: int,
    c: float | None,
    stream: RngStream,
) -> np.ndarray:
    """Pre-noise sum of the flat-clipped (rank x blocks) projection matrices."""
    blocks = _check_partition(partition, w.size)
    grads = grad_fn(w, batch)
    rows = np.empty((len(batch), rank * len(blocks)))
    for idx, block in enumerate(blocks):
        p = gaussian_matrix(stream.derive(1, idx), len(block), rank, 1.0 / rank)
        rows[:, idx * rank : (idx + 1) * rank] = grads[:, block] @ p
    if c is not None:
        rows *= _clip_scales(np.linalg.norm(rows, axis=1), c)[:, None]
    return np.sum(rows, axis=0)


def block_sgd_step(
    w: np.ndarray,
    partition: Sequence[np.ndarray],
    grad_fn: PerSampleGradFn,
    batch: Dataset,
    priv: PrivacySpec,
    rank: int,
    eta: float,
    stream: RngStream,
) -> np.ndarray:
    """Generalized block-projected DP-SGD step on a flat parameter vector.

    Each block gets ``rank`` fresh Gaussian directions; the per-sample
    (rank x blocks) projection matrices are clipped flat as a whole; per-block
    noise with standard deviation ``clip * sigma`` is added to the *averaged*
    projection (the sigma convention folds the threshold in) and the update is
    mapped back through the same directions.
    """
    c, sigma = require_mechanism_config(priv)
    blocks = _check_partition(partition, w.size)
    total = block_clipped_sum(w, partition, grad_fn, batch, rank, c, stream)
    mean = total * (1.0 / len(batch))
    noise_std = (c if c is not None else 1.0) * sigma
    out = w.copy()
    for idx, block in enumerate(blocks):
        rt = mean[idx * rank : (idx + 1) * rank]
        if sigma > 0:
            rt = rt + noise_std * stream.derive(2, idx).normals(rank)
        p = gaussian_matrix(stream.derive(1, idx), len(block), rank, 1.0 / rank)
        out[block] -= eta * (p @ rt)
    return out


# ---------------------------------------------------------------------------
# Step factory used by the harness and the memory tracker.
# ---------------------------------------------------------------------------


def flat_per_sample_grad_fn(params_template: Params) -> PerSampleGradFn:
    """Adapt a model to the flat-vector interface block SGD expects."""
    spec = params_template.spec
    layout = full_layout(spec)
    slices = layout.slices()
    n_layers = spec.num_layers

    def grad_fn(w_flat: np.ndarray, batch: Dataset) -> np.ndarray:
        weights, biases = layout.unflatten(w_flat)
        p = Params(spec, [np.array(x) for x in weights],
                   None if biases is None else [np.array(b) for b in biases])
        rows = np.empty((len(batch), layout.dim))

        def visit(idx, block, bias_block):
            rows[:, slices[idx]] = block.reshape(len(batch), -1)
            if bias_block is not None:
                rows[:, slices[n_layers + idx]] = bias_block

        per_sample_grads(p, batch, visitor=visit)
        return rows

    return grad_fn


def make_step(
    method: str,
    spec: ModelSpec,
    rank: int,
    refresh_every: int,
    priv_clip: float | None,
    priv_sigma: float | None,
    master_seed: int,
    hyper: AdamHyper | None = None,
    micro_batch: int | None = None,
):
    """Closure running one step of the named method; state created lazily."""
    hyper = hyper or AdamHyper()
    priv = PrivacySpec(clip=priv_clip, sigma=priv_sigma)
    schedule = SubspaceSchedule(rank, refresh_every, master_seed, spec.num_layers)
    box: dict = {}

    def step(params: Params, batch: Dataset):
        if method in ("adam", "dp-adam"):
            if "state" not in box:
                box["state"] = init_adam_state(params, noise_seed=master_seed)
            if method == "adam":
                return adam_step(params, batch, box["state"], hyper)
            return dp_adam_step(params, batch, priv, box["state"], hyper, micro_batch)
        if method in ("galore", "naive-dp-galore"):
            if "state" not in box:
                box["state"] = init_projected_state(
                    params, rank, svd_projected_layers(spec, rank),
                    svd_projectors=True, noise_seed=master_seed,
                )
            if method == "galore":
                return galore_step(params, batch, box["state"], hyper, refresh_every, rank)
            return naive_dp_galore_step(
                params, batch, priv, box["state"], hyper, refresh_every, rank, micro_batch
            )
        if method == "dp-grape":
            if "state" not in box:
                box["state"] = init_projected_state(
                    params, rank, grape_projected_layers(spec, rank),
                    noise_seed=master_seed,
                )
            return dp_grape_step(
                params, batch, schedule, priv, box["state"], hyper, micro_batch
            )
        raise InvalidArgumentError(f"unknown method {method!r}")

    return step
