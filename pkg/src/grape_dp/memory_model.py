"""Symbolic memory accounting plus a runtime buffer tracker.

Accounting counts float64 slots in four categories (gradients, optimizer
states, projectors, and the transient one-layer-at-a-time per-sample block),
matching the cost model the optimizers are designed around. Activations and
weights are deliberately excluded.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError

METHODS = ("adam", "galore", "dp-adam", "naive-dp-galore", "dp-grape")

GRADIENTS = "gradients"
OPTIMIZER_STATES = "optimizer_states"
PROJECTORS = "projectors"
TRANSIENT = "per_sample_transient"
CATEGORIES = (GRADIENTS, OPTIMIZER_STATES, PROJECTORS, TRANSIENT)


@dataclass
class MemoryReport:
    """Predicted float counts for one method on one model shape."""

    method: str
    gradient_floats: int
    optimizer_state_floats: int
    projector_floats: int

    @property
    def total_floats(self) -> int:
        return self.gradient_floats + self.optimizer_state_floats + self.projector_floats

    @property
    def bytes(self) -> int:
        return 8 * self.total_floats

    def as_dict(self) -> dict[str, int]:
        return {
            GRADIENTS: self.gradient_floats,
            OPTIMIZER_STATES: self.optimizer_state_floats,
            PROJECTORS: self.projector_floats,
        }


def predict_memory(method: str, layer_dims, batch: int, rank: int) -> MemoryReport:
    """Evaluate the per-method float counts for an L-layer model.

    ``layer_dims`` is the (out, in) shape list; gradient counts cover the
    batch gradient for non-private methods and all per-sample gradients for
    private ones.
    """
    if method not in METHODS:
        raise InvalidArgumentError(f"unknown method {method!r}; expected one of {METHODS}")
    if batch < 0 or rank < 1:
        raise InvalidArgumentError("batch must be >= 0 and rank >= 1")
    sum_mn = sum(m * n for m, n in layer_dims)
    sum_n = sum(n for _, n in layer_dims)
    sum_m = sum(m for m, _ in layer_dims)
    max_m = max(m for m, _ in layer_dims)
    if method == "adam":
        return MemoryReport(method, sum_mn, 2 * sum_mn, 0)
    if method == "galore":
        return MemoryReport(method, sum_mn, 2 * rank * sum_n, rank * sum_m)
    if method == "dp-adam":
        return MemoryReport(method, batch * sum_mn, 2 * sum_mn, 0)
    if method == "naive-dp-galore":
        return MemoryReport(method, batch * sum_mn, 2 * rank * sum_n, rank * sum_m)
    return MemoryReport(method, batch * rank * sum_n, 2 * rank * sum_n, rank * max_m)


class MemoryTracker:
    """Current/peak float counts per category, fed by the optimizers."""

    def __init__(self):
        self._lock = threading.Lock()
        self.enabled = False
        self.reset()

    def reset(self) -> None:
        self.current = {c: 0 for c in CATEGORIES}
        self.peak = {c: 0 for c in CATEGORIES}
        self.events = 0

    def alloc(self, category: str, floats: int) -> None:
        if not self.enabled:
            return
        with self._lock:
            self.events += 1
            self.current[category] += int(floats)
            self.peak[category] = max(self.peak[category], self.current[category])

    def free(self, category: str, floats: int) -> None:
        if not self.enabled:
            return
        with self._lock:
            self.current[category] -= int(floats)

    @contextmanager
    def scoped(self, category: str, array: np.ndarray):
        """Track an array for the duration of a with-block."""
        self.alloc(category, array.size)
        try:
            yield array
        finally:
            self.free(category, array.size)


TRACKER = MemoryTracker()


def tracked_run(method: str, model_spec, batch: int, rank: int, steps: int = 3, seed: int = 0):
    """Run ``steps`` real optimizer steps under the tracker; return peaks.

    Builds a synthetic classification problem matching ``model_spec`` and
    drives the named method's step function. Raises a configuration error if
    the run never touched the tracking shim.
    """
    from . import optimizers  # deferred: optimizers imports this module
    from .harness.datasets import load_dataset
    from .models import init_params
    from .tensor import RngStream

    if method not in METHODS:
        raise InvalidArgumentError(f"unknown method {method!r}; expected one of {METHODS}")
    master = RngStream(seed)
    data = load_dataset(
        "synthetic-gaussian",
        n=max(batch, 2),
        dim=model_spec.feature_dim,
        classes=model_spec.output_dim if model_spec.loss == "cross-entropy" else 1,
        stream=master.derive(1),
    )
    batch_data = data.subset(np.arange(batch))
    params = init_params(model_spec, master.derive(2))
    step = optimizers.make_step(
        method,
        model_spec,
        rank=rank,
        refresh_every=2,
        priv_clip=1.0,
        priv_sigma=0.5,
        master_seed=seed,
    )
    TRACKER.reset()
    TRACKER.enabled = True
    try:
        for _ in range(steps):
            step(params, batch_data)
    finally:
        TRACKER.enabled = False
    if TRACKER.events == 0:
        raise ConfigurationError(
            "tracked_run saw no allocations; the step function is not routed "
            "through the tracking shim"
        )
    return dict(TRACKER.peak)


def report_csv(method: str, predicted: MemoryReport, measured: dict[str, int]) -> str:
    """CSV body comparing predicted and measured float counts."""
    lines = ["method,category,predicted,measured"]
    pred = predicted.as_dict()
    for cat in (GRADIENTS, OPTIMIZER_STATES, PROJECTORS):
        lines.append(f"{method},{cat},{pred[cat]},{measured.get(cat, 0)}")
    lines.append(f"{method},{TRANSIENT},,{measured.get(TRANSIENT, 0)}")
    return "\n".join(lines) + "\n"
