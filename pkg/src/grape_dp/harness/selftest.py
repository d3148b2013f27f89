"""Reduced-scale property suites runnable via ``grape-dp selftest``.

These mirror the pytest suite's invariants at smaller sample counts so a
deployment can sanity-check itself in a few seconds.
"""

from __future__ import annotations

import numpy as np

from .. import dp_core, memory_model, optimizers
from ..models import Dataset, ModelSpec, init_params
from ..projection import SubspaceSchedule, projector
from ..tensor import RngStream, gaussian_matrix
from .datasets import load_dataset

GOLDEN_SEED0 = (
    -0.45275774021745807,
    2.650605812079669,
    -0.9886041246243285,
    0.252462724150614,
)


def _check(name: str, ok: bool, detail: str = "") -> bool:
    status = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    print(f"[selftest] {status} {name}{suffix}")
    return ok


def _rng_checks() -> bool:
    first = RngStream(0).normals(4)
    ok = bool(np.allclose(first, GOLDEN_SEED0, rtol=0, atol=1e-15))
    a = gaussian_matrix(RngStream(3), 5, 4, 0.25)
    b = gaussian_matrix(RngStream(3), 5, 4, 0.25)
    ok &= bool(np.array_equal(a, b))
    return _check("rng golden vector and determinism", ok)


def _clip_checks() -> bool:
    stream = RngStream(11)
    ok = True
    for i in range(1000):
        v = stream.advance(16 * i).normals(16) * (i % 7 + 0.5)
        c = 0.5 + (i % 5)
        out = dp_core.clip(v, c)
        ok &= np.linalg.norm(out) <= c
        ok &= np.array_equal(dp_core.clip(out, c), out)
    return _check("clip norm bound and bit-exact idempotence", ok)


def _calibration_checks() -> bool:
    sigma = dp_core.calibrate_sigma(100, 1000, 2.0, 1e-5)
    ok = abs(sigma - 0.0339307) < 1e-6
    try:
        dp_core.calibrate_sigma(100, 1000, 6.0 * np.log(2.0 / 1e-5), 1e-5)
        ok = False
    except dp_core.CalibrationError:
        pass
    return _check("closed-form sigma and epsilon bound", ok, f"sigma={sigma:.7f}")


def _projection_checks() -> bool:
    m, r, trials = 64, 8, 20000
    g = RngStream(5).normals(m)
    g /= np.linalg.norm(g)
    acc = np.zeros(m)
    sq = 0.0
    base = RngStream(17)
    for i in range(trials):
        p = gaussian_matrix(RngStream(base.seed, i * m * r), m, r, 1.0 / r)
        pg = p.T @ g
        acc += p @ pg
        sq += float(pg @ pg)
    bias = np.linalg.norm(acc / trials - g)
    ratio = sq / trials
    ok = bias <= 0.05 and 0.95 <= ratio <= 1.05
    return _check("projection unbiasedness and norm preservation", ok,
                  f"bias={bias:.4f} ratio={ratio:.4f}")


def _seed_regen_checks() -> bool:
    sched = SubspaceSchedule(4, 10, 123, 3)
    ok = True
    for t in (1, 9, 10, 11, 20):
        for layer in range(3):
            a = projector(sched, t, layer, 12)
            b = projector(sched, t, layer, 12)
            ok &= np.array_equal(a, b)
    ok &= not np.array_equal(projector(sched, 9, 0, 12), projector(sched, 10, 0, 12))
    return _check("projector seed regeneration", ok)


def _reduction_checks() -> bool:
    spec = ModelSpec.mlp([6, 8, 8], activation="tanh", loss="cross-entropy")
    data = load_dataset("synthetic-gaussian", n=32, dim=6, classes=8, stream=RngStream(2))
    batch = data.subset(np.arange(16))
    hyper = optimizers.AdamHyper(eta=0.02)

    p1 = init_params(spec, RngStream(7))
    p2 = init_params(spec, RngStream(7))
    s1 = optimizers.init_adam_state(p1, noise_seed=9)
    s2 = optimizers.init_projected_state(
        p2, 8, optimizers.grape_projected_layers(spec, 8), noise_seed=9
    )
    sched = SubspaceSchedule(8, 5, 99, spec.num_layers)
    priv = dp_core.PrivacySpec(clip=1.0, sigma=0.5)
    identity = lambda t, layer, m, r: np.eye(m)  # noqa: E731
    worst = 0.0
    for _ in range(10):
        optimizers.dp_adam_step(p1, batch, priv, s1, hyper)
        optimizers.dp_grape_step(p2, batch, sched, priv, s2, hyper, _projector_factory=identity)
        for a, b in zip(p1.weights, p2.weights):
            worst = max(worst, float(np.max(np.abs(a - b))))
    return _check("identity-projector DP-GRAPE matches DP-Adam", worst <= 1e-9,
                  f"max diff {worst:.2e}")


def _sensitivity_checks() -> bool:
    spec = ModelSpec.mlp([5, 4, 2], activation="tanh", loss="cross-entropy")
    params = init_params(spec, RngStream(3))
    data = load_dataset("synthetic-gaussian", n=64, dim=5, classes=2, stream=RngStream(4))
    samples = data.subset(np.arange(8)).samples()
    candidates = data.subset(np.arange(8, 64)).samples()
    c = 0.7

    def sum_fn(items):
        return optimizers.full_grad_clipped_sum(params, Dataset.from_samples(items), c)

    worst = dp_core.sensitivity_probe(sum_fn, samples, candidates, c, 100, RngStream(5))
    ok = worst <= 2 * c + 1e-9
    return _check("replace-one sensitivity within 2C", ok, f"max {worst:.4f} vs {2*c}")


def _memory_checks() -> bool:
    spec = ModelSpec.mlp([16, 24, 12], activation="tanh", loss="cross-entropy",
                         include_bias=False)
    ok = True
    for method in ("dp-grape", "dp-adam"):
        predicted = memory_model.predict_memory(method, spec.layer_dims, 8, 4)
        measured = memory_model.tracked_run(method, spec, 8, 4, steps=2)
        for cat in (memory_model.GRADIENTS, memory_model.OPTIMIZER_STATES):
            want = predicted.as_dict()[cat]
            got = measured[cat]
            ok &= abs(got - want) <= 0.1 * want
    return _check("memory predictions match tracked runs", ok)


def run_selftest() -> int:
    checks = [
        _rng_checks(),
        _clip_checks(),
        _calibration_checks(),
        _projection_checks(),
        _seed_regen_checks(),
        _reduction_checks(),
        _sensitivity_checks(),
        _memory_checks(),
    ]
    failed = checks.count(False)
    print(f"[selftest] {len(checks) - failed}/{len(checks)} suites passed")
    return 1 if failed else 0
