"""Training runs and the gradient-spectrum study, persisted as CSV.

Every output byte is a pure function of (config, master seed): randomness
flows through derived RngStreams and wall-clock timings go to stderr only,
with the CSV's walltime_ms column pinned to 0.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import dp_core, optimizers
from ..errors import ConfigurationError, InvalidArgumentError
from ..models import Dataset, Params, init_params, loss_and_predictions, per_sample_grads
from ..tensor import RngStream, singular_values
from .config import ExperimentConfig
from .datasets import load_dataset

# Stream derivation tags (arbitrary fixed integers).
_TAG_DATA = 0xDA
_TAG_SPLIT = 0x51
_TAG_INIT = 0x11
_TAG_SHUFFLE = 0xE0
_TAG_BLOCK = 0xB1
_TAG_TAU = 0x7A
_TAG_SPECTRUM = 0x5C


@dataclass
class RunRecord:
    step: int
    loss: float
    accuracy: float
    epsilon: float
    walltime_ms: float


def _load_from_config(cfg: ExperimentConfig, master: RngStream) -> Dataset:
    return load_dataset(
        cfg.data_source,
        n=cfg.data_n,
        dim=cfg.data_dim,
        classes=cfg.data_classes,
        margin=cfg.data_margin,
        images=cfg.data_images or None,
        labels=cfg.data_labels or None,
        stream=master.derive(_TAG_DATA),
    )


def _split(data: Dataset, fraction: float, master: RngStream):
    n = len(data)
    perm = np.argsort(master.derive(_TAG_SPLIT).uniforms(n), kind="stable")
    n_eval = int(round(fraction * n))
    return data.subset(perm[n_eval:]), data.subset(perm[:n_eval])


def _evaluate(params: Params, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    if params.spec.loss != "cross-entropy":
        return float("nan")
    _, preds = loss_and_predictions(params, data)
    return float(np.mean(preds == data.y))


def _format_row(rec: RunRecord) -> str:
    return (
        f"{rec.step},{rec.loss:.12g},{rec.accuracy:.12g},"
        f"{rec.epsilon:.12g},{rec.walltime_ms:.12g}"
    )


def resolve_privacy(cfg: ExperimentConfig, n_train: int, steps: int) -> dp_core.PrivacySpec:
    """PrivacySpec for the run, with sigma resolved and delta defaulted to 1/n."""
    delta = cfg.delta if cfg.delta is not None else 1.0 / n_train
    spec = dp_core.PrivacySpec(
        epsilon=cfg.epsilon,
        delta=delta,
        clip=cfg.clip,
        sigma=cfg.sigma,
        steps=steps,
        n=n_train,
        batch=cfg.batch,
    )
    if not cfg.is_private:
        return spec
    if spec.clip is None and (spec.sigma is None or spec.sigma == 0):
        return spec  # fully disabled privatization (ablation)
    return spec.with_resolved_sigma()


def _header_lines(cfg: ExperimentConfig, n_train: int, steps: int, priv) -> list[str]:
    lines = [
        "# grape-dp train",
        f"# method={cfg.method} seed={cfg.seed} steps={steps} batch={cfg.batch}",
        "# " + " ".join(f"{k}={v}" for k, v in sorted(cfg.raw.items()) if k != "out"),
    ]
    if cfg.is_private and priv.sigma:
        lines.append(
            f"# privacy: closed-form sigma={priv.sigma:.12g} delta={priv.delta:.12g}; "
            "guarantee holds for T total steps while batches are drawn by "
            "shuffling each epoch without replacement; no moments accountant "
            "(the closed form may be looser than subsampling-based accounting)"
        )
    else:
        lines.append("# privacy: disabled (epsilon=inf)")
    lines.append("# walltime_ms is pinned to 0 for byte-determinism; timings go to stderr")
    return lines


def _epsilon_at(priv, t: int) -> float:
    if priv.clip is None or priv.sigma is None or priv.sigma == 0:
        return float("inf")
    eps = dp_core.epsilon_spent(t, priv.n, priv.sigma, priv.delta)
    if priv.epsilon is not None:
        eps = min(eps, priv.epsilon)  # the calibration target is the guarantee
    return eps


def run_experiment(cfg: ExperimentConfig, quiet: bool = False) -> list[RunRecord]:
    """Train per the config; write the CSV; return the records."""
    master = RngStream(cfg.seed)
    data = _load_from_config(cfg, master)
    train, eval_set = _split(data, cfg.eval_fraction, master)
    n_train = len(train)
    if cfg.batch > n_train:
        raise ConfigurationError(
            f"field train.batch: batch {cfg.batch} exceeds training set size {n_train}"
        )
    steps_per_epoch = n_train // cfg.batch
    steps = cfg.steps if cfg.steps is not None else cfg.epochs * steps_per_epoch
    if steps < 1:
        raise ConfigurationError("field train.steps: run needs at least one step")

    priv = resolve_privacy(cfg, n_train, steps)
    params = init_params(cfg.model, master.derive(_TAG_INIT))

    if cfg.method == "block-sgd":
        stepper = _block_sgd_stepper(cfg, params, priv, master)
    else:
        step_fn = optimizers.make_step(
            cfg.method,
            cfg.model,
            rank=cfg.rank,
            refresh_every=cfg.refresh_every,
            priv_clip=priv.clip if cfg.is_private else None,
            priv_sigma=priv.sigma if cfg.is_private else None,
            master_seed=cfg.seed,
            hyper=cfg.hyper,
            micro_batch=cfg.micro_batch,
        )
        stepper = lambda p, b, t: step_fn(p, b)[0]  # noqa: E731

    tau = None
    if cfg.theory_final_iterate:
        tau = 1 + int(master.derive(_TAG_TAU).uniforms(1)[0] * steps)
        tau = min(tau, steps)
    snapshot = None

    records: list[RunRecord] = []
    first_batch = train.subset(np.arange(min(cfg.batch, n_train)))
    loss0, _ = loss_and_predictions(params, first_batch)
    records.append(RunRecord(0, loss0, _evaluate(params, eval_set), _epsilon_at(priv, 0), 0.0))

    started = time.perf_counter()
    t = 0
    for epoch in range(10 ** 9):  # bounded by the step budget below
        order = np.argsort(master.derive(_TAG_SHUFFLE, epoch).uniforms(n_train), kind="stable")
        for b in range(steps_per_epoch):
            if t >= steps:
                break
            t += 1
            batch = train.subset(order[b * cfg.batch : (b + 1) * cfg.batch])
            params = stepper(params, batch, t)
            if tau is not None and t == tau:
                snapshot = params.copy()
            if t < steps and t % cfg.record_every == 0:
                loss, _ = loss_and_predictions(params, batch)
                records.append(
                    RunRecord(t, loss, _evaluate(params, eval_set), _epsilon_at(priv, t), 0.0)
                )
                if not quiet:
                    elapsed = 1000.0 * (time.perf_counter() - started)
                    print(
                        f"[grape-dp] step {t}/{steps} loss={loss:.6g} ({elapsed:.0f} ms)",
                        file=sys.stderr,
                    )
        if t >= steps:
            break

    if snapshot is not None:
        params = snapshot
    final_loss, _ = loss_and_predictions(params, first_batch)
    records.append(
        RunRecord(steps, final_loss, _evaluate(params, eval_set), _epsilon_at(priv, steps), 0.0)
    )

    lines = _header_lines(cfg, n_train, steps, priv)
    lines.append("step,loss,acc,epsilon,walltime_ms")
    lines.extend(_format_row(r) for r in records)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    if not quiet:
        total_ms = 1000.0 * (time.perf_counter() - started)
        print(f"[grape-dp] wrote {out} after {total_ms:.0f} ms", file=sys.stderr)
    return records


def _block_sgd_stepper(cfg: ExperimentConfig, params: Params, priv, master: RngStream):
    """Adapt the generalized block-SGD update to the training loop."""
    layout = optimizers.full_layout(cfg.model)
    cuts = layout.slices()
    partition = [np.arange(s.start, s.stop) for s in cuts]
    grad_fn = optimizers.flat_per_sample_grad_fn(params)

    def stepper(p: Params, batch: Dataset, t: int) -> Params:
        w = np.concatenate([wt.ravel() for wt in p.weights] + ([bv for bv in p.biases] if p.biases is not None else []))
        w = optimizers.block_sgd_step(
            w, partition, grad_fn, batch, priv, cfg.rank, cfg.hyper.eta,
            master.derive(_TAG_BLOCK, t),
        )
        new_w, new_b = layout.unflatten(w)
        for wt, nw in zip(p.weights, new_w):
            wt[:] = nw
        if p.biases is not None:
            for bv, nb in zip(p.biases, new_b):
                bv[:] = nb
        return p

    return stepper


def spectrum_experiment(
    cfg: ExperimentConfig,
    clip_values: list[float],
    sigma_values: list[float],
    k: int,
    out: str | Path | None = None,
    quiet: bool = False,
):
    """Top-k singular values of the clipped-and-noised batch gradient.

    For each (C, sigma): per-sample gradients are flat-clipped at C, averaged,
    and entrywise Gaussian noise with std C*sigma/B is added to the mean
    (mirroring the privatized mean of one training step). Per-layer top-k
    spectra are then averaged across the weight matrices large enough to hold
    k singular values. Emits raw averages, the averaged spectrum normalized by
    its own lead value, and the average of per-layer normalized spectra.
    """
    master = RngStream(cfg.seed)
    data = _load_from_config(cfg, master)
    batch = data.subset(np.arange(min(cfg.batch, len(data))))
    params = init_params(cfg.model, master.derive(_TAG_INIT))

    eligible = [i for i, (m, n) in enumerate(cfg.model.layer_dims) if min(m, n) >= k]
    if not eligible:
        raise InvalidArgumentError(
            f"k={k} exceeds every layer's smaller dimension in {cfg.model.layer_dims}"
        )

    layout = optimizers.full_layout(cfg.model)
    slices = layout.slices()
    flat = np.empty((len(batch), layout.dim))

    def visit(idx, block, bias_block):
        flat[:, slices[idx]] = block.reshape(len(batch), -1)
        if bias_block is not None:
            flat[:, slices[cfg.model.num_layers + idx]] = bias_block

    per_sample_grads(params, batch, visitor=visit)

    rows = []
    combo = 0
    for c in clip_values:
        for sigma in sigma_values:
            combo += 1
            finite_c = None if np.isinf(c) else float(c)
            if finite_c is None and sigma > 0:
                if not quiet:
                    print(
                        f"[grape-dp] skipping C=inf sigma={sigma}: noise scale is "
                        "undefined without a clipping threshold",
                        file=sys.stderr,
                    )
                continue
            clipped = dp_core.clip_batch(flat, finite_c)
            mean = np.sum(clipped, axis=0) * (1.0 / len(batch))
            if sigma > 0:
                std = finite_c * sigma / len(batch)
                mean = mean + std * master.derive(_TAG_SPECTRUM, combo).normals(mean.size)
            g_layers, _ = layout.unflatten(mean)
            spectra = np.stack([singular_values(g_layers[i], k) for i in eligible])
            s_avg = spectra.mean(axis=0)
            norm_each = spectra / spectra[:, :1]
            s_norm_avg = norm_each.mean(axis=0)
            lead = s_avg[0] if s_avg[0] > 0 else 1.0
            for i in range(k):
                rows.append((c, sigma, i + 1, s_avg[i], s_avg[i] / lead, s_norm_avg[i]))

    lines = [
        "# grape-dp spectrum",
        f"# seed={cfg.seed} batch={len(batch)} layers_averaged={eligible}",
        "# recipe: per-sample flat clip at C, mean over batch, entrywise noise "
        "std C*sigma/B on the mean, then top-k singular values per eligible "
        "weight matrix, averaged across layers",
        "# s_over_s1 normalizes the averaged spectrum; s_norm_avg averages "
        "per-layer normalized spectra",
        "C,sigma,index,s,s_over_s1,s_norm_avg",
    ]
    for c, sigma, i, s, s_rel, s_norm in rows:
        lines.append(f"{c:.12g},{sigma:.12g},{i},{s:.12g},{s_rel:.12g},{s_norm:.12g}")
    if out is not None:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    return rows
