"""The ``grape-dp`` command line interface.

Heavy imports happen inside ``main`` so the GRAPE_DP_THREADS cap can be
installed into the BLAS thread environment before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("GRAPE_DP_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grape-dp",
        description="Differentially private training with seeded random gradient projections.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a training experiment, writing a CSV")
    train.add_argument("--config", help="key=value config file")
    train.add_argument("--method", help="optimizer method override")
    train.add_argument("--epsilon", help="privacy target epsilon override")
    train.add_argument("--sigma", help="explicit noise multiplier override")
    train.add_argument("--clip", help="clipping threshold override ('off' disables)")
    train.add_argument("--r", help="projection rank override")
    train.add_argument("--seed", help="master seed override")
    train.add_argument("--steps", help="total step count override")
    train.add_argument("--out", help="output CSV path override")
    train.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    train.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
    train.add_argument("--quiet", action="store_true", help="suppress stderr progress")

    spectrum = sub.add_parser("spectrum", help="singular-value study of privatized gradients")
    spectrum.add_argument("--config", help="key=value config file")
    spectrum.add_argument("--clips", default="inf,1.0", help="comma list; 'inf' disables clipping")
    spectrum.add_argument("--sigmas", default="0,0.5,2.0", help="comma list of noise multipliers")
    spectrum.add_argument("--k", type=int, default=32, help="singular values per layer")
    spectrum.add_argument("--seed", help="master seed override")
    spectrum.add_argument("--out", default="spectrum.csv", help="output CSV path")
    spectrum.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    spectrum.add_argument("--no-plot", action="store_true")

    memory = sub.add_parser("memory", help="predicted vs measured memory for one method")
    memory.add_argument("--method", required=True)
    memory.add_argument(
        "--spec", required=True, help="comma size chain, e.g. 32,48,32,16 (input first)"
    )
    memory.add_argument("--batch", type=int, default=16)
    memory.add_argument("--r", type=int, default=4)
    memory.add_argument("--steps", type=int, default=3)
    memory.add_argument("--out", default="memory.csv", help="output CSV path")
    memory.add_argument("--no-plot", action="store_true")

    selftest = sub.add_parser("selftest", help="run the reduced property suites")
    selftest.add_argument("--seed", type=int, default=0, help="unused; kept for symmetry")
    return parser


def _collect_overrides(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for pair in args.set:
        if "=" not in pair:
            raise SystemExit(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    direct = {
        "method": "method",
        "epsilon": "priv.epsilon",
        "sigma": "priv.sigma",
        "clip": "priv.clip",
        "r": "proj.r",
        "seed": "seed",
        "steps": "train.steps",
        "out": "out",
    }
    for attr, key in direct.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _cmd_train(args) -> int:
    from .config import build_config
    from .experiments import run_experiment

    cfg = build_config(args.config, _collect_overrides(args))
    records = run_experiment(cfg, quiet=args.quiet)
    if not args.no_plot:
        from .plots import render_train

        png = str(Path(cfg.out).with_suffix(".png"))
        render_train(records, png, f"{cfg.method} (seed {cfg.seed})")
        if not args.quiet:
            print(f"[grape-dp] wrote {png}", file=sys.stderr)
    return 0


def _cmd_spectrum(args) -> int:
    from .config import build_config
    from .experiments import spectrum_experiment

    overrides = _collect_overrides(args)
    # the study supplies its own (C, sigma) grid; no training budget needed
    overrides.setdefault("method", "adam")
    cfg = build_config(args.config, overrides)
    clips = [float(tok) for tok in args.clips.split(",") if tok.strip()]
    sigmas = [float(tok) for tok in args.sigmas.split(",") if tok.strip()]
    rows = spectrum_experiment(cfg, clips, sigmas, args.k, out=args.out)
    print(f"[grape-dp] wrote {args.out}", file=sys.stderr)
    if not args.no_plot:
        from .plots import render_spectrum

        png = str(Path(args.out).with_suffix(".png"))
        render_spectrum(rows, png, f"gradient spectra (k={args.k})")
        print(f"[grape-dp] wrote {png}", file=sys.stderr)
    return 0


def _cmd_memory(args) -> int:
    from .. import memory_model
    from ..models import ModelSpec

    sizes = [int(tok) for tok in args.spec.split(",") if tok.strip()]
    spec = ModelSpec.mlp(sizes, activation="tanh", loss="cross-entropy", include_bias=False)
    predicted = memory_model.predict_memory(args.method, spec.layer_dims, args.batch, args.r)
    measured = memory_model.tracked_run(args.method, spec, args.batch, args.r, steps=args.steps)
    csv_text = memory_model.report_csv(args.method, predicted, measured)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(csv_text)
    print(csv_text, end="")
    print(f"[grape-dp] wrote {args.out}", file=sys.stderr)
    if not args.no_plot:
        from .plots import render_memory

        png = str(Path(args.out).with_suffix(".png"))
        render_memory(args.method, predicted.as_dict(), measured, png)
        print(f"[grape-dp] wrote {png}", file=sys.stderr)
    return 0


def _cmd_selftest(_args) -> int:
    from .selftest import run_selftest

    return run_selftest()


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    args = parser.parse_args(argv)
    from ..errors import GrapeError

    handlers = {
        "train": _cmd_train,
        "spectrum": _cmd_spectrum,
        "memory": _cmd_memory,
        "selftest": _cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except GrapeError as exc:
        print(f"grape-dp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
