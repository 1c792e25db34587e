"""Command-line interface: ``python -m ebmforge <subcommand> ...``.

Any ``--section.key=value`` flag not known to a subcommand overrides the
corresponding experiment-config field; unknown config keys are errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys

import numpy as np

from ..energies import dump_energy_grid
from ..objectives import calibrate_knn_entropy, knn_entropy
from ..replay import load_reservoir, save_reservoir
from ..sampling import SamplerConfig, run_chain
from .config import ConfigError, ExperimentConfig, apply_overrides, default_seed
from .diagnostics import mode_coverage, spurious_minima_probe
from .metrics import emit_metrics
from .presets import PRESETS
from .train import build_transition, load_checkpoint, train

log = logging.getLogger("ebmforge")


def _load_config(args, extra) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("use either --config or --preset")
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        cfg = PRESETS[args.preset]()
    else:
        cfg = ExperimentConfig()
    return apply_overrides(cfg, extra) if extra else cfg


def _sampler_from_args(args, state) -> SamplerConfig:
    base = state.config.sampler
    clamp = tuple(base.clamp) if base.clamp is not None else None
    transition = None
    if args.transition:
        spec = type(base)(**{**vars(base), "transition": args.transition})
        transition = build_transition(spec, state.dataset)
    return SamplerConfig(step_size=args.step_size or base.step_size,
                         noise_std=args.noise_std if args.noise_std is not None else base.noise_std,
                         steps=args.steps, adjusted=args.adjusted, clamp=clamp,
                         transition=transition, period=args.period)


def _noise_inits(state, n, rng):
    r = state.config.replay
    return rng.uniform(r.noise_low, r.noise_high, size=(n, state.dataset.dim))


# ------------------------------------------------------------------ commands

def cmd_train(args, extra):
    cfg = _load_config(args, extra)
    if args.dump_config:
        print(cfg.to_yaml(), end="")
        return 0
    res = train(cfg, resume=args.resume)
    if args.metrics:
        emit_metrics(res.metrics, args.metrics, "jsonl" if args.metrics.endswith(".jsonl") else "csv")
    last = res.metrics[-1] if len(res.metrics) else None
    print(f"trained {res.step} steps" + (f"; final total grad norm {last.grad_norm_total:.4g}" if last else ""))
    return 0


def cmd_sample(args, extra):
    state = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    inits = _noise_inits(state, args.n, rng)
    res = run_chain(inits, state.model, _sampler_from_args(args, state), rng, trace=bool(args.trace))
    if args.out:
        np.savetxt(args.out, res.final, delimiter=",", header=",".join(f"dim{i}" for i in range(res.final.shape[1])),
                   comments="")
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "chain"] + [f"dim{i}" for i in range(res.final.shape[1])])
            for s, states in enumerate(res.trajectory):
                for c, row in enumerate(states):
                    w.writerow([s, c] + row.tolist())
    msg = f"{args.n} chains, mean final energy {res.stats.mean_energy:.4g}"
    if state.dataset.modes is not None and state.dataset.mode_std:
        msg += f", mode coverage {mode_coverage(res.final, state.dataset.modes, 3 * state.dataset.mode_std):.3f}"
    print(msg)
    return 0


def cmd_probe(args, extra):
    state = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    noise = _noise_inits(state, args.n, rng)
    data = state.dataset.batch(args.n, rng)
    rep = spurious_minima_probe(state.model, noise, data, _sampler_from_args(args, state), rng,
                                delta=args.delta, reference=args.reference)
    print(json.dumps({"noise_success": rep.noise_success, "data_success": rep.data_success,
                      "delta": rep.delta, "reference_energy": rep.reference_energy}, indent=2))
    return 0


def cmd_grad_audit(args, extra):
    cfg = _load_config(args, extra)
    if cfg.objective.grid_low is None:
        raise ConfigError("grad-audit needs objective.grid_low / objective.grid_high (d <= 2)")
    res = train(cfg)
    rows = [{"step": r.step, "oracle_cosine": r.oracle_cosine, "grad_norm_positive": r.grad_norm_positive,
             "grad_norm_negative": r.grad_norm_negative} for r in res.metrics]
    text = json.dumps({"variant": cfg.objective.variant, "init_policy": cfg.replay.policy, "records": rows}, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_entropy_check(args, extra):
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.n, args.dim))
    const = calibrate_knn_entropy(args.n, args.dim, rng) if args.calibrate else 0.0
    est = knn_entropy(x, constant=const)
    exact = 0.5 * args.dim * math.log(2 * math.pi * math.e)
    print(json.dumps({"n": args.n, "dim": args.dim, "estimate": est, "constant": const,
                      "gaussian_entropy": exact, "error": est - exact}, indent=2))
    return 0


def cmd_dump_grid(args, extra):
    state = load_checkpoint(args.checkpoint)
    dump_energy_grid(state.model, (args.low, args.low), (args.high, args.high), args.resolution, args.out)
    print(f"wrote {args.resolution ** 2} rows to {args.out}")
    return 0


def cmd_buffer(args, extra):
    if args.action == "save":
        state = load_checkpoint(args.checkpoint)
        if state.reservoir is None:
            raise ConfigError("checkpoint has no reservoir (exact_nll run)")
        save_reservoir(state.reservoir, args.file)
        print(f"saved {len(state.reservoir)} states (capacity {state.reservoir.capacity}) to {args.file}")
    else:
        res = load_reservoir(args.file)
        states = res.states()
        print(json.dumps({"capacity": res.capacity, "dim": res.dim, "size": len(res),
                          "min": float(states.min()) if len(res) else None,
                          "max": float(states.max()) if len(res) else None}, indent=2))
    return 0


# -------------------------------------------------------------------- parser

def _add_config_args(p):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--preset", help=f"named preset: {', '.join(sorted(PRESETS))}")


def _add_sampler_args(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=500, help="number of chains")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--step-size", type=float, default=None, help="lambda (default: training value)")
    p.add_argument("--noise-std", type=float, default=None, help="sigma (default: training value)")
    p.add_argument("--adjusted", action="store_true", help="Metropolis-adjusted (MALA)")
    p.add_argument("--transition", choices=["gaussian_jitter", "elastic_deformation", "mode_jump"])
    p.add_argument("--period", type=int, default=100, help="steps between transitions")
    p.add_argument("--seed", type=int, default=default_seed())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ebmforge", description="Energy-based model training lab")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model (extra --key=value flags override the config)")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--metrics", help="also write metrics to this .csv/.jsonl path")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="run chains from noise on a checkpointed model")
    _add_sampler_args(p)
    p.add_argument("--out", help="CSV of final states")
    p.add_argument("--trace", help="CSV trajectory dump (step, chain, dims)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("probe", help="spurious-minima probe: noise- vs data-initialized chains")
    _add_sampler_args(p)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--reference", choices=["chains", "data"], default="chains")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("grad-audit", help="train and report the cosine to the exact gradient per step")
    _add_config_args(p)
    p.add_argument("--out", help="JSON output path (default stdout)")
    p.set_defaults(func=cmd_grad_audit)

    p = sub.add_parser("entropy-check", help="nearest-neighbour entropy on N(0, I) vs closed form")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--calibrate", action="store_true", help="add the uniform-sample calibration offset")
    p.add_argument("--seed", type=int, default=default_seed())
    p.set_defaults(func=cmd_entropy_check)

    p = sub.add_parser("dump-grid", help="write a 2-D energy table as CSV x,y,E")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--low", type=float, default=-6.0)
    p.add_argument("--high", type=float, default=6.0)
    p.add_argument("--resolution", type=int, default=101)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_grid)

    p = sub.add_parser("buffer", help="save a checkpoint's reservoir or inspect a snapshot")
    p.add_argument("action", choices=["save", "load"])
    p.add_argument("--file", required=True, help="reservoir snapshot path")
    p.add_argument("--checkpoint", help="checkpoint to read the reservoir from (save)")
    p.set_defaults(func=cmd_buffer)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if extra and args.command not in ("train", "grad-audit"):
        ap.error(f"unrecognized arguments: {' '.join(extra)}")
    bad = [e for e in extra if not e.startswith("--") or "=" not in e]
    if bad:
        ap.error(f"config overrides must look like --key=value: {' '.join(bad)}")
    if args.command == "buffer" and args.action == "save" and not args.checkpoint:
        ap.error("buffer save needs --checkpoint")
    try:
        return args.func(args, extra)
    except (ConfigError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
