"""``enkbf-lab`` command line.

Exit status: 0 on success, 1 on usage or validation errors, 2 when a run
fails numerically (blow-up).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

from . import __version__
from .config import LabConfig, load_config
from .enkbf import Variant, run_enkbf
from .errors import EnkbfLabError, NumericalBlowUp, ValidationError
from .experiments import KINDS, ExperimentSpec, parse_kind, run_experiment
from .kbf import run_kbf, write_trajectory_csv
from .mlmc import MlConfig, allocate_particles, ml_estimate
from .model import ModelGenSpec, make_ou_model, save_model
from .paths import simulate_truth_and_observations, write_record_csv
from .rng import derive_stream
from .unbiased import UnbiasedConfig, unbiased_estimate, write_samples_csv, write_summary_json

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
U64_MAX = (1 << 64) - 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems through UsageError."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _levels(text: str) -> tuple[int, int]:
    parts = text.split("..")
    try:
        if len(parts) == 1:
            v = int(parts[0])
            return v, v
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"levels must look like a..b, got {text!r}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", type=Path, help="TOML file with [model]/[experiment]/[estimator]")
    g.add_argument("--seed", type=_seed, help="master seed (unsigned 64-bit)")
    g.add_argument("--out", type=Path, help="output directory")
    g.add_argument("--variant", choices=["vanilla", "deterministic"])
    g.add_argument("--estimator", choices=["st", "cs"])
    g.add_argument("--dim", type=int, help="random model with d_x = d_y = DIM")
    g.add_argument("--T", type=int, dest="T", help="time horizon (integer)")
    g.add_argument("--levels", type=_levels, help="level range a..b")
    g.add_argument("--replicates", type=int, help="replicate / sample count")
    g.add_argument("--particles", type=int, help="particle count (N, N0 or base count)")
    g.add_argument("--threads", type=int, help="worker threads (default ENKBF_LAB_THREADS)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="enkbf-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="simulate truth and observation CSV")
    sub.add_parser("kbf", parents=[common], help="Kalman-Bucy reference trajectory CSV")
    sub.add_parser("enkbf", parents=[common], help="terminal EnKBF means")
    sub.add_parser("mlenkbf", parents=[common], help="multilevel EnKBF estimate")
    sub.add_parser("unbiased", parents=[common], help="randomized unbiased estimate")
    exp = sub.add_parser("experiment", parents=[common], help="second-moment, bias, mse-vs-cost")
    exp.add_argument("kind", choices=KINDS)
    return parser


# --- helpers --------------------------------------------------------------


def _pick(flag, table: dict, key: str, default):
    if flag is not None:
        return flag
    return table.get(key, default)


def _model(args, cfg: LabConfig):
    if args.dim is not None:
        if args.dim < 1:
            raise ValidationError("--dim must be positive")
        seed = args.seed if args.seed is not None else 0
        return make_ou_model(ModelGenSpec(args.dim, args.dim, seed=seed))
    m = cfg.build_model()
    if m is None:
        raise UsageError("a model is required: pass --config FILE with a [model] section or --dim N")
    return m


def _out(args, cfg: LabConfig) -> Path:
    out = Path(_pick(args.out, cfg.experiment, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _common_values(args, cfg):
    exp, est = cfg.experiment, cfg.estimator
    seed = _pick(args.seed, exp, "seed", 0)
    T = _pick(args.T, exp, "T", 10)
    variant = Variant.parse(_pick(args.variant, est, "variant", "deterministic"))
    if T < 1:
        raise ValidationError("--T must be >= 1")
    return seed, T, variant


def _level_range(args, cfg, default):
    lv = args.levels if args.levels is not None else cfg.experiment.get("levels")
    lo, hi = (default if lv is None else tuple(lv))
    if lo < 0 or hi < lo:
        raise ValidationError(f"bad level range {lo}..{hi}")
    return lo, hi


def _record(m, T, level, seed):
    return simulate_truth_and_observations(m, T, level, derive_stream(seed, [0, 0]))


# --- commands -------------------------------------------------------------


def cmd_simulate(args, cfg):
    m = _model(args, cfg)
    seed, T, _ = _common_values(args, cfg)
    _, level = _level_range(args, cfg, (8, 8))
    out = _out(args, cfg)
    rec = _record(m, T, level, seed)
    write_record_csv(rec, out / "record.csv")
    save_model(m, out / "model.toml")
    print(f"wrote {out / 'record.csv'} ({rec.grid.n_steps} steps at level {level})")


def cmd_kbf(args, cfg):
    m = _model(args, cfg)
    seed, T, variant = _common_values(args, cfg)
    _, level = _level_range(args, cfg, (8, 8))
    out = _out(args, cfg)
    traj = run_kbf(_record(m, T, level, seed), level, m, variant.form)
    write_trajectory_csv(traj, out / "kbf_trajectory.csv", include_cov=True)
    print(f"wrote {out / 'kbf_trajectory.csv'}; terminal mean {traj.final.mean.tolist()}")


def cmd_enkbf(args, cfg):
    m = _model(args, cfg)
    seed, T, variant = _common_values(args, cfg)
    est = cfg.estimator
    _, level = _level_range(args, cfg, (est.get("level", 5),) * 2)
    n = _pick(args.particles, est, "particles", 100)
    reps = _pick(args.replicates, cfg.experiment, "replicates", 1)
    if reps < 1:
        raise ValidationError("--replicates must be >= 1")
    out = _out(args, cfg)
    rec = _record(m, T, level, seed)
    ref = run_kbf(rec, level, m, variant.form).final.mean
    path = out / "enkbf.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "level", "particles", *[f"mean_{i}" for i in range(m.d_x)],
                    *[f"kbf_mean_{i}" for i in range(m.d_x)]])
        for r in range(reps):
            mean = run_enkbf(variant, n, level, rec, m, derive_stream(seed, [1, r]))[1]
            w.writerow([r, level, n, *[repr(float(v)) for v in mean],
                        *[repr(float(v)) for v in ref]])
    print(f"wrote {path}")


def cmd_mlenkbf(args, cfg):
    m = _model(args, cfg)
    seed, T, variant = _common_values(args, cfg)
    est = cfg.estimator
    lo, hi = _level_range(args, cfg, (est.get("l_start", 3), est.get("l_start", 3) + 4))
    n_base = _pick(args.particles, est, "n_base", 100)
    particles = est.get("particles") or allocate_particles(hi, lo, n_base)
    mc = MlConfig(lo, hi, particles, variant, T, bool(est.get("share_initial", False)))
    out = _out(args, cfg)
    rec = _record(m, T, hi, seed)
    res = ml_estimate(mc, rec, m, derive_stream(seed, [3]))
    ref = run_kbf(rec, hi, m, variant.form).final.mean
    with open(out / "mlenkbf_levels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "particles", "cost", *[f"value_{i}" for i in range(m.d_x)]])
        for t in res.terms:
            w.writerow([t.level, t.n, repr(t.cost), *[repr(float(v)) for v in t.value]])
    summary = {"estimate": res.estimate.tolist(), "cost": res.cost, "kbf_mean": ref.tolist(),
               "levels": [lo, hi], "variant": variant.value, "seed": seed}
    (out / "mlenkbf_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"estimate {res.estimate.tolist()} at cost {res.cost:g}")


def cmd_unbiased(args, cfg):
    m = _model(args, cfg)
    seed, T, variant = _common_values(args, cfg)
    est = cfg.estimator
    kw = {k: est[k] for k in ("l_max", "p_max", "l_start", "alpha") if k in est}
    if args.levels is not None:
        kw["l_start"], top = args.levels
        kw["l_max"] = top - kw["l_start"]
    ucfg = UnbiasedConfig.default(
        variant, _pick(args.estimator, est, "estimator", "st"), est.get("pmf_kind", "geometric"),
        N0=_pick(args.particles, est, "N0", None), T=T,
        M=_pick(args.replicates, est, "M", 100), **kw)
    out = _out(args, cfg)
    rec = _record(m, T, ucfg.finest_level, seed)
    res = unbiased_estimate(ucfg, rec, m, seed, threads=args.threads)
    write_samples_csv(res, out / "unbiased_samples.csv")
    write_summary_json(res, out / "unbiased_summary.json")
    print(f"estimate {res.estimate.tolist()} at cost {res.total_cost:g}")


def cmd_experiment(args, cfg):
    exp, est = dict(cfg.experiment), cfg.estimator
    kind = parse_kind(args.kind)
    if "kind" in exp and parse_kind(exp.pop("kind")) != kind:
        raise ValidationError("config [experiment] kind differs from the command line")
    kw = {k: v for k, v in exp.items() if k not in ("seed", "out", "threads")}
    for key in ("N0", "l_start", "l_max", "p_max", "alpha"):
        if key in est:
            kw[key] = est[key]
    if "pmf_kind" in est:
        kw["pmf_kind"] = est["pmf_kind"]
    if args.dim is not None:
        kw.update(d_x=args.dim, d_y=args.dim, model_seed=_pick(args.seed, exp, "seed", 0))
    elif cfg.model is not None or cfg.generator is not None:
        if cfg.generator is not None:
            g = cfg.generator
            kw.update(d_x=g.d_x, d_y=g.d_y, block_size=g.block_size, model_seed=g.seed)
        else:
            path = Path(_out(args, cfg)) / "model.toml"
            save_model(cfg.model, path)
            kw["model_path"] = str(path)
    else:
        raise UsageError("a model is required: pass --config FILE with a [model] section or --dim N")
    if args.variant is not None:
        kw["variants"] = (args.variant,)
    elif "variant" in est:
        kw["variants"] = (est["variant"],)
    if args.estimator is not None:
        kw["estimators"] = (args.estimator,)
    if args.T is not None:
        kw["T"] = args.T
    if args.levels is not None:
        kw["levels"] = args.levels
    if args.replicates is not None:
        kw["replicates"] = args.replicates
    if args.particles is not None:
        kw["N0"] = args.particles
    spec = ExperimentSpec(kind=kind, master_seed=_pick(args.seed, exp, "seed", 0),
                          out_dir=str(_out(args, cfg)),
                          threads=_pick(args.threads, exp, "threads", None), **kw)
    res = run_experiment(spec)
    for variant, per in res.fits.items():
        for axis, fit in per.items():
            if fit is not None:
                print(f"{variant} {axis}: slope {fit['slope']:.4f} r2 {fit['r_squared']:.3f}")
    for c in res.comparisons:
        print(f"{c['variant']} ml L={c['ml_level']} vs {c['unbiased']}: cost ratio {c['ratio']:.3g}")
    print(f"wrote {len(res.artifacts)} files to {spec.out_dir}")


COMMANDS = {"simulate": cmd_simulate, "kbf": cmd_kbf, "enkbf": cmd_enkbf,
            "mlenkbf": cmd_mlenkbf, "unbiased": cmd_unbiased, "experiment": cmd_experiment}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config) if args.config is not None else LabConfig()
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        text = str(exc)
        if "usage:" not in text:
            text = f"{parser.format_usage()}enkbf-lab: error: {text}"
        print(text, file=sys.stderr)
        return EXIT_INVALID
    except NumericalBlowUp as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, EnkbfLabError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    return EXIT_OK


def main() -> None:
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        sys.exit(cli_main())


__all__ = ["cli_main", "main", "build_parser"]
