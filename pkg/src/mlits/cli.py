"""Command-line interface: ``mlits <command> ...``.

Exit codes: 0 on success, 2 when a run finished but its results should
not be trusted (convergence warnings, a failed calibration), 1 on any
error.  Every output set is accompanied by a ``manifest.json`` and all
files are written atomically (temporary file, then rename).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .basis import basis_for_panel
from .config import ModelConfig, SamplerConfig, config_from_dict, load_config
from .diagnostics import diagnose
from .effects import EffectSummary, effect_curve, poststratify, window_average
from .panel import GroupingSpec, Panel, load_panel, load_poststrat, write_panel
from .posterior import Model
from .sampler import Draws, default_threads, sample
from .simulate import sbc, simulate_panel

SEED_ENV = "MITS_SEED"
EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2
# codes that make ``fit``/``diagnose`` exit with EXIT_WARN
BLOCKING_WARNINGS = ("rhat_gt_1.01", "divergences_gt_1pct")


class CLIError(RuntimeError):
    pass


# -- file helpers ------------------------------------------------------------


@contextmanager
def atomic_open(path, mode: str = "w"):
    """Open a temporary sibling of ``path``; rename it into place on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None, **({} if "b" in mode else {"encoding": "utf-8"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_with(path, writer) -> None:
    """Run ``writer(tmp_path)`` and rename the result to ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, doc) -> None:
    with atomic_open(path) as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    return x


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict[str, str]:
    import numba
    import scipy

    return {
        "mlits": __version__, "python": platform.python_version(),
        "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__,
    }


def manifest(command: str, wall_time: float, **fields) -> dict:
    doc = {"command": command, "versions": versions(), "wall_time": wall_time}
    doc.update(fields)
    doc.setdefault("warnings", [])
    return doc


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CLIError(f"cannot create output directory {p}: {err.strerror}") from None
    return p


def _grouping(config: ModelConfig) -> GroupingSpec:
    return config.grouping or GroupingSpec(())


def resolve_seed(arg: int | None, config_seed: int) -> int:
    """``--seed`` beats ``$MITS_SEED``, which beats the config's seed."""
    if arg is not None:
        return int(arg)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise CLIError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return int(config_seed)


def _apply_sampler_args(config: ModelConfig, args) -> ModelConfig:
    changes = {k: getattr(args, k) for k in ("chains", "warmup", "samples") if getattr(args, k, None) is not None}
    changes["seed"] = resolve_seed(getattr(args, "seed", None), config.sampler.seed)
    return config.with_updates(**changes)


def _threads(args) -> int:
    t = getattr(args, "threads", None)
    if t is None:
        return default_threads()
    if t < 1:
        raise CLIError("--threads must be >= 1")
    return int(t)


def _parse_window(text: str | None):
    if text is None:
        return None
    a, sep, b = text.partition(":")
    if not sep:
        raise CLIError(f"--window must look like a:b, got {text!r}")
    try:
        return int(a), int(b)
    except ValueError:
        raise CLIError(f"--window bounds must be integers, got {text!r}") from None


def _load_run(run_dir: Path, data: str | None = None) -> tuple[ModelConfig, Panel, Model, Draws, dict]:
    man_path = run_dir / "manifest.json"
    if not man_path.exists():
        raise CLIError(f"{run_dir} has no manifest.json; is it a fit output directory?")
    man = json.loads(man_path.read_text(encoding="utf-8"))
    if "config" not in man:
        raise CLIError(f"{man_path} records no model config")
    config = config_from_dict(man["config"])
    data_path = data or man.get("data")
    if not data_path or not os.path.exists(data_path):
        raise CLIError("panel data not found; pass --data")
    if file_hash(data_path) != man.get("data_hash"):
        raise CLIError(f"{data_path} does not match the data hash recorded in the manifest")
    panel = load_panel(data_path, _grouping(config))
    model = Model(panel, config)
    draws = Draws.from_csv(run_dir / "draws.csv", max_depth=config.sampler.max_depth)
    return config, panel, model, draws, man


# -- commands --------------------------------------------------------------


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    config = _apply_sampler_args(load_config(args.config), args)
    panel = load_panel(args.data, _grouping(config))
    model = Model(panel, config)
    out = _out_dir(args.out_dir)
    draws = sample(model, config.sampler, threads=_threads(args))
    diag = diagnose(draws)
    warnings = list(dict.fromkeys(draws.warnings + diag.warning_codes()))
    atomic_write_with(out / "draws.csv", draws.to_csv)
    diag_doc = {"summary": diag.summary(), "parameters": diag.table(),
                "step_size": draws.step_size, "warmup_divergences": draws.warmup_divergences}
    write_json(out / "diagnostics.json", diag_doc)
    write_json(out / "manifest.json", manifest(
        "fit", time.perf_counter() - t0, config_hash=config.digest(), data=os.path.abspath(args.data),
        data_hash=file_hash(args.data), seed=config.sampler.seed, diagnostics=diag.summary(), warnings=warnings,
        config=config.to_dict(), files=["draws.csv", "diagnostics.json"],
    ))
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_WARN if set(BLOCKING_WARNINGS) & set(warnings) else EXIT_OK


def cmd_summarize(args) -> int:
    t0 = time.perf_counter()
    run = Path(args.run_dir)
    config, panel, model, draws, man = _load_run(run, args.data)
    window = _parse_window(args.window)
    scale = args.scale
    result = EffectSummary()
    if args.poststrat:
        table = load_poststrat(args.poststrat, model.grouping)
        result.extend(poststratify(draws, model, table, scale, window))
    else:
        targets = args.target or ["overall"] + [f"{f}={lev}" for f, lev in model.units[1:]]
        for tgt in targets:
            if window is None:
                result.extend(effect_curve(draws, model, tgt, scale))
            result.rows.append(window_average(draws, model, tgt, window, scale))
    out = Path(args.out) if args.out else run / "summary.csv"
    atomic_write_with(out, result.to_csv)
    write_json(out.with_suffix(".manifest.json"), manifest(
        "summarize", time.perf_counter() - t0, config_hash=config.digest(), data_hash=man.get("data_hash"),
        seed=man.get("seed"), scale=scale, window=args.window, poststrat=args.poststrat, files=[out.name],
    ))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    t0 = time.perf_counter()
    path = Path(args.draws)
    if path.is_dir():
        path = path / "draws.csv"
    draws = Draws.from_csv(path, max_depth=args.max_depth)
    diag = diagnose(draws)
    doc = {"summary": diag.summary(), "parameters": diag.table()}
    out = Path(args.out) if args.out else path.parent / "diagnostics.json"
    write_json(out, doc)
    write_json(out.with_suffix(".manifest.json"), manifest(
        "diagnose", time.perf_counter() - t0, draws_hash=file_hash(path), diagnostics=diag.summary(),
        warnings=diag.warning_codes(), files=[out.name],
    ))
    s = diag.summary()
    print(f"max_rhat={s['max_rhat']:.4f} min_ess_bulk={s['min_ess_bulk']:.0f} divergent={s['n_divergent']} "
          f"warnings={','.join(s['warnings']) or 'none'}")
    return EXIT_WARN if set(BLOCKING_WARNINGS) & set(diag.warning_codes()) else EXIT_OK


def _load_truth(path: str | None):
    if path is None:
        return "prior"
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    params = doc.get("params", doc)
    return {k: np.asarray(v, dtype=float) for k, v in params.items()}


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    config = load_config(args.config)
    seed = resolve_seed(args.seed, config.sampler.seed)
    out = _out_dir(args.out_dir)
    panel, truth = simulate_panel(config, _load_truth(args.truth), seed=seed, grouping=_grouping(config),
                                  n_times=args.n_times, size=args.size)
    atomic_write_with(out / "panel.csv", lambda p: write_panel(panel, p))
    write_json(out / "truth.json", truth.to_dict())
    write_json(out / "manifest.json", manifest(
        "simulate", time.perf_counter() - t0, config_hash=config.digest(), seed=seed,
        data_hash=file_hash(out / "panel.csv"), resamples=truth.resamples, files=["panel.csv", "truth.json"],
        warnings=["prior_resampled"] if truth.resamples else [],
    ))
    return EXIT_OK


def cmd_sbc(args) -> int:
    t0 = time.perf_counter()
    config = load_config(args.config)
    fit_config = load_config(args.fit_config) if args.fit_config else None
    seed = resolve_seed(args.seed, config.sampler.seed)
    out = _out_dir(args.out_dir)
    sampler = SamplerConfig(chains=args.chains, warmup=args.warmup, samples=args.samples, seed=seed)
    res = sbc(config, args.n_sims, seed=seed, grouping=_grouping(config), n_times=args.n_times, size=args.size,
              fit_config=fit_config, sampler=sampler, threads=_threads(args))
    atomic_write_with(out / "ranks.csv", res.write_ranks_csv)
    summary = res.summary()
    write_json(out / "sbc_summary.json", summary)
    warnings = []
    if res.failed_run:
        warnings.append("sbc_exclusions_gt_20pct")
    if not res.passed():
        warnings.append("sbc_nonuniform")
    write_json(out / "manifest.json", manifest(
        "sbc", time.perf_counter() - t0, config_hash=config.digest(),
        fit_config_hash=(fit_config or config).digest(), seed=seed, warnings=warnings,
        files=["ranks.csv", "sbc_summary.json"],
    ))
    for name, p in summary["pvalues"].items():
        print(f"{name}: p={p:.4g}")
    return EXIT_WARN if warnings else EXIT_OK


def read_vector(path) -> np.ndarray:
    """Numbers from a CSV: one row, one column, or ``name,value`` rows; a
    non-numeric first line is treated as a header."""
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    cells: list[str] = []
    for i, line in enumerate(text):
        parts = [p.strip().strip('"') for p in line.split(",") if p.strip()]
        if not parts:
            continue
        try:
            nums = [float(p) for p in parts]
        except ValueError:
            try:
                nums = [float(parts[-1])]
            except ValueError:
                if i == 0:
                    continue
                raise CLIError(f"{path}:{i + 1}: cannot parse {line!r}") from None
        cells.extend(map(str, nums))
    return np.array([float(c) for c in cells])


def cmd_eval(args) -> int:
    config = load_config(args.config)
    panel = load_panel(args.data, _grouping(config))
    model = Model(panel, config)
    theta = read_vector(args.theta)
    if theta.size != model.dim:
        raise CLIError(f"theta has {theta.size} values, the model needs {model.dim} ({', '.join(model.layout.names[:3])}, ...)")
    value, grad = model.logp_grad(theta)
    lines = ["name,value", f"lp__,{format(float(value), '.17g')}"]
    lines += [f'"grad[{n}]",{format(float(g), ".17g")}' for n, g in zip(model.layout.names, grad)]
    text = "\n".join(lines) + "\n"
    if args.out:
        with atomic_open(args.out) as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _write_matrix(path, M, header) -> None:
    with atomic_open(path) as fh:
        fh.write(",".join(header) + "\n")
        for row in np.atleast_2d(M):
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")


def cmd_dump_basis(args) -> int:
    t0 = time.perf_counter()
    if args.config:
        config = load_config(args.config)
        T_int, knots = config.T_int, config.knots if args.knots is None else args.knots
    else:
        if args.T_int is None:
            raise CLIError("pass --config or --T-int")
        T_int, knots = args.T_int, args.knots
    if args.n_times is None:
        raise CLIError("--n-times is required")
    basis = basis_for_panel(args.n_times, T_int, knots)
    out = _out_dir(args.out_dir)
    H = basis.H
    B = np.column_stack([basis.post_times, basis.B])
    _write_matrix(out / "B.csv", B, ["t", *[f"b{h + 1}" for h in range(H)]])
    _write_matrix(out / "P1.csv", basis.P1, [f"r{h + 1}" for h in range(basis.H_r)] or ["empty"])
    _write_matrix(out / "P2.csv", basis.P2, ["linear"] if basis.has_linear else ["empty"])
    sums = basis.B.sum(axis=0)
    write_json(out / "manifest.json", manifest(
        "dump-basis", time.perf_counter() - t0, n_times=args.n_times, T_int=T_int, knots=knots,
        H=H, max_abs_column_sum=float(np.max(np.abs(sums))) if H else 0.0, files=["B.csv", "P1.csv", "P2.csv"],
    ))
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlits", description="Multilevel interrupted time series models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--debug", action="store_true", help="show tracebacks for errors")
    sub = p.add_subparsers(dest="command", required=True)

    def sampling(sp, threads=True):
        sp.add_argument("--chains", type=int)
        sp.add_argument("--warmup", type=int)
        sp.add_argument("--samples", type=int)
        sp.add_argument("--seed", type=int, help=f"default: ${SEED_ENV}, then the config's seed")
        if threads:
            sp.add_argument("--threads", type=int, help="worker processes (default: all available cores)")

    sp = sub.add_parser("fit", help="sample the posterior")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", required=True)
    sampling(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("summarize", help="effect summaries of a fit")
    sp.add_argument("--run-dir", required=True)
    sp.add_argument("--data", help="panel CSV (default: the path in the manifest)")
    sp.add_argument("--scale", choices=("link", "ratio", "difference"), default="ratio")
    sp.add_argument("--window", help="inclusive post-period window a:b")
    sp.add_argument("--target", action="append", help="'overall' or factor=level (repeatable)")
    sp.add_argument("--poststrat", help="weights CSV (one column per factor plus weight)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_summarize)

    sp = sub.add_parser("diagnose", help="convergence diagnostics of a draws CSV")
    sp.add_argument("--draws", required=True, help="draws.csv or a fit output directory")
    sp.add_argument("--max-depth", type=int, default=10)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("simulate", help="simulate a panel from the model")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--n-times", type=int, required=True)
    sp.add_argument("--size", type=float, help="exposure (Poisson) or trials (binomial) per cell")
    sp.add_argument("--truth", help="truth JSON (default: draw from the prior)")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sbc", help="simulation-based calibration")
    sp.add_argument("--config", required=True)
    sp.add_argument("--fit-config", help="config used for fitting (default: --config)")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--n-sims", type=int, default=100)
    sp.add_argument("--n-times", type=int, required=True)
    sp.add_argument("--size", type=float)
    sp.add_argument("--chains", type=int, default=4)
    sp.add_argument("--warmup", type=int, default=250)
    sp.add_argument("--samples", type=int, default=250)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int)
    sp.set_defaults(func=cmd_sbc)

    sp = sub.add_parser("eval", help="log posterior and gradient at an unconstrained point")
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--theta", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("dump-basis", help="write the spline basis and penalties as CSV")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--n-times", type=int)
    sp.add_argument("--T-int", type=int, dest="T_int")
    sp.add_argument("--knots", type=int)
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_dump_basis)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args))
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_ERROR
    except Exception as err:  # noqa: BLE001 - every failure becomes exit 1 with a message
        if args.debug:
            raise
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
