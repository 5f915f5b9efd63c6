"""Command-line runner.

Every subcommand resolves its configuration, writes its data files
atomically into the output directory and finishes with ``manifest.json``.
Data files depend only on the resolved config, the seed and the thread
count; the manifest alone carries a timestamp.

Seeds fan out as ``Philox(SeedSequence(seed, spawn_key=(item,)))`` with
``item`` the job index, so results do not depend on the worker count.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure (the
solver history is written to ``solver_history.json``), 3 acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import acceptance, bosegas, combinatorics as comb, ensemble, io, rates
from .errors import ConfigError, ConvergenceError, SymBridgeError
from .grid import DensityOnGrid, Grid, GridFunction, Partition

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# argument parsing helpers


def parse_box(text: str) -> tuple[list[float], list[float]]:
    """``"0:1,0:2"`` -> ``([0, 0], [1, 2])``."""
    lo, hi = [], []
    for part in text.split(","):
        try:
            a, b = part.split(":")
            lo.append(float(a))
            hi.append(float(b))
        except ValueError:
            raise UsageError(f"--box: expected lo:hi per axis, got {part!r}") from None
    return lo, hi


def parse_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def load_json_arg(text: str, what: str):
    """Inline JSON or ``@path`` / path to a JSON file."""
    path = text[1:] if text.startswith("@") else text
    if os.path.isfile(path):
        try:
            return json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{what}: {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        raise ConfigError(f"{what}: not valid JSON and no such file: {text!r}") from None


def make_grid(lo, hi, n) -> Grid:
    if len(n) == 1 and len(lo) > 1:
        n = n * len(lo)
    if len(n) != len(lo):
        raise UsageError("--grid must give one size or one size per axis")
    return Grid.box(lo, hi, n)


def resolve_potential(text: str, grid: Grid):
    if text == "zero":
        return None
    if text.startswith("quadratic:"):
        try:
            c = float(text.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"--potential: bad strength in {text!r}") from None
        return bosegas.quadratic_potential(grid, c)
    data = load_json_arg(text, "--potential")
    if isinstance(data, dict) and "grid" in data:
        gf = GridFunction.from_dict(data)
        if gf.grid != grid:
            raise ConfigError("--potential: grid in file does not match --box/--grid")
        return gf
    values = np.asarray(data.get("values") if isinstance(data, dict) else data, dtype=float)
    if values.size != grid.size:
        raise ConfigError(f"--potential: expected {grid.size} values, got {values.size}")
    return GridFunction(grid, values.ravel())


def resolve_threads(args) -> int:
    if args.threads is not None:
        threads = args.threads
    else:
        threads = int(os.environ.get(io.THREADS_ENV, "1"))
    if threads < 1:
        raise UsageError("thread count must be positive")
    return threads


def resolve_out_dir(args) -> Path:
    if args.out_dir is not None:
        return Path(args.out_dir)
    return Path(os.environ.get(io.OUT_DIR_ENV, "symbridge-out"))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out-dir", help=f"output directory (env {io.OUT_DIR_ENV})")
    common.add_argument("--threads", type=int, help=f"worker count (env {io.THREADS_ENV}, default 1)")
    common.add_argument("--seed", type=int, default=0, help="master seed, 64-bit unsigned")

    parser = _Parser(prog="symbridge", description="Symmetrised Brownian bridge ensembles.")
    parser.add_argument("--version", action="version", version=io.package_version())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample", parents=[common], help="draw symmetrised bridge ensembles")
    p.add_argument("--m", required=True, help='initial measure JSON, e.g. {"type":"uniform","lo":[0],"hi":[1]}')
    p.add_argument("--n", type=int, required=True, help="particles per ensemble")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--steps", type=int, required=True, help="time steps per bridge")
    p.add_argument("--ensembles", type=int, default=1)
    p.add_argument("--cells", help="cells per axis for endpoint pair measures")
    p.add_argument("--save-paths", action="store_true", help="dump raw paths (float64 LE)")

    p = sub.add_parser("mixture", parents=[common], help="sample the cell-constrained mixture")
    p.add_argument("--eta", required=True, help="pair measure JSON (matrix)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--box", required=True)
    p.add_argument("--cells", required=True, help="cells per axis")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--save-paths", action="store_true")

    p = sub.add_parser("rate", parents=[common], help="evaluate a rate function from a JSON job")
    p.add_argument("job", help="job JSON file")
    p.add_argument("--track", action="store_true", help="also write value_track.csv")

    p = sub.add_parser("trace", parents=[common], help="canonical Bose gas trace asymptotics")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--box", required=True, help="lo:hi per axis, comma-separated")
    p.add_argument("--grid", help="grid size (one or per axis); omit for the analytic box spectrum")
    p.add_argument("--potential", required=True, help="zero | quadratic:c | file.json")
    p.add_argument("--n-max", type=int, required=True)
    p.add_argument("--levels", type=int, help="number of one-particle levels to keep")
    p.add_argument("--out", choices=("json", "csv"), default="csv")

    p = sub.add_parser("verify", parents=[common], help="run acceptance suites")
    p.add_argument("--suite", required=True, choices=[*acceptance.SUITES, "all"])
    p.add_argument("--grid", type=int, help="grid size override for the optimiser check")
    p.add_argument("--steps", type=int, help="time-step override for the optimiser check")
    p.add_argument("--boundary", choices=("images", "truncate"), help="kernel boundary override")

    p = sub.add_parser("count", parents=[common], help="exact symmetrised counts")
    p.add_argument("--eta", required=True, help="count matrix or pair measure JSON")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--R", help="comma-separated cell labels for a fixed configuration")
    return parser


# ---------------------------------------------------------------------------
# subcommands


def _pair_measure(data, n=None) -> comb.PairMeasure:
    arr = np.asarray(data.get("entries", data.get("counts")) if isinstance(data, dict) else data)
    if arr.ndim != 2:
        raise ConfigError("eta must be a square matrix")
    if np.issubdtype(arr.dtype, np.integer):
        return comb.PairMeasure.from_counts(arr, n)
    return comb.PairMeasure(arr.astype(float), n=n)


def cmd_sample(args, out: Path, threads: int) -> tuple[dict, list]:
    m = ensemble.initial_measure(load_json_arg(args.m, "--m"))
    seed = args.seed
    partition = None
    if args.cells:
        partition = Partition.uniform(m.lo, m.hi, parse_ints(args.cells)) if isinstance(m, ensemble.UniformBox) \
            else None
        if partition is None:
            raise ConfigError("--cells needs a uniform initial measure")

    def draw(i):
        return ensemble.sample_sym(m, args.n, args.beta, args.steps, seed=seed,
                                   index=i, with_paths=args.save_paths)

    with threadpool_limits(1):
        samples = ensemble.sample_many(draw, args.ensembles, threads)
    records, files = [], []
    for i, s in enumerate(samples):
        rec = {"index": i, **s.summary()}
        if partition is not None:
            rec["endpoint_pairs"] = ensemble.endpoint_pairs(s, partition).entries
        records.append(rec)
        if args.save_paths:
            files.extend(io.dump_paths(out / f"paths_{i:05d}.f64", s.paths, {"index": i}))
    files.append(io.write_jsonl(out / "ensembles.jsonl", records))
    config = {"m": args.m, "n": args.n, "beta": args.beta, "steps": args.steps,
              "ensembles": args.ensembles, "cells": args.cells, "save_paths": args.save_paths}
    return config, files


def cmd_mixture(args, out: Path, threads: int) -> tuple[dict, list]:
    lo, hi = parse_box(args.box)
    partition = Partition.uniform(lo, hi, parse_ints(args.cells))
    eta = _pair_measure(load_json_arg(args.eta, "--eta"), args.n)
    rng = ensemble.spawn_rng(args.seed, 0)
    s = ensemble.sample_mixture(eta, args.n, partition, args.beta, args.steps, rng,
                                with_paths=args.save_paths)
    files = [io.write_json(out / "mixture.json", {
        **s.summary(), "endpoint_pairs": ensemble.endpoint_pairs(s, partition).entries,
        "starts": s.starts, "ends": s.ends})]
    if args.save_paths:
        files.extend(io.dump_paths(out / "paths.f64", s.paths))
    config = {"eta": eta.entries, "n": args.n, "box": args.box, "cells": args.cells,
              "beta": args.beta, "steps": args.steps}
    return config, files


def _require(job: dict, key: str):
    if key not in job:
        raise ConfigError(f"job.{key}: required")
    return job[key]


def load_rate_job(job: dict):
    """Resolve a rate job into solver arguments."""
    mode = rates.BridgeMode(_require(job, "mode"))
    beta = float(_require(job, "beta"))
    gspec = _require(job, "grid")
    try:
        grid = Grid.box(gspec["lo"], gspec["hi"], gspec["n"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"job.grid: needs lo, hi and n ({exc})") from None
    if "p" in job and "p_file" in job:
        raise ConfigError("job: give p or p_file, not both")
    if "p_file" in job:
        gf = GridFunction.load(job["p_file"])
        if gf.grid != grid:
            raise ConfigError("job.p_file: grid does not match job.grid")
        p = DensityOnGrid(grid, gf.values)
    else:
        pspec = _require(job, "p")
        if pspec == "ground_state":
            p = DensityOnGrid.ground_state(grid)
        else:
            p = DensityOnGrid.normalized(grid, np.asarray(pspec, dtype=float).ravel())
    part_spec = job.get("partition")
    if part_spec is None:
        partition = None
    elif isinstance(part_spec, dict) and "block" in part_spec:
        partition = Partition.from_grid(grid, part_spec["block"])
    else:
        partition = Partition.from_dict(part_spec)
    m = job.get("m", "lebesgue")
    if m != "lebesgue":
        m = np.asarray(m, dtype=float)
    g = job.get("g")
    if g is not None:
        g = np.asarray(g, dtype=float)
    tol = job.get("tolerances", {})
    unknown = set(tol) - {"gtol", "maxiter"}
    if unknown:
        raise ConfigError(f"job.tolerances: unknown keys {sorted(unknown)}")
    kwargs = dict(partition=partition, steps=job.get("steps"), boundary=job.get("boundary", "images"), **tol)
    return mode, beta, grid, p, m, g, job.get("q"), kwargs


def cmd_rate(args, out: Path, threads: int) -> tuple[dict, list]:
    job = load_json_arg(args.job, "job")
    mode, beta, grid, p, m, g, q, kwargs = load_rate_job(job)
    with threadpool_limits(threads):
        if q is not None:
            if g is not None or m != "lebesgue":
                raise ConfigError("job: m and g are not used when q is given")
            res = rates.solve_J_q(np.asarray(q, dtype=float), p, beta, mode, **kwargs)
        else:
            res = rates.solve_J_sym(p, m, beta, mode, g, **kwargs)
    st = res.state
    result = {
        "value": res.value,
        "iterations": st.iterations,
        "q": np.asarray(getattr(st.q, "entries", st.q)),
        "f": res.f.values,
        "diagnostics": {"marginal_gap": st.marginal_gap, "gradient_norm": st.gradient_norm,
                        "target_if_ground_state": beta * float(np.sum(np.pi**2 / np.asarray(grid.lengths) ** 2))},
    }
    files = [io.write_json(out / "rate.json", result)]
    if args.track:
        files.append(io.write_csv(out / "value_track.csv", ["iteration", "value"], enumerate(st.value_track)))
    return job, files


def cmd_trace(args, out: Path, threads: int) -> tuple[dict, list]:
    lo, hi = parse_box(args.box)
    if args.grid is None:
        if args.potential != "zero":
            raise UsageError("--grid is required for a nonzero potential")
        spec = bosegas.analytic_spectrum(lo, hi, k=args.levels, beta=None if args.levels else args.beta)
    else:
        grid = make_grid(lo, hi, parse_ints(args.grid))
        W = resolve_potential(args.potential, grid)
        with threadpool_limits(threads):
            spec = bosegas.spectrum(grid, W if W is not None else np.zeros(grid.size), k=args.levels)
    table = bosegas.partition_recursion(spec, args.beta, args.n_max)
    report = bosegas.ldp_check(table, spec, args.beta)
    if args.out == "csv":
        path = io.write_csv(out / "trace.csv", ["N", "logZ", "a_N", "target", "deviation"], report.rows())
    else:
        path = io.write_json(out / "trace.json", report.to_dict())
    config = {"beta": args.beta, "box": args.box, "grid": args.grid, "potential": args.potential,
              "n_max": args.n_max, "levels": args.levels, "out": args.out}
    return config, [path]


def cmd_count(args, out: Path, threads: int) -> tuple[dict, list]:
    eta = _pair_measure(load_json_arg(args.eta, "--eta"), args.n)
    result = {"n": args.n, "eta": eta.entries, "total": str(comb.count_sym_total(eta, args.n))}
    if args.R:
        fixed = comb.count_sym_fixed_R(parse_ints(args.R), eta, args.n)
        result.update(R=parse_ints(args.R), fixed_R=str(fixed.count), admissible=fixed.admissible)
    return {"eta": args.eta, "n": args.n, "R": args.R}, [io.write_json(out / "count.json", result)]


def cmd_verify(args, out: Path, threads: int) -> tuple[dict, list, int]:
    overrides = {"grid_n": args.grid, "time_steps": args.steps, "boundary": args.boundary, "threads": threads}
    with threadpool_limits(threads):
        results = acceptance.run_suite(args.suite, **overrides)
    for r in results:
        print(r.line())
    passed = all(r.passed for r in results)
    report = {"suite": args.suite, "passed": passed, "criteria": [r.to_dict() for r in results]}
    path = io.write_json(out / "verify.json", report)
    config = {"suite": args.suite, "grid": args.grid, "steps": args.steps, "boundary": args.boundary}
    return config, [path], EXIT_OK if passed else EXIT_ACCEPTANCE


COMMANDS = {"sample": cmd_sample, "mixture": cmd_mixture, "rate": cmd_rate,
            "trace": cmd_trace, "count": cmd_count, "verify": cmd_verify}


def run(argv=None) -> int:
    out = None
    try:
        args = build_parser().parse_args(argv)
        if not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be a 64-bit unsigned integer")
        threads = resolve_threads(args)
        out = resolve_out_dir(args)
        result = COMMANDS[args.command](args, out, threads)
        config, files = result[0], result[1]
        code = result[2] if len(result) > 2 else EXIT_OK
        config = {"seed": args.seed, "threads": threads, **config}
        io.write_manifest(out, args.command, config, files)
        return code
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if out is not None:
            path = io.write_json(out / "solver_history.json", {"message": str(exc), "history": exc.history})
            print(f"solver history written to {path}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SymBridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
