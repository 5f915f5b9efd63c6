"""Acceptance checks, grouped into the suites run by ``symbridge verify``.

Every check returns a :class:`CriterionResult` with the measured values and
the tolerance it was held to.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy import stats

from . import bosegas, combinatorics as comb, ensemble, kernels, rates
from .errors import ConvergenceError, SymBridgeError
from .grid import DensityOnGrid, Grid, GridFunction, Partition


@dataclass
class CriterionResult:
    criterion: int
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    tolerance: dict = field(default_factory=dict)
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} criterion {self.criterion} ({self.name}) in {self.seconds:.1f}s {self.detail}".rstrip()

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(criterion: int, name: str, body: Callable[[], tuple[bool, dict, dict, str]]) -> CriterionResult:
    start = time.perf_counter()
    try:
        passed, measured, tol, detail = body()
    except SymBridgeError as exc:
        passed, measured, tol, detail = False, {"error": str(exc)}, {}, type(exc).__name__
    return CriterionResult(criterion, name, bool(passed), measured, tol, time.perf_counter() - start, detail)


# ---------------------------------------------------------------------------
# 1. counting identities


def check_counting(max_n: int = 6, max_sigma: int = 3, budget: float = 60.0) -> CriterionResult:
    def body():
        checked = 0
        mismatches = []
        start = time.perf_counter()
        for k in range(1, max_sigma + 1):
            for n in range(1, max_n + 1):
                total_table = comb.brute_force_table(n, k)
                per_r = comb.brute_force_fixed_R_tables(n, k)
                labels = list(itertools.product(range(k), repeat=n))
                for counts in comb.equal_marginal_counts(n, k):
                    eta = comb.PairMeasure.from_counts(counts)
                    if comb.count_sym_total(eta, n) != comb.table_lookup(total_table, eta, n):
                        mismatches.append(("total", k, n, counts.tolist()))
                    for R, table in zip(labels, per_r):
                        got = comb.count_sym_fixed_R(R, eta, n).count
                        if got != comb.table_lookup(table, eta, n):
                            mismatches.append(("fixed_R", k, n, counts.tolist(), R))
                    checked += 1
        elapsed = time.perf_counter() - start
        ok = not mismatches and elapsed < budget
        return ok, {"measures_checked": checked, "mismatches": len(mismatches),
                    "first_mismatch": mismatches[0] if mismatches else None,
                    "runtime_s": elapsed}, {"mismatches": 0, "runtime_s": budget}, ""

    return _timed(1, "counting identities", body)


# ---------------------------------------------------------------------------
# 2. rounding onto the (1/n)-grid


def random_rounding_instance(rng, k: int, n: int) -> comb.PairMeasure:
    """Random equal-marginal measure with one off-diagonal entry above ``2 k^2 / n``."""
    thresh = comb.rounding_threshold(k, n)
    if 2.0 * thresh > 1.0:
        raise ValueError(f"no equal-marginal measure on {k} labels can satisfy the threshold for n={n}")
    base = rates.balance(rng.uniform(0.05, 1.0, size=(k, k)))
    r0, s0 = rng.choice(k, size=2, replace=False)
    cycle = np.zeros((k, k))
    cycle[r0, s0] = cycle[s0, r0] = 0.5
    w = rng.uniform(2.0 * thresh, 1.0)
    eta = w * cycle + (1.0 - w) * base
    return comb.PairMeasure(eta / eta.sum())


def rounding_cases() -> list[tuple[int, int]]:
    """``(|Sigma|, n)`` pairs from {2,3,4} x {50,100,500} where the hypothesis can hold."""
    return [(k, n) for k in (2, 3, 4) for n in (50, 100, 500)
            if 2.0 * comb.rounding_threshold(k, n) <= 1.0]


def check_rounding(instances: int = 1000, seed: int = 20240607) -> CriterionResult:
    def body():
        rng = np.random.default_rng(seed)
        cases = rounding_cases()
        failures = []
        worst = 0.0
        for i in range(instances):
            k, n = cases[i % len(cases)]
            eta = random_rounding_instance(rng, k, n)
            out = comb.round_pair_measure(eta, n)
            c = out.counts
            bound = Fraction(2 * k * k, n)
            dev = max(abs(Fraction(int(c[r, s]), n) - Fraction(float(eta.entries[r, s])))
                      for r in range(k) for s in range(k))
            worst = max(worst, float(dev / bound))
            ok = (int(c.sum()) == n and np.all(c >= 0)
                  and np.array_equal(c.sum(axis=0), c.sum(axis=1)) and dev <= bound)
            if not ok:
                failures.append({"k": k, "n": n, "eta": eta.entries.tolist(), "counts": c.tolist()})
        return (not failures, {"instances": instances, "failures": len(failures),
                               "cases": cases, "worst_deviation_over_bound": worst},
                {"failures": 0}, "")

    return _timed(2, "rounding onto the count grid", body)


# ---------------------------------------------------------------------------
# 3. bridge law


def check_bridge(samples: int = 100_000, steps: int = 64, beta: float = 1.0, seed: int = 7) -> CriterionResult:
    def body():
        x, y = np.array([0.2]), np.array([0.9])
        rng = ensemble.spawn_rng(seed, 3)
        paths = ensemble.sample_bridges(np.tile(x, (samples, 1)), np.tile(y, (samples, 1)), beta, steps, rng)
        exact = bool(np.all(paths[:, 0, 0] == x[0]) and np.all(paths[:, -1, 0] == y[0]))
        # the symmetrised sampler must also match endpoints bit for bit
        sym = ensemble.sample_sym(ensemble.UniformBox([0.0], [1.0]), 200, beta, 16, seed=seed, index=1)
        exact &= bool(np.array_equal(sym.paths[:, -1], sym.starts[sym.sigma])
                      and np.array_equal(sym.paths[:, 0], sym.starts))
        mid = paths[:, steps // 2, 0]
        mean_t = x[0] + 0.5 * (y[0] - x[0])
        var_t = beta / 2.0
        mean_se = math.sqrt(var_t / samples)
        var_se = var_t * math.sqrt(2.0 / (samples - 1))
        mean_z = abs(mid.mean() - mean_t) / mean_se
        var_z = abs(mid.var(ddof=1) - var_t) / var_se
        ks = stats.kstest(mid, "norm", args=(mean_t, math.sqrt(var_t)))
        ok = exact and mean_z < 3 and var_z < 3 and ks.pvalue > 0.01
        return ok, {"endpoints_exact": exact, "mean": float(mid.mean()), "variance": float(mid.var(ddof=1)),
                    "mean_z": mean_z, "variance_z": var_z, "ks_pvalue": float(ks.pvalue)}, \
            {"z": 3.0, "ks_pvalue": 0.01, "target_mean": mean_t, "target_variance": var_t}, ""

    return _timed(3, "bridge law", body)


# ---------------------------------------------------------------------------
# 4. Girsanov normalisation


def check_girsanov(cases: int = 20, seed: int = 11, n: int = 100) -> CriterionResult:
    def body():
        rng = np.random.default_rng(seed)
        grid = Grid.box(0.0, 1.0, n)
        xs = grid.points[:, 0]
        worst = 0.0
        values = []
        for _ in range(cases):
            amps = rng.normal(scale=5.0, size=4)
            f = sum(a * np.sin((j + 1) * np.pi * xs) for j, a in enumerate(amps)) + rng.normal(scale=3.0)
            beta = float(rng.uniform(0.2, 2.0))
            x = [float(rng.uniform(0.05, 0.95))]
            mass = kernels.girsanov_mass(grid, f, beta, x)
            values.append(mass)
            worst = max(worst, abs(mass - 1.0))
        return worst <= 1e-6, {"max_abs_error": worst, "masses": values}, {"abs": 1e-6}, ""

    return _timed(4, "Girsanov normalisation", body)


# ---------------------------------------------------------------------------
# 5. Donsker-Varadhan benchmark


def ground_state_density(length: float, n: int) -> DensityOnGrid:
    return DensityOnGrid.ground_state(Grid.box(0.0, length, n))


def check_donsker_varadhan(n: int = 400) -> CriterionResult:
    def body():
        e1 = rates.donsker_varadhan(ground_state_density(1.0, n))
        scaled = {L: rates.donsker_varadhan(ground_state_density(L, n)) * L**2 for L in (1.0, 2.0, 4.0)}
        spread = max(abs(v / scaled[1.0] - 1.0) for v in scaled.values())
        ok = abs(e1 - math.pi**2) <= 0.01 and spread <= 0.005
        return ok, {"energy": e1, "error": e1 - math.pi**2, "scaled_energies": scaled,
                    "scaling_spread": spread}, {"abs": 0.01, "scaling_rel": 0.005}, ""

    return _timed(5, "Donsker-Varadhan benchmark", body)


# ---------------------------------------------------------------------------
# 6. explicit optimiser at desk scale


def check_saddle_value(grid_n: int = 200, beta: float = 1.0, time_steps: int | None = None,
                 boundary: str = "images", budget: float = 600.0) -> CriterionResult:
    def body():
        start = time.perf_counter()
        grid = Grid.box(0.0, 1.0, grid_n)
        p = DensityOnGrid.ground_state(grid)
        res = rates.solve_J_sym(p, "lebesgue", beta, rates.BridgeMode.CANONICAL,
                                steps=time_steps, boundary=boundary)
        target = beta * math.pi**2
        rel = abs(res.value / target - 1.0)
        tv = 0.5 * float(np.abs(res.state.q.first_marginal - p.values * grid.cell_volume).sum())
        jid = rates.jident_construct(p, beta, steps=time_steps, boundary=boundary)
        elapsed = time.perf_counter() - start
        ok = (grid_n >= 200 and rel <= 0.02 and tv <= 1e-2 and abs(jid.eigenvalue) <= 1e-3
              and elapsed < budget)
        return ok, {"value": res.value, "target": target, "relative_gap": rel, "marginal_tv": tv,
                    "marginal_gap": res.state.marginal_gap, "eigenvalue_f_star": jid.eigenvalue,
                    "explicit_pair_value": jid.value, "grid_n": grid_n,
                    "steps": time_steps or rates.default_steps(grid, beta),
                    "boundary": boundary, "runtime_s": elapsed}, \
            {"relative_gap": 0.02, "marginal_tv": 1e-2, "eigenvalue": 1e-3, "runtime_s": budget,
             "min_grid_n": 200}, ""

    return _timed(6, "explicit optimiser (saddle value)", body)


# ---------------------------------------------------------------------------
# 7. permanents


def check_permanents() -> CriterionResult:
    def body():
        m = np.array([0.5, 0.5])
        g = np.array([[2.0, 1.0], [1.0, 2.0]])
        value, _ = rates.solve_pair_entropy(m, g)
        limit = -value
        rows = {}
        for n in (4, 6, 8):
            rows[n] = math.log(rates.permanent_average(m, g, n)) / n
        gaps = [abs(rows[n] - limit) for n in (4, 6, 8)]
        monotone = gaps[0] > gaps[1] > gaps[2]
        v1, q1 = rates.solve_pair_entropy(m, np.ones((2, 2)))
        prod_err = float(np.abs(q1.entries - np.outer(m, m)).max())
        ok = monotone and gaps[2] < 0.1 and abs(v1) <= 1e-8 and prod_err <= 1e-8
        return ok, {"limit": limit, "normalised_logs": rows, "gaps": gaps, "g_one_value": v1,
                    "g_one_product_error": prod_err}, {"gap_n8": 0.1, "g_one": 1e-8}, ""

    return _timed(7, "permanent asymptotics", body)


# ---------------------------------------------------------------------------
# 8. Bose gas trace asymptotics


def check_trace(n_max: int = 200, beta: float = 1.0, trap_grid: int = 400) -> CriterionResult:
    def body():
        spec = bosegas.analytic_spectrum(0.0, 1.0, beta=beta)
        table = bosegas.partition_recursion(spec, beta, n_max)
        report = bosegas.ldp_check(table, spec, beta)
        free_dev = abs(report.a_n[-1] + math.pi**2)
        decreasing = report.decreasing_from(16)

        oracle_err = 0.0
        cycle_err = 0.0
        toys = [(spec, beta), (bosegas.Spectrum(2.0 * np.arange(1, 13)), 2.0),
                (bosegas.Spectrum(np.pi**2 * np.arange(1, 9) ** 2 / 4.0), 0.5)]
        for toy, b in toys:
            tb = bosegas.partition_recursion(toy, b, 8)
            for n in range(1, 7):
                ref = bosegas.brute_force_trace(toy, b, n)
                oracle_err = max(oracle_err, abs(math.exp(tb.log_z[n]) / ref - 1.0))
            for n in range(1, 9):
                ref = bosegas.cycle_type_sum(toy, b, n)
                cycle_err = max(cycle_err, abs(math.exp(tb.log_z[n]) / ref - 1.0))

        grid = Grid.box(0.0, 1.0, trap_grid)
        W = bosegas.quadratic_potential(grid, 100.0)
        trap_spec = bosegas.spectrum(grid, W)
        trap = bosegas.ldp_check(bosegas.partition_recursion(trap_spec, beta, n_max), trap_spec, beta)
        trap_dev = abs(trap.a_n[-1] + beta * trap_spec.ground)
        ok = (free_dev < 0.05 and decreasing and oracle_err <= 1e-12 and cycle_err <= 1e-12
              and trap_dev < 0.05)
        return ok, {"free_deviation": free_dev, "deviation_decreasing_from_16": decreasing,
                    "brute_force_rel_err": oracle_err, "cycle_sum_rel_err": cycle_err,
                    "trap_deviation": trap_dev, "trap_E1": trap_spec.ground,
                    "trap_alternative_target": trap.alternative_target, "trap_target": trap.target}, \
            {"deviation": 0.05, "oracle_rel": 1e-12}, ""

    return _timed(8, "Bose gas trace asymptotics", body)


# ---------------------------------------------------------------------------
# 9. endpoint law of large numbers


def check_endpoint_lln(ensembles: int = 10_000, n: int = 10_000, seed: int = 2024,
                       threads: int = 1) -> CriterionResult:
    def body():
        m = ensemble.UniformBox([0.0], [1.0])
        part = Partition.uniform(0.0, 1.0, 2)

        def draw(i):
            s = ensemble.sample_sym(m, n, 1.0, 1, seed=seed, index=i, with_paths=False)
            return ensemble.endpoint_pairs(s, part).entries

        mean = np.mean(ensemble.sample_many(draw, ensembles, threads), axis=0)
        target = np.outer(part.weights, part.weights)
        tv = 0.5 * float(np.abs(mean - target).sum())
        return tv < 0.02, {"tv": tv, "mean_pair_measure": mean.tolist()}, {"tv": 0.02}, ""

    return _timed(9, "endpoint law of large numbers", body)


# ---------------------------------------------------------------------------
# 10. solver hygiene


def gradient_probes(probes: int = 20, seed: int = 5, n: int = 24, cells: int = 4,
                    eps: float = 1e-5) -> list[float]:
    """Relative errors of the analytic f-gradient against central differences."""
    rng = np.random.default_rng(seed)
    grid = Grid.box(0.0, 1.0, n)
    part = Partition.from_grid(grid, n // cells)
    errors = []
    for i in range(probes):
        mode = rates.BridgeMode.CANONICAL if i % 2 else rates.BridgeMode.NORMALIZED
        beta = float(rng.uniform(0.2, 1.5))
        steps = 32
        prob = rates.BridgeProblem(grid, beta, mode, part, steps=steps)
        q = rng.exponential(size=(part.size, part.size))
        q /= q.sum()
        p = DensityOnGrid.normalized(grid, rng.uniform(0.5, 1.5, grid.size))
        f = rng.normal(scale=2.0, size=grid.size)
        direction = rng.normal(size=grid.size)
        analytic = float((beta * p.values * grid.cell_volume - prob.pairing_gradient(prob.kernel(f), q)) @ direction)

        def obj(fv):
            return rates.objective_J(q, GridFunction(grid, fv), p, beta, mode=mode, partition=part, steps=steps)

        numeric = (obj(f + eps * direction) - obj(f - eps * direction)) / (2 * eps)
        errors.append(abs(analytic - numeric) / max(abs(numeric), 1e-12))
    return errors


def explicit_failures() -> dict:
    """Each iterative solver, starved of iterations, must raise."""
    grid = Grid.box(0.0, 1.0, 40)
    x = grid.points[:, 0]
    p2 = DensityOnGrid.normalized(grid, np.sin(np.pi * x) ** 2 * (1 + 0.5 * np.cos(2 * np.pi * x)))
    out = {}
    attempts = {
        "principal_eigen": lambda: kernels.principal_eigen(grid, np.zeros(grid.size), maxiter=1),
        "balance": lambda: rates.balance(np.random.default_rng(0).exponential(size=(5, 5)), maxiter=1),
        "q_descent": lambda: rates.q_descent(np.log(np.random.default_rng(1).exponential(size=(6, 6))), maxiter=1),
        "solve_J_q": lambda: rates.solve_J_q(rates.jident_construct(p2, 1.0).q_star, p2, 1.0,
                                             "canonical", maxiter=1),
        "solve_J_sym": lambda: rates.solve_J_sym(p2, "lebesgue", 1.0, "canonical", maxiter=1),
    }
    for name, call in attempts.items():
        try:
            call()
            out[name] = False
        except ConvergenceError as exc:
            out[name] = bool(exc.history)
    return out


def check_solver_hygiene(probes: int = 20) -> CriterionResult:
    def body():
        errors = gradient_probes(probes)
        failures = explicit_failures()
        ok = max(errors) < 1e-4 and all(failures.values())
        return ok, {"max_gradient_rel_err": max(errors), "gradient_rel_errs": errors,
                    "explicit_failures": failures}, {"gradient_rel": 1e-4}, ""

    return _timed(10, "solver hygiene", body)


SUITES: dict[str, list[Callable[..., CriterionResult]]] = {
    "counting": [check_counting],
    "rounding": [check_rounding],
    "bridge": [check_bridge, check_girsanov],
    "entropy": [check_donsker_varadhan],
    "jident": [check_saddle_value, check_solver_hygiene],
    "lln": [check_permanents, check_endpoint_lln],
    "trace": [check_trace],
}


def run_suite(name: str, **overrides) -> list[CriterionResult]:
    """Run a named suite (or ``"all"``); keyword overrides go to every check accepting them."""
    import inspect

    if name == "all":
        checks = [c for suite in SUITES.values() for c in suite]
    elif name in SUITES:
        checks = SUITES[name]
    else:
        raise KeyError(name)
    results = []
    for check in checks:
        params = inspect.signature(check).parameters
        kwargs = {k: v for k, v in overrides.items() if k in params and v is not None}
        results.append(check(**kwargs))
    return sorted(results, key=lambda r: r.criterion)
