"""
Experiment commands
-------------------
check | solve | converge | stability | lipschitz, each driven by an
ExperimentConfig (JSON) and writing CSV/JSON artifacts under
<output>/<command>/. Commands return the process exit code:
0 success, 1 condition-profile mismatch, 2 computational failure.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import console
from .conditions import (SamplePlan, check_key_condition, check_sufficient_over_plan,
                         default_margin_constant)
from .core import PathBundle, ProblemSpec, theta_norm
from .errors import ConfigInvalidError, FBSDEError
from .exports import config_hash, write_csv, write_json, write_parquet
from .global_solver import (decoupling_ratio_positive, forward_assemble, probe_initial_value_map,
                            resolve_partition, solve, wellposedness_certificate)
from .oracles import (OracleEntry, analytic_eval, brute_force_reference, get_problem,
                      list_problems, refine_params)
from .settings import get_settings
from .small_time import DiscretizationParams

logger = logging.getLogger(__name__)

OK, MISMATCH, FAILURE = 0, 1, 2
FORMATS = ("csv", "json", "parquet")
ERROR_FLOOR = 1e-11


# ----------------------------
# Configuration
# ----------------------------
@dataclass(frozen=True)
class CheckSection:
    c: float | str = 1.0
    epsilon: float = 0.0
    points: int = 8
    sphere_samples: int = 64
    refine_iters: int = 50
    seed: int = 0


@dataclass(frozen=True)
class StabilitySection:
    perturbation: str = "g_constant"
    epsilons: tuple = (0.1, 0.01, 0.001)


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    problem_params: dict
    discretization: DiscretizationParams
    partition: int | str = 1
    check: CheckSection = field(default_factory=CheckSection)
    mc_paths: int = 1000
    mc_seed: int = 0
    output_dir: str = "exports/results"
    formats: tuple = ("csv", "json")
    stability: StabilitySection = field(default_factory=StabilitySection)
    levels: int = 3
    interior: tuple | None = None
    c_k: float = 1.0
    pairs: int = 200
    threads: int = 1

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalidError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(payload)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        settings = get_settings()
        try:
            problem = payload["problem"]
            disc = payload["discretization"]
            check = payload.get("check", {})
            plan = check.get("plan", {})
            mc = payload.get("mc", {})
            output = payload.get("output", {})
            stab = payload.get("stability", {})
            conv = payload.get("converge", {})
            lip = payload.get("lipschitz", {})
            config = cls(
                problem=str(problem["name"]),
                problem_params=dict(problem.get("params", {})),
                discretization=DiscretizationParams(
                    steps=int(disc["steps"]),
                    x_lo=float(disc["x_lo"]),
                    x_hi=float(disc["x_hi"]),
                    dx=float(disc["dx"]),
                    quad_order=int(disc.get("quad_order", 8)),
                    inner_tol=float(disc.get("inner_tol", 1e-12)),
                    inner_max=int(disc.get("inner_max", 200)),
                    damping=float(disc.get("damping", 1.0)),
                ),
                partition=payload.get("partition", 1),
                check=CheckSection(
                    c=check.get("c", 1.0),
                    epsilon=float(check.get("epsilon", 0.0)),
                    points=int(plan.get("points", 8)),
                    sphere_samples=int(plan.get("sphere_samples", 64)),
                    refine_iters=int(plan.get("refine_iters", 50)),
                    seed=int(plan.get("seed", 0)),
                ),
                mc_paths=int(mc.get("M", 1000)),
                mc_seed=int(mc.get("seed", 0)),
                output_dir=str(output.get("directory", settings.output_dir)),
                formats=tuple(output.get("formats", ("csv", "json"))),
                stability=StabilitySection(
                    perturbation=str(stab.get("perturbation", "g_constant")),
                    epsilons=tuple(float(e) for e in stab.get("epsilons", (0.1, 0.01, 0.001))),
                ),
                levels=int(conv.get("levels", 3)),
                interior=None if conv.get("interior") is None else tuple(float(v) for v in conv["interior"]),
                c_k=float(lip.get("c_k", settings.c_k)),
                pairs=int(lip.get("pairs", 200)),
                threads=int(payload.get("threads", settings.threads)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalidError(f"invalid experiment config: {exc!r}") from exc
        config.validate()
        return config

    def validate(self) -> None:
        try:
            self.entry().spec
        except FBSDEError as exc:
            raise ConfigInvalidError(str(exc)) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigInvalidError(f"problem {self.problem!r}: {exc}") from exc
        p = self.partition
        if p != "auto" and (isinstance(p, bool) or not isinstance(p, int) or p < 1):
            raise ConfigInvalidError(f"partition must be a positive integer or 'auto', got {p!r}")
        c = self.check.c
        if c != "auto" and (isinstance(c, bool) or not isinstance(c, (int, float)) or not c > 0):
            raise ConfigInvalidError(f"check.c must be positive or 'auto', got {c!r}")
        if self.check.epsilon < 0:
            raise ConfigInvalidError("check.epsilon must be >= 0")
        if self.check.points < 1 or self.check.refine_iters < 0:
            raise ConfigInvalidError("check.plan needs points >= 1 and refine_iters >= 0")
        if self.mc_paths < 1:
            raise ConfigInvalidError("mc.M must be >= 1")
        unknown = sorted(set(self.formats) - set(FORMATS))
        if unknown:
            raise ConfigInvalidError(f"unknown output format(s) {unknown}")
        if self.stability.perturbation not in PERTURBATIONS:
            raise ConfigInvalidError(f"unknown perturbation {self.stability.perturbation!r}")
        if any(e < 0 for e in self.stability.epsilons):
            raise ConfigInvalidError("stability.epsilons must be >= 0")
        if self.levels < 2:
            raise ConfigInvalidError("converge.levels must be >= 2")
        if self.interior is not None and not (len(self.interior) == 2 and self.interior[0] < self.interior[1]):
            raise ConfigInvalidError("converge.interior must be [lo, hi] with lo < hi")
        if self.c_k < 0:
            raise ConfigInvalidError("lipschitz.c_k must be >= 0")
        if self.pairs < 1:
            raise ConfigInvalidError("lipschitz.pairs must be >= 1")
        if self.threads < 1:
            raise ConfigInvalidError("threads must be >= 1")

    def entry(self) -> OracleEntry:
        return get_problem(self.problem, self.problem_params, grid=self.discretization)

    def with_overrides(self, seed: int | None = None, threads: int | None = None,
                       out: str | None = None) -> "ExperimentConfig":
        config = self
        if seed is not None:
            config = replace(config, mc_seed=int(seed), check=replace(config.check, seed=int(seed)))
        if threads is not None:
            config = replace(config, threads=int(threads))
        if out is not None:
            config = replace(config, output_dir=str(out))
        config.validate()
        return config

    def to_dict(self) -> dict:
        """Resolved config; threads and the output directory are left out."""
        return {
            "problem": {"name": self.problem, "params": dict(sorted(self.problem_params.items()))},
            "discretization": self.discretization.to_dict(),
            "partition": self.partition,
            "check": {
                "c": self.check.c,
                "epsilon": self.check.epsilon,
                "plan": {
                    "points": self.check.points,
                    "sphere_samples": self.check.sphere_samples,
                    "refine_iters": self.check.refine_iters,
                    "seed": self.check.seed,
                },
            },
            "mc": {"M": self.mc_paths, "seed": self.mc_seed},
            "output": {"formats": list(self.formats)},
            "stability": {"perturbation": self.stability.perturbation,
                          "epsilons": list(self.stability.epsilons)},
            "converge": {"levels": self.levels,
                         "interior": None if self.interior is None else list(self.interior)},
            "lipschitz": {"c_k": self.c_k, "pairs": self.pairs},
        }

    @property
    def sha256(self) -> str:
        return config_hash(self.to_dict())

    def out(self, command: str) -> Path:
        return Path(self.output_dir) / command


def _margin_constant(config: ExperimentConfig, spec: ProblemSpec) -> float:
    return default_margin_constant(spec) if config.check.c == "auto" else float(config.check.c)


def _plan(config: ExperimentConfig, spec: ProblemSpec) -> SamplePlan:
    p = config.discretization
    return SamplePlan.default(spec, points=config.check.points,
                              sphere_samples=max(config.check.sphere_samples, 2 * spec.n),
                              refine_iters=config.check.refine_iters, seed=config.check.seed,
                              x_range=(p.x_lo, p.x_hi))


# ----------------------------
# check
# ----------------------------
SUFFICIENT = ("sufficient_1", "sufficient_2", "sufficient_3")


def cmd_check(config: ExperimentConfig) -> int:
    entry = config.entry()
    spec = entry.spec
    c = _margin_constant(config, spec)
    plan = _plan(config, spec)
    out = config.out("check")
    console.banner(f"CHECK: CONDITION AUDIT FOR {spec.name.upper()} (c = {c:g})")

    key = check_key_condition(spec, c, plan, epsilon=config.check.epsilon, threads=config.threads)
    write_json(key.to_dict(), out / "key_condition.json")
    observed = {"key": key.passed}
    for name in SUFFICIENT + ("one_dimensional",):
        report = check_sufficient_over_plan(spec, name, c, plan)
        write_json(report.to_dict(), out / f"{name}.json")
        if name in SUFFICIENT:
            observed[name] = report.passed if report.applicable else None
    write_json(list_problems(), out / "registry.json")

    expected = entry.condition_profile
    rows = [{"condition": k, "expected": expected[k], "observed": observed[k],
             "match": expected[k] == observed[k]} for k in ("key",) + SUFFICIENT]
    frame = pd.DataFrame(rows)
    if "csv" in config.formats:
        write_csv(frame, out / "conditions.csv", "check", config.sha256)
    if c != expected["c"]:
        logger.warning("stored profile is for c = %g; comparing against results at c = %g", expected["c"], c)

    console.note(f"key condition: {'PASS' if key.passed else 'FAIL'} "
                 f"(worst margin {key.worst_margin:.6g}, mode {key.mode})")
    for row in rows:
        mark = console.ok if row["match"] else console.fail
        mark(f"{row['condition']}: observed {row['observed']}, expected {row['expected']}")
    console.footer()
    return OK if all(r["match"] for r in rows) else MISMATCH


# ----------------------------
# solve
# ----------------------------
def cmd_solve(config: ExperimentConfig) -> int:
    entry = config.entry()
    spec = entry.spec
    out = config.out("solve")
    console.banner(f"SOLVE: {spec.name.upper()} ON [0, {spec.T:g}]")

    sol = solve(spec, config.partition, config.discretization, threads=config.threads, c_k=config.c_k)
    bundle = forward_assemble(sol, spec, config.mc_paths, config.mc_seed, threads=config.threads)
    cert = wellposedness_certificate(spec, sol, config.mc_paths, config.mc_seed, bundle=bundle)
    y0 = bundle.Y[:, 0].mean(axis=0)

    summary = {
        "problem": entry.to_dict(),
        "config_sha256": config.sha256,
        "m": sol.m,
        "Y0": y0,
        "certificate": cert.to_dict(),
        "fitted_C_K": sol.fitted_C_K,
        "envelope_C_K": sol.envelope_C_K,
        "lipschitz": sol.lipschitz_table(config.c_k),
        "positive_fraction": decoupling_ratio_positive(bundle),
    }
    if entry.has_analytic and entry.analytic.path is not None:
        _, y_exact = entry.analytic.path(0.0, entry.resolved)
        summary["Y0_analytic"] = y_exact
        summary["Y0_error"] = float(np.linalg.norm(y0 - y_exact))

    write_json(sol.to_dict(), out / "solution.json")
    for i, seg in enumerate(sol.segments, start=1):
        write_json(seg.to_dict(), out / f"segment_{i}.json")
    write_json(summary, out / "summary.json")
    frame = bundle.to_frame()
    if "csv" in config.formats:
        write_csv(frame, out / "paths.csv", "solve", config.sha256)
    if "parquet" in config.formats:
        write_parquet(frame, out / "paths.parquet")

    console.ok(f"m = {sol.m}, Y0 = {np.array2string(y0, precision=6)}")
    console.note(f"||Theta||^2 = {cert.theta_sq:.6g}, I0^2 = {cert.i0_sq:.6g}, "
                 f"ratio = {'n/a' if cert.ratio is None else f'{cert.ratio:.6g}'}")
    console.note(f"fitted C_K = {sol.fitted_C_K:.6g}, envelope C_K = {sol.envelope_C_K:.6g}")
    console.footer()
    return OK


# ----------------------------
# converge
# ----------------------------
def _interior_mask(nodes: np.ndarray, config: ExperimentConfig) -> np.ndarray:
    if config.interior is not None:
        lo, hi = config.interior
    else:
        p = config.discretization
        quarter = 0.25 * (p.x_hi - p.x_lo)
        lo, hi = p.x_lo + quarter, p.x_hi - quarter
    return (nodes >= lo - 1e-12) & (nodes <= hi + 1e-12)


def observed_order(previous: float, current: float) -> float:
    if not (previous > ERROR_FLOOR and current > ERROR_FLOOR):
        return math.nan
    return math.log2(previous / current)


def convergence_table(config: ExperimentConfig, levels: int | None = None) -> pd.DataFrame:
    levels = config.levels if levels is None else levels
    if levels < 2:
        raise ConfigInvalidError("levels must be >= 2")
    entry = config.entry()
    spec = entry.spec
    base = config.discretization
    m = resolve_partition(spec, config.partition, base, config.c_k)
    x0 = spec.x0.mean

    reference = None
    if not entry.has_analytic:
        finest = base.refined(2 ** (levels - 1))
        reference = brute_force_reference(spec, refine_params(finest, 4), m=m, threads=config.threads)

    rows = []
    for level in range(levels):
        params = base.refined(2 ** level)
        g0 = solve(spec, m, params, threads=config.threads, c_k=config.c_k).g_funcs[0]
        nodes = params.nodes[_interior_mask(params.nodes, config)]
        if reference is None:
            exact = np.stack([analytic_eval(entry, 0.0, x)[0] for x in nodes])
            exact_y0 = analytic_eval(entry, 0.0, x0)[0]
        else:
            exact = reference(nodes)
            exact_y0 = reference(x0)
        err_field = float(np.max(np.linalg.norm(g0(nodes) - exact, axis=1)))
        err_y0 = float(np.linalg.norm(g0(x0) - exact_y0))
        rows.append({
            "level": level,
            "dt": spec.T / (m * params.steps),
            "dx": params.dx,
            "err_Y0": err_y0,
            "err_field_sup": err_field,
            "observed_order": math.nan if level == 0 else observed_order(rows[-1]["err_field_sup"], err_field),
        })
        logger.info("level %d: dt=%g dx=%g err_Y0=%.3e err_field_sup=%.3e", level,
                    rows[-1]["dt"], params.dx, err_y0, err_field)
    return pd.DataFrame(rows, columns=["level", "dt", "dx", "err_Y0", "err_field_sup", "observed_order"])


def cmd_converge(config: ExperimentConfig, levels: int | None = None) -> int:
    console.banner(f"CONVERGE: {config.problem.upper()}")
    frame = convergence_table(config, levels)
    if "csv" in config.formats:
        write_csv(frame, config.out("converge") / "convergence.csv", "converge", config.sha256)
    if "json" in config.formats:
        write_json(frame.to_dict(orient="records"), config.out("converge") / "convergence.json")
    console.console.print(frame.to_string(index=False))
    console.footer()
    return OK


# ----------------------------
# stability
# ----------------------------
def _perturb_g_constant(spec: ProblemSpec, eps: float) -> ProblemSpec:
    g = spec.coeffs.g
    return spec.with_coefficients(g=lambda x: g(x) + eps)


def _perturb_g_sine(spec: ProblemSpec, eps: float) -> ProblemSpec:
    g = spec.coeffs.g
    return spec.with_coefficients(g=lambda x: g(x) + eps * np.sin(x)[:, None])


def _perturb_f_sine(spec: ProblemSpec, eps: float) -> ProblemSpec:
    f = spec.coeffs.f
    return spec.with_coefficients(f=lambda t, x, y, z: f(t, x, y, z) + eps * np.sin(x)[:, None])


PERTURBATIONS = {
    "g_constant": _perturb_g_constant,
    "g_sine": _perturb_g_sine,
    "f_sine": _perturb_f_sine,
}


def stability_rhs(base: ProblemSpec, perturbed: ProblemSpec, bundle: PathBundle) -> float:
    """E{|dg(X_T)|^2 + int |db|^2 + |dsigma|^2 + |df|^2 dt} along the perturbed paths."""
    X, Y, Z, times = bundle.X, bundle.Y, bundle.Z, bundle.time_grid
    dg = perturbed.terminal(X[:, -1]) - base.terminal(X[:, -1])
    total = np.sum(dg ** 2, axis=1)
    for k in range(times.shape[0] - 1):
        t, dt = times[k], times[k + 1] - times[k]
        x, y, z = X[:, k], Y[:, k], Z[:, k]
        db = perturbed.drift(t, x, y, z) - base.drift(t, x, y, z)
        ds = perturbed.diffusion(t, x, y) - base.diffusion(t, x, y)
        df = perturbed.driver(t, x, y, z) - base.driver(t, x, y, z)
        total = total + dt * (db ** 2 + np.sum(ds ** 2, axis=1) + np.sum(df ** 2, axis=1))
    return float(np.mean(total))


def stability_table(config: ExperimentConfig, epsilons=None) -> tuple[pd.DataFrame, str]:
    epsilons = config.stability.epsilons if epsilons is None else tuple(epsilons)
    entry = config.entry()
    base = entry.spec
    c = _margin_constant(config, base)
    key = check_key_condition(base, c, _plan(config, base), epsilon=config.check.epsilon,
                              threads=config.threads)
    label = "in-hypothesis" if key.passed else "out-of-hypothesis"
    if not key.passed:
        logger.warning("%s fails the key condition at c = %g; stability output is %s", base.name, c, label)

    params = config.discretization
    m = resolve_partition(base, config.partition, params, config.c_k)
    sol0 = solve(base, m, params, threads=config.threads, c_k=config.c_k)
    paths0 = forward_assemble(sol0, base, config.mc_paths, config.mc_seed, threads=config.threads)
    perturb = PERTURBATIONS[config.stability.perturbation]

    rows = []
    for eps in epsilons:
        spec1 = perturb(base, eps)
        sol1 = solve(spec1, m, params, threads=config.threads, c_k=config.c_k)
        paths1 = forward_assemble(sol1, spec1, config.mc_paths, config.mc_seed, threads=config.threads)
        diff = PathBundle(paths1.time_grid, paths1.X - paths0.X, paths1.Y - paths0.Y,
                          paths1.Z - paths0.Z, seed=config.mc_seed)
        lhs = theta_norm(diff)
        rhs = stability_rhs(base, spec1, paths1)
        ratio = lhs / rhs if rhs > 0 else math.nan
        rows.append({"epsilon": eps, "lhs": lhs, "rhs": rhs, "ratio": ratio})
        logger.info("eps=%g: lhs=%.6g rhs=%.6g ratio=%.6g", eps, lhs, rhs, ratio)
    return pd.DataFrame(rows, columns=["epsilon", "lhs", "rhs", "ratio"]), label


def cmd_stability(config: ExperimentConfig, epsilons=None) -> int:
    console.banner(f"STABILITY: {config.problem.upper()} ({config.stability.perturbation})")
    frame, label = stability_table(config, epsilons)
    out = config.out("stability")
    if "csv" in config.formats:
        write_csv(frame, out / "stability.csv", "stability", config.sha256,
                  hypothesis=label, perturbation=config.stability.perturbation)
    if "json" in config.formats:
        write_json({"hypothesis": label, "rows": frame.to_dict(orient="records")}, out / "stability.json")
    console.note(f"hypothesis: {label}")
    console.console.print(frame.to_string(index=False))
    console.footer()
    return OK


# ----------------------------
# lipschitz
# ----------------------------
def cmd_lipschitz(config: ExperimentConfig) -> int:
    entry = config.entry()
    spec = entry.spec
    console.banner(f"LIPSCHITZ: {spec.name.upper()}")
    sol = solve(spec, config.partition, config.discretization, threads=config.threads, c_k=config.c_k)
    frame = pd.DataFrame(sol.lipschitz_table(config.c_k),
                         columns=["i", "T_i", "measured_lip_sq", "bound_config", "bound_fitted"])
    probe = probe_initial_value_map(sol, config.pairs, config.mc_seed, config.c_k)
    out = config.out("lipschitz")
    if "csv" in config.formats:
        write_csv(frame, out / "lipschitz.csv", "lipschitz", config.sha256)
    write_json({
        "problem": spec.name,
        "fitted_C_K": sol.fitted_C_K,
        "envelope_C_K": sol.envelope_C_K,
        "configured_C_K": config.c_k,
        "conforms_config": sol.conforms(config.c_k),
        "conforms_fitted": sol.conforms(sol.fitted_C_K),
        "conforms_envelope": sol.conforms(sol.envelope_C_K),
        "probe": probe.to_dict(),
    }, out / "lipschitz_probe.json")

    console.console.print(frame.to_string(index=False))
    mark = console.ok if probe.within else console.fail
    mark(f"initial-value map slope {probe.max_slope:.6g} vs kbar0(fitted) {probe.kbar0_fitted:.6g}")
    console.footer()
    return OK


COMMANDS = {
    "check": cmd_check,
    "solve": cmd_solve,
    "converge": cmd_converge,
    "stability": cmd_stability,
    "lipschitz": cmd_lipschitz,
}
