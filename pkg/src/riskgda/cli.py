"""Command-line workflows: train, evaluate, sweep, gradcheck.

Exit codes: 0 success, 1 gradient check failed, 2 invalid input
(configuration, artifact or flags), 3 numerical divergence.

Configuration files are flat ``key = value`` lines with ``#`` comments; see
:data:`CONFIG_KEYS` for the accepted keys and their defaults.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .cost import evaluate_cost, gradient_samples
from .gda import TELEMETRY_COLUMNS, GdaConfig, GdaDivergence, GdaResult, run_gda
from .risk import cvar_primal
from .sde import (
    ConditioningError,
    ControlParams,
    SimulationDivergence,
    sample_noise,
    simulate_paths,
    simulate_variational,
    zero_noise,
)
from .systems import KINDS, Benchmark, BenchmarkSpec, ObstacleSet, build, collision_fraction

log = logging.getLogger(__name__)

EXIT_OK, EXIT_GRADCHECK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3
FORMAT_VERSION = 1
SUMMARY_ALPHAS = (1.0, 0.2, 0.05)
# Offset between the training seed and the default evaluation seed, so that
# evaluation scenarios never coincide with the training batch.
EVAL_SEED_OFFSET = 1_000_003


class UsageError(ValueError):
    """Invalid configuration, artifact, or command-line input (exit code 2)."""


def fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------- config


def _float_list(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _obstacles(text: str) -> tuple:
    """``cx cy r [w]`` groups separated by ``;``."""
    rows = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        vals = _float_list(chunk)
        if len(vals) not in (3, 4):
            raise ValueError(f"obstacle {chunk.strip()!r} needs 'cx, cy, r' or 'cx, cy, r, weight'")
        rows.append(vals if len(vals) == 4 else vals + (1.0,))
    return tuple(rows)


def _positive(x):
    if not x > 0:
        raise ValueError("must be positive")
    return x


def _nonneg(x):
    if not x >= 0:
        raise ValueError("must be >= 0")
    return x


def _alpha(x):
    if not 0 < x <= 1:
        raise ValueError("must lie in (0, 1]")
    return x


def _kind(x):
    if x not in KINDS:
        raise ValueError(f"must be one of {', '.join(KINDS)}")
    return x


def _choice(*options):
    def check(x):
        if x not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return x
    return check


@dataclass(frozen=True)
class _Key:
    parse: Callable
    default: str | None  # None means required
    check: Callable | None = None
    help: str = ""


CONFIG_KEYS: dict[str, _Key] = {
    # problem
    "system": _Key(str, None, _kind, "lq, steering or freeflyer"),
    "T": _Key(float, "1", _positive, "horizon"),
    "N": _Key(int, "200", _positive, "time steps"),
    "x0": _Key(_float_list, "", None, "initial state (defaults per system)"),
    "speed": _Key(float, "1", _positive, "steering forward speed"),
    "accel": _Key(float, "0", None, "free-flyer reference acceleration"),
    "sigma": _Key(float, "0.1", _nonneg, "scalar-integrator noise"),
    "sigma_pos": _Key(float, "0", _nonneg, "steering position noise"),
    "sigma_theta": _Key(float, "0", _nonneg, "steering heading noise"),
    "sigma_v": _Key(float, "0", _nonneg, "free-flyer velocity noise"),
    "target": _Key(float, "1", None, "scalar-integrator terminal target"),
    "w_track": _Key(float, "1", _nonneg, "running tracking weight"),
    "w_terminal": _Key(float, "1", _nonneg, "terminal tracking weight"),
    "track_weights": _Key(_float_list, "", None, "per-state tracking weights"),
    "control_weight": _Key(float, "1", _nonneg, "control energy weight"),
    "obstacles": _Key(_obstacles, "", None, "'cx, cy, r[, w]; ...'"),
    "w_obs": _Key(float, "0", _nonneg, "obstacle penalty weight"),
    "obstacle_margin": _Key(float, "0", _nonneg, "relative radius margin seen by the penalty only"),
    "feedback": _Key(_bool, "true", None, "train linear feedback gains"),
    "energy": _Key(str, "running", _choice("running", "parameters"), "steering energy on u(t) or on (v, lam)"),
    "ref_gain": _Key(float, "0", None, "reference swerve amplitude"),
    "ref_start": _Key(float, "0", _nonneg, "reference swerve start time"),
    "ref_duration": _Key(float, "0", _nonneg, "reference swerve phase length"),
    # optimiser
    "alpha": _Key(float, "1", _alpha, "CV@R level"),
    "gamma": _Key(float, "0", _nonneg, "concavification strength"),
    "eta": _Key(float, "0.1", _positive, "descent step"),
    "beta": _Key(float, "0.1", _positive, "ascent step"),
    "max_iter": _Key(int, "200", _positive, "iteration cap"),
    "tol_step": _Key(float, "1e-6", _positive, "stop when |du| / eta falls below this"),
    "M": _Key(int, "256", _positive, "training scenarios"),
    "seed": _Key(int, "0", _nonneg, "training noise seed"),
    "diagnostics_every": _Key(int, "1", _positive, "inner-maximisation cadence"),
    "inner_tol": _Key(float, "1e-10", _positive, "inner-maximisation tolerance"),
    "k_est": _Key(float, "10", _positive, "constant in the H diagnostic"),
    "resample_every": _Key(int, "0", _nonneg, "redraw the batch every k iterations (0 = never)"),
    "variational": _Key(str, "step", _choice("step", "ito"), "inverse-flow scheme"),
    "sensitivity": _Key(str, "fundamental", _choice("fundamental", "costate"), "gradient route"),
    "wallclock": _Key(_bool, "false", None, "record per-iteration wall time"),
    # evaluation and output
    "eval_paths": _Key(int, "10000", _positive, "fresh evaluation scenarios"),
    "eval_seed": _Key(int, "-1", None, "evaluation seed (-1 = seed + offset)"),
    "output_dir": _Key(str, "out", None, "where artifacts are written"),
}

_DEFAULT_X0 = {"lq": (0.0,), "steering": (0.0, 0.0, 0.0), "freeflyer": (0.0, 0.0, 0.0, 0.0)}


def parse_config_text(text: str, source: str = "<config>") -> tuple[dict[str, str], dict[str, int]]:
    """Return the raw key-value map and the line number of each key."""
    values: dict[str, str] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {lines[key]})")
        values[key], lines[key] = value, lineno
    return values, lines


def serialize_config(values: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    spec: BenchmarkSpec
    gda: GdaConfig
    eval_paths: int
    eval_seed: int
    output_dir: Path

    @property
    def system(self) -> str:
        return self.spec.kind


def run_config(values: dict[str, str], lines: dict[str, int] | None = None, source: str = "<config>") -> RunConfig:
    lines = lines or {}
    typed = {}
    for key, meta in CONFIG_KEYS.items():
        where = f"{source}:{lines[key]}" if key in lines else source
        if key not in values and meta.default is None:
            raise UsageError(f"{where}: missing required key {key!r}")
        text = values.get(key, meta.default)
        try:
            val = meta.parse(text)
            if meta.check is not None:
                val = meta.check(val)
        except ValueError as exc:
            raise UsageError(f"{where}: {key} = {text!r}: {exc}") from None
        typed[key] = val
    kind = typed["system"]
    rows = typed["obstacles"]
    obs = ObstacleSet(
        centers=np.array([r[:2] for r in rows]).reshape(-1, 2),
        radii=np.array([r[2] for r in rows]),
        weights=np.array([r[3] for r in rows]),
        inflation=typed["obstacle_margin"],
    ) if rows else ObstacleSet()
    try:
        spec = BenchmarkSpec(
            kind=kind, horizon=typed["T"], steps=typed["N"], x0=typed["x0"] or _DEFAULT_X0[kind],
            speed=typed["speed"], accel=typed["accel"], sigma=typed["sigma"], sigma_pos=typed["sigma_pos"],
            sigma_theta=typed["sigma_theta"], sigma_v=typed["sigma_v"], target=typed["target"],
            obstacles=obs, w_track=typed["w_track"], w_terminal=typed["w_terminal"],
            track_weights=typed["track_weights"], control_weight=typed["control_weight"], w_obs=typed["w_obs"],
            feedback=typed["feedback"], energy=typed["energy"], ref_gain=typed["ref_gain"], ref_start=typed["ref_start"],
            ref_duration=typed["ref_duration"],
        )
        gda = GdaConfig(
            eta=typed["eta"], beta=typed["beta"], gamma=typed["gamma"], alpha=typed["alpha"],
            max_iter=typed["max_iter"], tol_step=typed["tol_step"], scenarios=typed["M"], seed=typed["seed"],
            diagnostics_every=typed["diagnostics_every"], inner_tol=typed["inner_tol"], k_est=typed["k_est"],
            resample_every=typed["resample_every"], variational=typed["variational"],
            sensitivity=typed["sensitivity"], record_wallclock=typed["wallclock"],
        )
    except ValueError as exc:
        raise UsageError(f"{source}: {exc}") from None
    eval_seed = typed["eval_seed"] if typed["eval_seed"] >= 0 else typed["seed"] + EVAL_SEED_OFFSET
    return RunConfig(dict(values), spec, gda, typed["eval_paths"], eval_seed, Path(typed["output_dir"]))


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    values, lines = parse_config_text(text, str(path))
    for key, value in (overrides or {}).items():
        values[key] = value
        lines.pop(key, None)
    return run_config(values, lines, str(path))


# -------------------------------------------------------------- artifact


@dataclass(frozen=True)
class ControlArtifact:
    system: str
    n: int
    m: int
    T: float
    alpha: float
    gamma: float
    seed: int
    u: ControlParams

    @property
    def q(self) -> int:
        return self.u.q

    @property
    def N(self) -> int:
        return self.u.steps

    def dumps(self) -> str:
        out = [
            f"format_version {FORMAT_VERSION}",
            f"system {self.system}",
            f"n {self.n}",
            f"m {self.m}",
            f"q {self.q}",
            f"T {fmt(self.T)}",
            f"N {self.N}",
            f"alpha {fmt(self.alpha)}",
            f"gamma {fmt(self.gamma)}",
            f"seed {self.seed}",
            " ".join(["lam"] + [fmt(x) for x in self.u.lam]),
        ]
        out += [" ".join(fmt(x) for x in row) for row in self.u.v]
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, source: str = "<artifact>") -> "ControlArtifact":
        lines = text.splitlines()
        names = ["format_version", "system", "n", "m", "q", "T", "N", "alpha", "gamma", "seed"]
        head = {}
        try:
            for i, name in enumerate(names):
                key, _, value = lines[i].partition(" ")
                if key != name:
                    raise UsageError(f"{source}:{i + 1}: expected header field {name!r}, got {key!r}")
                head[name] = value
            if int(head["format_version"]) != FORMAT_VERSION:
                raise UsageError(f"{source}: unsupported format_version {head['format_version']}")
            n, m, q, N = (int(head[k]) for k in ("n", "m", "q", "N"))
            lam_line = lines[len(names)].split()
            if not lam_line or lam_line[0] != "lam":
                raise UsageError(f"{source}:{len(names) + 1}: expected the 'lam' line")
            lam = np.array([float(x) for x in lam_line[1:]])
            rows = lines[len(names) + 1:]
            if len(rows) != N:
                raise UsageError(f"{source}: expected {N} control rows, found {len(rows)}")
            v = np.array([[float(x) for x in row.split()] for row in rows]).reshape(N, -1)
        except (IndexError, ValueError) as exc:
            if isinstance(exc, UsageError):
                raise
            raise UsageError(f"{source}: malformed artifact ({exc})") from None
        if lam.size != q or v.shape[1] != m:
            raise UsageError(f"{source}: shape mismatch (q={q}, m={m} vs {lam.size} gains, {v.shape[1]} inputs)")
        return cls(head["system"], n, m, float(head["T"]), float(head["alpha"]), float(head["gamma"]),
                   int(head["seed"]), ControlParams(v, lam))

    @classmethod
    def load(cls, path) -> "ControlArtifact":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read artifact {path}: {exc.strerror}") from None
        return cls.loads(text, str(path))


# ------------------------------------------------------------- workflows


def write_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(x if isinstance(x, str) else (str(x) if isinstance(x, (int, np.integer)) else fmt(x))
                              for x in row) + "\n")


def telemetry_rows(result: GdaResult):
    return [[getattr(r, c) for c in TELEMETRY_COLUMNS] for r in result.telemetry]


def _noise(bench: Benchmark, scenarios: int, seed: int):
    if bench.spec.kind == "lq" and bench.spec.sigma == 0:
        return zero_noise(bench.grid, scenarios, bench.model.d)
    return sample_noise(bench.grid, scenarios, seed, bench.model.d)


def train(cfg: RunConfig, alpha: float | None = None) -> tuple[Benchmark, GdaResult, ControlArtifact]:
    gcfg = cfg.gda if alpha is None else GdaConfig(**{**cfg.gda.__dict__, "alpha": alpha})
    bench = build(cfg.spec)
    noise = _noise(bench, gcfg.scenarios, gcfg.seed)
    result = run_gda(bench.model, bench.cost, gcfg, bench.x0, bench.grid, bench.initial_control(), noise)
    art = ControlArtifact(cfg.system, bench.model.n, bench.model.m, bench.grid.horizon,
                          gcfg.alpha, gcfg.gamma, gcfg.seed, result.u)
    return bench, result, art


@dataclass(frozen=True)
class Evaluation:
    costs: np.ndarray
    paths: object

    def summary(self, obstacles: ObstacleSet, inflation: float) -> dict:
        row = {"mean": float(np.mean(self.costs))}
        for a in SUMMARY_ALPHAS:
            row[f"cvar_{a:g}"] = cvar_primal(self.costs, a)
        row["collision_fraction"] = collision_fraction(self.paths, obstacles, inflation)
        return row


def simulate_control(bench: Benchmark, u: ControlParams, paths: int, seed: int) -> Evaluation:
    noise = _noise(bench, paths, seed)
    path = simulate_paths(bench.model, u, bench.x0, bench.grid, noise)
    return Evaluation(evaluate_cost(bench.cost, u, path, bench.grid).total, path)


def check_artifact(art: ControlArtifact, bench: Benchmark) -> None:
    if art.system != bench.spec.kind:
        raise UsageError(f"artifact was trained on {art.system!r} but the config describes {bench.spec.kind!r}")
    if (art.n, art.m, art.q, art.N) != (bench.model.n, bench.model.m, bench.q, bench.grid.steps):
        raise UsageError(
            f"artifact shape (n={art.n}, m={art.m}, q={art.q}, N={art.N}) does not match the config "
            f"(n={bench.model.n}, m={bench.model.m}, q={bench.q}, N={bench.grid.steps})")
    if not math.isclose(art.T, bench.grid.horizon, rel_tol=1e-12):
        raise UsageError(f"artifact horizon {art.T:g} differs from config T = {bench.grid.horizon:g}")


@dataclass(frozen=True)
class GradcheckReport:
    errors: np.ndarray
    analytic: np.ndarray
    finite_difference: np.ndarray
    directions: list

    @property
    def worst(self) -> int:
        return int(np.argmax(self.errors))


def gradcheck(bench: Benchmark, u: ControlParams, scenarios: int, seed: int, directions: int,
              epsilon: float, sensitivity: str = "fundamental", direction_seed: int = 0) -> GradcheckReport:
    """Compare ``<E grad J, h>`` with central differences of ``E J`` under common noise."""
    if not (np.isfinite(epsilon) and epsilon > 0):
        raise UsageError(f"epsilon must be positive, got {epsilon}")
    if directions < 1:
        raise UsageError("need at least one direction")
    grid, model, cm = bench.grid, bench.model, bench.cost
    noise = _noise(bench, scenarios, seed)
    path = simulate_paths(model, u, bench.x0, grid, noise)
    var = simulate_variational(model, u, path, grid, noise, check=sensitivity == "fundamental")
    grads = gradient_samples(cm, model, u, path, var, grid, method=sensitivity)

    def mean_cost(w: ControlParams) -> float:
        p = simulate_paths(model, w, bench.x0, grid, noise)
        return float(np.mean(evaluate_cost(cm, w, p, grid).total))

    rng = np.random.default_rng(direction_seed)
    errs, ana, fds, hs = [], [], [], []
    for _ in range(directions):
        h = ControlParams(rng.standard_normal(u.v.shape), rng.standard_normal(u.lam.shape))
        h = ControlParams(h.v / h.norm(grid.dt), h.lam / h.norm(grid.dt))
        g = float(np.mean(grads.directional(h, grid.dt)))
        fd = (mean_cost(u.axpy(epsilon, h)) - mean_cost(u.axpy(-epsilon, h))) / (2.0 * epsilon)
        errs.append(abs(g - fd) / max(abs(g), abs(fd), 1e-300))
        ana.append(g)
        fds.append(fd)
        hs.append(h)
    return GradcheckReport(np.array(errs), np.array(ana), np.array(fds), hs)


# ------------------------------------------------------------- commands


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        if key not in CONFIG_KEYS:
            raise UsageError(f"--set: unknown key {key!r}")
        out[key] = value.strip()
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out) if args.out else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _, result, art = train(cfg)
    art.save(out / "control.txt")
    write_csv(out / "telemetry.csv", TELEMETRY_COLUMNS, telemetry_rows(result))
    last = result.telemetry[-1]
    print(f"trained {cfg.system} alpha={fmt(cfg.gda.alpha)}: {len(result.telemetry)} iterations, "
          f"converged={result.converged}, best iteration {result.best_iteration}, "
          f"final cvar={last.cvar_alpha:.6g}; wrote {out / 'control.txt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    art = ControlArtifact.load(args.artifact)
    bench = build(cfg.spec)
    check_artifact(art, bench)
    if args.inflation < 0:
        raise UsageError("--inflation must be >= 0")
    paths = args.paths or cfg.eval_paths
    seed = cfg.eval_seed if args.seed is None else args.seed
    ev = simulate_control(bench, art.u, paths, seed)
    summary = ev.summary(bench.obstacles, args.inflation)
    out = Path(args.out) if args.out else Path(args.artifact).parent
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eval_costs.csv", ["scenario", "cost"], [[i, c] for i, c in enumerate(ev.costs)])
    write_csv(out / "eval_summary.csv", ["inflation", "paths", *summary], [[args.inflation, paths, *summary.values()]])
    print(", ".join(f"{k}={v:.6g}" for k, v in summary.items()))
    return EXIT_OK


def _parse_list(text: str, name: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--{name}: could not parse {text!r}") from None
    if not vals:
        raise UsageError(f"--{name} must list at least one value")
    return vals


def sweep_table(cfg: RunConfig, alphas, inflations, paths: int, seed: int, out: Path | None = None):
    """Collision fractions, ``table[i][j]`` for inflation ``i`` and alpha ``j``."""
    for a in alphas:
        if not 0 < a <= 1:
            raise UsageError(f"alpha {a:g} outside (0, 1]")
    for r in inflations:
        if r < 0:
            raise UsageError(f"inflation {r:g} must be >= 0")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    table = np.empty((len(inflations), len(alphas)))
    for j, a in enumerate(alphas):
        bench, result, art = train(cfg, alpha=a)
        if out is not None:
            art.save(out / f"control_alpha{a:g}.txt")
            write_csv(out / f"telemetry_alpha{a:g}.csv", TELEMETRY_COLUMNS, telemetry_rows(result))
        ev = simulate_control(bench, art.u, paths, seed)
        for i, r in enumerate(inflations):
            table[i, j] = collision_fraction(ev.paths, bench.obstacles, r)
        log.info("alpha=%g done", a)
    return table


def cmd_sweep(args) -> int:
    alphas = _parse_list(args.alphas, "alphas")
    inflations = _parse_list(args.inflations, "inflations")
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out) if args.out else cfg.output_dir
    paths = args.paths or cfg.eval_paths
    seed = cfg.eval_seed if args.seed is None else args.seed
    table = sweep_table(cfg, alphas, inflations, paths, seed, out)
    header = ["inflation"] + [f"alpha={fmt(a)}" for a in alphas]
    rows = [[r, *table[i]] for i, r in enumerate(inflations)]
    write_csv(out / "sweep.csv", header, rows)
    print(",".join(header))
    for row in rows:
        print(",".join(f"{x:g}" for x in row))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    overrides = _overrides(args)
    if args.scenarios:
        overrides["M"] = str(args.scenarios)
    cfg = load_config(args.config, overrides)
    bench = build(cfg.spec)
    u = bench.initial_control()
    if args.artifact:
        art = ControlArtifact.load(args.artifact)
        check_artifact(art, bench)
        u = art.u
    rep = gradcheck(bench, u, cfg.gda.scenarios, cfg.gda.seed, args.directions, args.epsilon,
                    cfg.gda.sensitivity, args.direction_seed)
    for i, (e, g, fd) in enumerate(zip(rep.errors, rep.analytic, rep.finite_difference)):
        print(f"direction {i}: analytic={g:.12e} fd={fd:.12e} rel_err={e:.3e}")
    worst = rep.worst
    ok = bool(rep.errors[worst] <= args.threshold)
    print(f"worst relative error {rep.errors[worst]:.3e} (direction {worst}), threshold {args.threshold:g}: "
          f"{'PASS' if ok else 'FAIL'}")
    if not ok:
        h = rep.directions[worst]
        print(f"worst direction lam: {' '.join(fmt(x) for x in h.lam)}", file=sys.stderr)
        print(f"worst direction v: {' '.join(fmt(x) for x in h.v.ravel())}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskgda", description="Risk-averse stochastic control by gradient descent-ascent.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one control and write control.txt + telemetry.csv")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="simulate a trained control on fresh scenarios")
    e.add_argument("artifact")
    e.add_argument("config")
    e.add_argument("--inflation", type=float, default=0.0, help="obstacle radius inflation")
    e.add_argument("--paths", type=int, default=0, help="fresh scenarios (default eval_paths)")
    e.add_argument("--seed", type=int, help="evaluation seed (default eval_seed)")
    e.add_argument("--out", help="output directory (default: the artifact's directory)")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="train one control per alpha, tabulate collisions per inflation")
    s.add_argument("config")
    s.add_argument("--alphas", default="1,0.2,0.05")
    s.add_argument("--inflations", default="0")
    s.add_argument("--paths", type=int, default=0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="compare the pathwise gradient with central differences")
    g.add_argument("config")
    g.add_argument("--directions", type=int, default=5)
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.add_argument("--threshold", type=float, default=1e-3)
    g.add_argument("--scenarios", type=int, default=0, help="override M")
    g.add_argument("--artifact", help="check at a trained control instead of the initial one")
    g.add_argument("--direction-seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    for cmd in (t, e, s, g):
        cmd.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    return p


def _thread_limit():
    value = os.environ.get("RISKGDA_THREADS")
    if not value:
        return None
    try:
        count = int(value)
    except ValueError:
        raise UsageError(f"RISKGDA_THREADS must be an integer, got {value!r}") from None
    if count < 1:
        raise UsageError("RISKGDA_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=count)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (GdaDivergence, SimulationDivergence, ConditioningError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
