"""Batch command-line front end.

Every artifact carries the effective configuration and a version string, so
rerunning the echoed configuration reproduces it. Exit codes: 0 success,
2 infeasible result, 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__, awlmi, awsys, probbounds as pb, sim
from .scenario import ScenarioError, substream
from .sdp import SolveStatus, Tolerances

log = logging.getLogger("swcaw")

SCHEMA = "swcaw.config/1"
EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2
FULL_SCALE_LEVELS = (0.01, 1e-6)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LevelsCfg(_Strict):
    epsilon: float = Field(0.1, gt=0, lt=1)
    delta: float = Field(1e-3, gt=0, lt=1)


class SequentialCfg(_Strict):
    k_t: int = Field(5, ge=2)
    alpha: float = Field(1.0, gt=0)


class SolverCfg(_Strict):
    backend: Literal["clarabel", "cvxopt"] = "clarabel"
    feasibility: float = Field(1e-8, gt=0)
    gap: float = Field(1e-8, gt=0)
    margin_rel: float = Field(1e-7, ge=0)
    max_iter: int = Field(200, ge=1)

    def tolerances(self) -> Tolerances:
        return Tolerances(feasibility=self.feasibility, gap=self.gap, margin_rel=self.margin_rel,
                          max_iter=self.max_iter, backend=self.backend)


class UncertaintyCfg(_Strict):
    relative_std: float = Field(0.10, ge=0)
    freeze_k: bool = False
    model: Literal["cascade", "nodal"] = "cascade"


class GridCfg(_Strict):
    start: float = Field(1e-4, gt=0)
    stop: float = Field(0.05, gt=0)
    num: int = Field(12, ge=1)

    def values(self) -> np.ndarray:
        if self.stop <= self.start and self.num > 1:
            raise ValueError("s_grid.stop must exceed s_grid.start")
        return np.geomspace(self.start, self.stop, self.num)


class SimulationCfg(_Strict):
    amplitude: float = 10.0
    t_end: float = Field(30.0, gt=0)
    dt: float = Field(1e-3, gt=0)


class RunConfig(_Strict):
    schema_: Literal["swcaw.config/1"] = Field(SCHEMA, alias="schema")
    seed: int = Field(0, ge=0)
    s: float = Field(0.003, gt=0)
    s_grid: GridCfg = GridCfg()
    levels: LevelsCfg = LevelsCfg()
    sequential: SequentialCfg = SequentialCfg()
    solver: SolverCfg = SolverCfg()
    uncertainty: UncertaintyCfg = UncertaintyCfg()
    simulation: SimulationCfg = SimulationCfg()
    mode: Literal["nominal", "oneshot", "sequential"] = "nominal"
    D_aw: list[float] | None = None
    design: str | None = None
    N: int | None = Field(None, ge=1)
    curve_include_nominal: bool = True

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @field_validator("D_aw")
    @classmethod
    def _finite(cls, v):
        if v is not None and not np.all(np.isfinite(v)):
            raise ValueError("D_aw entries must be finite")
        return v

    def echo(self) -> dict:
        return self.model_dump(by_alias=True, mode="json")


class CliError(Exception):
    pass


class Infeasible(Exception):
    pass


def version_string() -> str:
    """``git describe`` of the source checkout when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(path: str | None, seed: int | None = None, paper_scale: bool = False) -> RunConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        try:
            data = json.loads(p.read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {p} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise CliError(f"config file {p} must hold a JSON object")
    if seed is not None:
        data["seed"] = seed
    if paper_scale:
        log.warning("--paper-scale levels (eps=%g, delta=%g) need thousands of scenario samples; "
                    "expect hours of runtime", *FULL_SCALE_LEVELS)
        data["levels"] = {"epsilon": FULL_SCALE_LEVELS[0], "delta": FULL_SCALE_LEVELS[1]}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise CliError(f"invalid configuration:\n{exc}") from None


# --------------------------------------------------------------------------
# shared plumbing


def _header(cfg: RunConfig | None, command: str, extra: dict | None = None) -> dict:
    out = {"command": command, "version": version_string()}
    if cfg is not None:
        out["config"] = cfg.echo()
        out["seed"] = cfg.seed
    if extra:
        out.update(extra)
    return out


def _csv_header(meta: dict) -> str:
    return json.dumps(meta, sort_keys=True)


def _write(out_dir: Path | None, name: str, text: str) -> None:
    if out_dir is None:
        sys.stdout.write(text)
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(text)
    log.info("wrote %s", out_dir / name)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _finite_or_none(x: float):
    return float(x) if np.isfinite(x) else None


def _sampler(cfg: RunConfig) -> awsys.CircuitLoopSampler:
    unc = awsys.CircuitUncertainty(relative_std=cfg.uncertainty.relative_std)
    return awsys.CircuitLoopSampler(unc, freeze_k=cfg.uncertainty.freeze_k, model=cfg.uncertainty.model)


def _d_aw(cfg: RunConfig, cl: awsys.ClosedLoop) -> np.ndarray:
    if cfg.D_aw is not None and cfg.design is not None:
        raise CliError("give either D_aw or design, not both")
    if cfg.design is not None:
        try:
            art = json.loads(Path(cfg.design).read_text())
        except FileNotFoundError:
            raise CliError(f"design file not found: {cfg.design}") from None
        values = np.asarray(art["design"]["D_aw"], dtype=float)
    elif cfg.D_aw is not None:
        values = np.asarray(cfg.D_aw, dtype=float)
    else:
        return np.zeros((cl.n_v, cl.n_u))
    if values.size != cl.n_v * cl.n_u:
        raise CliError(f"D_aw has {values.size} entries, the loop needs {cl.n_v * cl.n_u}")
    return values.reshape(cl.n_v, cl.n_u)


def _levels(cfg: RunConfig) -> pb.ProbLevels:
    return pb.ProbLevels(cfg.levels.epsilon, cfg.levels.delta)


def _seq(cfg: RunConfig) -> pb.SequentialParams:
    return pb.SequentialParams(cfg.sequential.k_t, cfg.sequential.alpha)


def _curve_samples(cfg: RunConfig, cl: awsys.ClosedLoop) -> list[awsys.ClosedLoop]:
    """Fixed multisample for probabilistic curves; every grid point uses it."""
    n = cfg.N or pb.min_samples_exact(_levels(cfg), 1)
    loops = list(_sampler(cfg)(substream(cfg.seed, 99, 0), n))
    return ([cl] if cfg.curve_include_nominal else []) + loops


# --------------------------------------------------------------------------
# commands


def cmd_complexity(epsilon: float, delta: float, n_theta: int, k_t: int | None = None,
                   alpha: float = 1.0) -> dict:
    levels = pb.ProbLevels(epsilon, delta)
    seq = pb.SequentialParams(k_t, alpha) if k_t is not None else None
    table = pb.complexity_table(levels, n_theta, seq)
    return {"command": "complexity", "version": version_string(), "table": table}


def _format_complexity(res: dict) -> str:
    t = res["table"]
    lines = [
        f"epsilon={t['epsilon']:g} delta={t['delta']:g} n_theta={t['n_theta']}",
        f"  exact N (delta)     : {t['exact_N']}",
        f"  exact N (delta/2)   : {t['exact_N_half_delta']}",
        f"  bound N (delta)     : {t['bound_N']}",
        f"  bound N (delta/2)   : {t['bound_N_half_delta']}",
    ]
    if "schedule" in t:
        lines.append(f"  schedule k_t={t['k_t']} alpha={t['alpha']:g} "
                     "(N_k from exact N at delta/2, N_k_bound from bound N at delta)")
        lines.append("     k      N_k  N_k_bound      M_k")
        for r in t["schedule"]:
            mk = "-" if r["M_k"] is None else str(r["M_k"])
            lines.append(f"  {r['k']:4d} {r['N_k']:8d} {r['N_k_bound']:10d} {mk:>8}")
    return "\n".join(lines) + "\n"


def cmd_analyze(cfg: RunConfig, threads: int = 1) -> dict:
    cl = awsys.benchmark_closed_loop()
    D = _d_aw(cfg, cl)
    tol = cfg.solver.tolerances()
    result = {"s": cfg.s, "D_aw": D.ravel().tolist(), "mode": cfg.mode}
    if cfg.mode == "nominal":
        r = awlmi.analyze_nominal(cl, D, cfg.s, tol)
        result.update(gamma_hat=_finite_or_none(r.gamma_hat), feasible=r.feasible, status=r.status)
    else:
        spec = awlmi.AnalysisSpec(cfg.s, levels=_levels(cfg))
        gamma, res = awlmi.swc_analysis(_sampler(cfg), D, spec, cfg.seed, cl, cfg.mode, _seq(cfg), tol,
                                        workers=threads, N=cfg.N)
        result.update(gamma_hat=gamma, feasible=True, N=res.N, n_used=res.n_used, validated=res.validated,
                      epsilon=cfg.levels.epsilon, delta=cfg.levels.delta,
                      iterations=[_iter_dict(it) for it in res.iterations])
    art = _header(cfg, "analyze", {"result": result})
    if not result["feasible"]:
        raise Infeasible(art)
    return art


def _iter_dict(it) -> dict:
    # wall time is left out so artifacts stay reproducible
    return {"k": it.k, "N_k": it.N_k, "M_k": it.M_k, "objective": it.objective, "violations": it.violations,
            "checked": it.checked}


def _design_dict(d: awlmi.AwDesign, cfg: RunConfig, N=None, extra: dict | None = None) -> dict:
    out = {"D_aw": d.D_aw.tolist(), "gamma_hat": _finite_or_none(d.gamma_hat), "s": d.s,
           "epsilon": None, "delta": None, "N": N, "seed": cfg.seed, "feasible": d.feasible, "status": d.status}
    if cfg.mode != "nominal":
        out["epsilon"], out["delta"] = cfg.levels.epsilon, cfg.levels.delta
    if extra:
        out.update(extra)
    return out


def cmd_synthesize(cfg: RunConfig, threads: int = 1) -> dict:
    cl = awsys.benchmark_closed_loop()
    tol = cfg.solver.tolerances()
    if cfg.mode == "nominal":
        d = awlmi.synthesize_nominal(cl, cfg.s, tol)
        art = _header(cfg, "synthesize", {"design": _design_dict(d, cfg)})
        if not d.feasible:
            raise Infeasible(art)
        return art
    spec = awlmi.AnalysisSpec(cfg.s, levels=_levels(cfg))
    d, res = awlmi.swc_synthesis(_sampler(cfg), spec, cfg.seed, cl, cfg.mode, _seq(cfg), tol,
                                 workers=threads, N=cfg.N)
    layout = awlmi.layout_for(cl, True)
    extra = {"n_theta": layout.n_theta, "n_theta_full": layout.n_theta_full, "n_used": res.n_used,
             "validated": res.validated, "iterations": [_iter_dict(it) for it in res.iterations]}
    return _header(cfg, "synthesize", {"design": _design_dict(d, cfg, res.N, extra)})


def _curve(cfg: RunConfig, D, mode: str, threads: int, samples=None) -> awlmi.GainCurve:
    cl = awsys.benchmark_closed_loop()
    target = cl if mode == "nominal" else samples
    return awlmi.gain_curve(target, D, cfg.s_grid.values(), mode, cfg.solver.tolerances(), threads)


def cmd_gaincurve(cfg: RunConfig, threads: int = 1) -> str:
    cl = awsys.benchmark_closed_loop()
    D = _d_aw(cfg, cl)
    mode = "nominal" if cfg.mode == "nominal" else "probabilistic"
    samples = _curve_samples(cfg, cl) if mode == "probabilistic" else None
    curve = _curve(cfg, D, mode, threads, samples)
    meta = _header(cfg, "gaincurve", {"D_aw": D.ravel().tolist(), "curve_mode": mode,
                                      "n_samples": None if samples is None else len(samples)})
    return curve.to_csv(_csv_header(meta))


def cmd_simulate(cfg: RunConfig) -> str:
    cl = awsys.benchmark_closed_loop()
    D = _d_aw(cfg, cl)
    sc = cfg.simulation
    w = sim.Signal.step(sc.amplitude, sc.t_end, sc.dt)
    res = sim.simulate(cl, D, w)
    meta = _header(cfg, "simulate", {"D_aw": D.ravel().tolist(), "input": "step"})
    return res.to_csv(_csv_header(meta))


def cmd_benchmark(cfg: RunConfig, out_dir: Path, threads: int = 1) -> dict:
    """Nominal and SwC synthesis, gain curves for both gains, and step responses."""
    cl = awsys.benchmark_closed_loop()
    tol = cfg.solver.tolerances()
    out_dir.mkdir(parents=True, exist_ok=True)
    base = _header(cfg, "benchmark")

    nominal = awlmi.synthesize_nominal(cl, cfg.s, tol)
    if not nominal.feasible:
        raise Infeasible({**base, "stage": "nominal synthesis", "status": nominal.status})
    spec = awlmi.AnalysisSpec(cfg.s, levels=_levels(cfg))
    mode = "sequential" if cfg.mode == "nominal" else cfg.mode
    robust, res = awlmi.swc_synthesis(_sampler(cfg), spec, cfg.seed, cl, mode, _seq(cfg), tol,
                                      workers=threads, N=cfg.N)
    layout = awlmi.layout_for(cl, True)
    designs = {
        "nominal": _design_dict(nominal, cfg),
        "robust": _design_dict(robust, cfg, res.N, {
            "epsilon": cfg.levels.epsilon, "delta": cfg.levels.delta, "mode": mode,
            "n_theta": layout.n_theta, "n_theta_full": layout.n_theta_full, "n_used": res.n_used,
            "validated": res.validated, "iterations": [_iter_dict(it) for it in res.iterations]}),
    }
    _write(out_dir, "design_nominal.json", _dumps({**base, "design": designs["nominal"]}))
    _write(out_dir, "design_robust.json", _dumps({**base, "design": designs["robust"]}))

    samples = _curve_samples(cfg, cl)
    files = []
    gains = {"nominal": nominal.D_aw, "robust": robust.D_aw}
    for analysis in ("nominal", "probabilistic"):
        for name, D in gains.items():
            curve = _curve(cfg, D, analysis, threads, samples)
            meta = {**base, "curve_mode": analysis, "design": name, "D_aw": D.ravel().tolist(),
                    "n_samples": len(samples) if analysis == "probabilistic" else None}
            fname = f"curve_{analysis}_{name}.csv"
            _write(out_dir, fname, curve.to_csv(_csv_header(meta)))
            files.append(fname)

    sc = cfg.simulation
    w = sim.Signal.step(sc.amplitude, sc.t_end, sc.dt)
    for name, D in [("none", np.zeros((cl.n_v, cl.n_u))), *gains.items()]:
        r = sim.simulate(cl, D, w)
        meta = {**base, "trajectory": name, "D_aw": D.ravel().tolist(), "input": "step"}
        fname = f"trajectory_{name}.csv"
        _write(out_dir, fname, r.to_csv(_csv_header(meta)))
        files.append(fname)

    summary = {**base, "designs": designs, "files": files}
    _write(out_dir, "summary.json", _dumps(summary))
    return summary


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="output directory (stdout if omitted)")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    common.add_argument("--paper-scale", action="store_true", help="use eps=0.01, delta=1e-6")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="swcaw", description="Scenario-with-certificates anti-windup toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    c = sub.add_parser("complexity", parents=[common], help="sample-complexity table")
    c.add_argument("--epsilon", type=float, default=0.1)
    c.add_argument("--delta", type=float, default=1e-3)
    c.add_argument("--n-theta", type=int, default=1)
    c.add_argument("--k-t", type=int)
    c.add_argument("--alpha", type=float, default=1.0)
    c.add_argument("--json", action="store_true", help="print JSON instead of a table")
    for name, text in [("analyze", "certified regional gain at a fixed D_aw"),
                       ("synthesize", "anti-windup gain synthesis"),
                       ("gaincurve", "gain curve over the configured s grid"),
                       ("simulate", "step response as CSV"),
                       ("benchmark", "full benchmark pipeline into --out")]:
        sub.add_parser(name, parents=[common], help=text)
    return p


def _run(args) -> int:
    if args.threads < 1:
        raise CliError("--threads must be at least 1")
    out = Path(args.out) if args.out else None
    if args.command == "complexity":
        eps, delta = FULL_SCALE_LEVELS if args.paper_scale else (args.epsilon, args.delta)
        try:
            res = cmd_complexity(eps, delta, args.n_theta, args.k_t, args.alpha)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        _write(out, "complexity.json" if args.json else "complexity.txt",
               _dumps(res) if args.json else _format_complexity(res))
        return EXIT_OK
    cfg = load_config(args.config, args.seed, args.paper_scale)
    if args.command == "benchmark":
        if out is None:
            raise CliError("benchmark needs --out DIR")
        cmd_benchmark(cfg, out, args.threads)
    elif args.command == "analyze":
        _write(out, "analysis.json", _dumps(cmd_analyze(cfg, args.threads)))
    elif args.command == "synthesize":
        _write(out, "design.json", _dumps(cmd_synthesize(cfg, args.threads)))
    elif args.command == "gaincurve":
        _write(out, "gaincurve.csv", cmd_gaincurve(cfg, args.threads))
    elif args.command == "simulate":
        _write(out, "trajectory.csv", cmd_simulate(cfg))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except Infeasible as exc:
        art = exc.args[0]
        out = Path(args.out) if args.out else None
        name = {"analyze": "analysis.json", "synthesize": "design.json"}.get(args.command, "infeasible.json")
        _write(out, name, _dumps(art))
        print("swcaw: result infeasible", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ScenarioError as exc:
        print(f"swcaw: {exc}", file=sys.stderr)
        infeasible = exc.context.get("status") == SolveStatus.INFEASIBLE.value
        return EXIT_INFEASIBLE if infeasible else EXIT_ERROR
    except (CliError, ValueError, sim.SimulationError, OSError) as exc:
        print(f"swcaw: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
