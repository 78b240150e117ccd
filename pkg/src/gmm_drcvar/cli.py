"""Batch command-line front end: gen-data, fit, ambiguity, solve, validate, compare.

Exit codes: 0 success, 2 input error, 3 model infeasible, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .ambiguity import AmbiguitySet, build_ambiguity_set
from .case_model import CaseError, build_ptdf, load_case
from .gmm import GmmParams, gmm_sample, read_samples_csv, select_m_bic
from .opf import (DispatchSolution, ModelInfeasible, SolverConfig, assemble_random_constraints,
                  build_master, solve_deterministic, solve_dro_opf)
from .oracle import ScenarioSet, generate_from_spec, out_of_sample_test
from .wccvar import MomentSet, wc_cvar

log = logging.getLogger("gmm_drcvar")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4
MODELS = ("dg", "na", "m", "det")
GLOBAL_DEFAULTS = {"seed": 0, "config": None, "out_dir": ".", "threads": 1, "verbose": False}


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# manifests and output helpers

def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    inputs: dict
    seed: int
    version: str = __version__
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def start(cls, command, options: dict, inputs):
        canon = json.dumps({k: v for k, v in sorted(options.items()) if k != "config"},
                           sort_keys=True, default=str)
        digests = {str(p): file_digest(p) for p in inputs if p}
        m = cls(command, hashlib.sha256(canon.encode()).hexdigest(), digests, options.get("seed", 0))
        m._t0 = time.perf_counter()
        return m

    def finish(self) -> dict:
        self.wall_time = time.perf_counter() - self._t0
        return asdict(self)


def _out(args, name) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _write_json(path, payload, manifest: RunManifest):
    payload = {**payload, "manifest": manifest.finish()}
    Path(path).write_text(json.dumps(payload, indent=2, default=_json_default) + "\n")
    log.info("wrote %s", path)


def _write_csv(path, header, rows, manifest: RunManifest):
    """CSV body stays byte-identical across runs; the manifest goes to a sidecar file."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest.finish(), indent=2) + "\n")
    log.info("wrote %s", path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def _need(path, what):
    if path is None:
        raise InputError(f"{what} not given")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _read_json(path, what):
    p = _need(path, what)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON ({exc})") from None


def _m_range(text):
    lo, _, hi = str(text).partition(":")
    try:
        lo, hi = int(lo), int(hi or lo)
    except ValueError:
        raise InputError(f"bad component range {text!r}; expected LO:HI") from None
    if lo < 1 or hi < lo:
        raise InputError(f"bad component range {text!r}")
    return lo, hi


def _config(args) -> SolverConfig:
    try:
        return SolverConfig(args.beta_reserve, args.beta_branch, args.tau_feas, args.max_iter,
                            args.drop_inactive, args.linearize)
    except ValueError as exc:
        raise InputError(str(exc)) from None


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    spec = _need(args.spec, "generator spec")
    man = RunManifest.start("gen-data", vars(args), [spec])
    s = generate_from_spec(spec, args.n, args.seed)
    out = Path(args.out) if args.out else _out(args, "scenarios.csv")
    _write_csv(out, s.ids, [[repr(float(v)) for v in row] for row in s.values], man)
    return EXIT_OK


def cmd_fit(args) -> int:
    data_path = _need(args.data, "data file")
    man = RunManifest.start("fit", vars(args), [data_path])
    data = read_samples_csv(data_path)
    fit = select_m_bic(data, _m_range(args.m_range), args.seed)
    out = Path(args.out) if args.out else _out(args, "fit.json")
    _write_json(out, {"params": fit.params.to_dict(), "fit": fit.to_dict(), "ids": data.ids}, man)
    return EXIT_OK


def cmd_ambiguity(args) -> int:
    data_path = _need(args.data, "data file")
    if args.n_resamples < 2:
        raise InputError("N >= 2 required")
    man = RunManifest.start("ambiguity", vars(args), [data_path])
    data = read_samples_csv(data_path)
    m_range = (args.m, args.m) if args.m else _m_range(args.m_range)
    amb, base = build_ambiguity_set(data, args.delta, args.n_resamples, m_range, args.seed, args.threads)
    out = Path(args.out) if args.out else _out(args, "ambiguity.json")
    _write_json(out, {**amb.to_dict(), "base_params": base.params.to_dict(),
                      "base_bic": base.bic, "ids": data.ids}, man)
    return EXIT_OK


def _load_source(args, model):
    """Risk source for a model from the file flags."""
    if model == "dg":
        d = _read_json(args.ambiguity, "ambiguity set")
        return AmbiguitySet.from_dict(d), [args.ambiguity]
    if model == "na":
        if args.gmm:
            return _params_from(_read_json(args.gmm, "GMM parameters"), args.gmm), [args.gmm]
        d = _read_json(args.ambiguity, "GMM parameters (--gmm) or ambiguity file with base fit")
        if "base_params" not in d:
            raise InputError("NA model needs --gmm, or an ambiguity file carrying base_params")
        return GmmParams.from_dict(d["base_params"]), [args.ambiguity]
    if model == "m":
        if args.moments:
            return MomentSet.from_dict(_read_json(args.moments, "moment file")), [args.moments]
        p = _need(args.data, "moment file (--moments) or data file (--data)")
        return MomentSet.from_samples(read_samples_csv(p).values), [p]
    return None, []


def _params_from(d: dict, path) -> GmmParams:
    try:
        return GmmParams.from_dict(d.get("params") or d.get("base_params") or d)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: not a GMM parameter file ({exc})") from None


def _solve(case, ptdf, model, source, config):
    if model == "det":
        return solve_deterministic(case, ptdf, config)
    return solve_dro_opf(case, ptdf, source, config)


def _density_rows(case, source, beta):
    """Worst-case and nominal density of the aggregate error on a grid (upward-reserve exposure)."""
    w = len(case.wind_farms)
    if isinstance(source, GmmParams):
        source = AmbiguitySet.singleton(source)
    if not isinstance(source, AmbiguitySet) or w == 0:
        return None
    res = wc_cvar(-np.ones(w), source, beta)
    mu = -np.array([s.mu_bar for s in res.component_stats])
    sd = np.array([s.sigma_bar for s in res.component_stats])
    nominal = source.center_params()
    one = np.ones(w)
    mu0 = nominal.means @ one
    sd0 = np.sqrt(np.einsum("i,mij,j->m", one, nominal.covariances, one))
    grid = np.linspace(min(mu - 5 * sd), max(mu + 5 * sd), 401)

    def pdf(wts, m, s):
        return (wts * np.exp(-0.5 * ((grid[:, None] - m) / s) ** 2) / (s * np.sqrt(2 * np.pi))).sum(axis=1)

    wc = pdf(res.worst_weights, mu, sd)
    nom = pdf(nominal.weights, mu0, sd0)
    return [[repr(float(a)), repr(float(b)), repr(float(c))] for a, b, c in zip(grid, wc, nom)]


def cmd_solve(args) -> int:
    case_path = _need(args.case, "case file")
    case = load_case(case_path)
    config = _config(args)
    source, src_files = _load_source(args, args.model)
    man = RunManifest.start("solve", vars(args), [case_path, *src_files])
    ptdf = build_ptdf(case)
    try:
        sol, report = _solve(case, ptdf, args.model, source, config)
    except ModelInfeasible as exc:
        out = _out(args, "solve_report.json")
        _write_json(out, {"status": "infeasible", "message": str(exc), "violating": exc.violating}, man)
        raise
    _write_json(_out(args, "solution.json"), {"model": args.model, "solution": sol.to_dict()},
                RunManifest.start("solve", vars(args), [case_path, *src_files]))
    _write_json(_out(args, "solve_report.json"), {"model": args.model, **report.to_dict()}, man)
    rows = [[k, g.bus, *(repr(float(v)) for v in (sol.p[k], sol.r_up[k], sol.r_dn[k], sol.alpha[k]))]
            for k, g in enumerate(case.generators)]
    _write_csv(_out(args, "dispatch.csv"), ["gen", "bus", "p_MW", "r_up_MW", "r_dn_MW", "alpha"], rows, man)
    dens = _density_rows(case, source, config.beta_reserve)
    if dens:
        _write_csv(_out(args, "worst_case_density.csv"), ["aggregate_error_MW", "worst_case_pdf", "nominal_pdf"],
                   dens, man)
    print(f"{args.model}: status {report.status}, objective {sol.objective:.6f}, "
          f"{len(report.records)} iterations, {report.cuts_added} cuts")
    if report.status != "optimal":
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_validate(args) -> int:
    sol_path = _need(args.solution, "solution file")
    case_path = _need(args.case, "case file")
    scen_path = _need(args.scenarios, "scenario file")
    case = load_case(case_path)
    d = _read_json(sol_path, "solution file")
    try:
        sol = DispatchSolution.from_dict(d.get("solution", d))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{sol_path}: not a dispatch solution ({exc})") from None
    man = RunManifest.start("validate", vars(args), [sol_path, case_path, scen_path])
    config = _config(args)
    ptdf = build_ptdf(case)
    _, lay = build_master(case, ptdf)
    if sol.x.size != lay.size:
        raise InputError(f"{sol_path}: solution does not match case {case_path}")
    specs = assemble_random_constraints(case, ptdf, lay, config)
    scen = ScenarioSet.from_csv(scen_path)
    if scen.values.shape[1] != len(case.wind_farms):
        raise InputError(f"{scen_path}: {scen.values.shape[1]} columns for {len(case.wind_farms)} wind farms")
    rep = out_of_sample_test(sol, specs, scen, config, args.n_sigma)
    _write_json(Path(args.out) if args.out else _out(args, "oos_report.json"), rep.to_dict(), man)
    print(f"out-of-sample: {'pass' if rep.passed else 'FAIL'}, max violation {rep.max_violation:.6g} MW "
          f"over {rep.n_scenarios} scenarios")
    return EXIT_OK


def cmd_compare(args) -> int:
    case_path = _need(args.case, "case file")
    data_path = _need(args.data, "data file")
    case = load_case(case_path)
    config = _config(args)
    inputs = [case_path, data_path] + [p for p in (args.ambiguity, args.scenarios) if p]
    man = RunManifest.start("compare", vars(args), inputs)
    data = read_samples_csv(data_path)
    if args.ambiguity:
        d = _read_json(args.ambiguity, "ambiguity set")
        amb = AmbiguitySet.from_dict(d)
        if "base_params" in d:
            base = GmmParams.from_dict(d["base_params"])
        elif args.gmm:
            base = _params_from(_read_json(args.gmm, "GMM parameters"), args.gmm)
        else:
            raise InputError("ambiguity file lacks base_params; pass --gmm")
    else:
        m_range = (args.m, args.m) if args.m else _m_range(args.m_range)
        amb, fit = build_ambiguity_set(data, args.delta, args.n_resamples, m_range, args.seed, args.threads)
        base = fit.params
    if args.scenarios:
        scen = ScenarioSet.from_csv(_need(args.scenarios, "scenario file"))
    else:
        scen = ScenarioSet(gmm_sample(base, args.n_oos, args.seed), data.ids, args.seed, "base-fit draws")

    ptdf = build_ptdf(case)
    sources = {"na": base, "dg": amb, "m": MomentSet.from_samples(data.values)}
    rows, records = [], []
    for model in args.models:
        t = time.perf_counter()
        sol, report = _solve(case, ptdf, model, sources.get(model), config)
        secs = time.perf_counter() - t
        _, lay = build_master(case, ptdf)
        specs = assemble_random_constraints(case, ptdf, lay, config)
        oos = out_of_sample_test(sol, specs, scen, config, args.n_sigma)
        rows.append([model, repr(sol.objective), repr(oos.max_violation), repr(float(sol.r_up.sum())),
                     f"{secs:.4f}"])
        records.append({"model": model, "cost": sol.objective, "max_violation": oos.max_violation,
                        "upward_reserve_MW": float(sol.r_up.sum()), "solve_seconds": secs,
                        "iterations": len(report.records), "cuts_added": report.cuts_added,
                        "oos_passed": oos.passed, "solution": sol.to_dict()})
        print(f"{model:>3}: cost {sol.objective:12.4f}  max violation {oos.max_violation:10.4f} MW  "
              f"upward reserve {sol.r_up.sum():9.4f} MW  {secs:.3f} s")
    _write_csv(_out(args, "compare.csv"), ["model", "cost", "max_violation", "upward_reserve_MW",
                                           "solve_seconds"], rows, man)
    _write_json(_out(args, "compare.json"), {"models": records, "n_oos": scen.n}, man)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

def _arg(p, suppress, *names, **kw):
    if suppress:
        kw["default"] = argparse.SUPPRESS
    p.add_argument(*names, **kw)


def _add_globals(p):
    _arg(p, True, "--seed", type=int, help="random seed (default 0)")
    _arg(p, True, "--config", help="TOML file mirroring the flags; flags win")
    _arg(p, True, "--out-dir", help="output directory (default .)")
    _arg(p, True, "--threads", type=int, help="worker threads for the bootstrap (default 1)")
    _arg(p, True, "-v", "--verbose", action="store_true")


def _add_solver(p, sup):
    _arg(p, sup, "--beta-reserve", type=float, default=0.02)
    _arg(p, sup, "--beta-branch", type=float, default=0.04)
    _arg(p, sup, "--tau-feas", type=float, default=1e-6)
    _arg(p, sup, "--max-iter", type=int, default=50)
    _arg(p, sup, "--drop-inactive", action="store_true", default=False)
    _arg(p, sup, "--linearize", type=int, default=0, metavar="K",
         help="solve with a K-segment piecewise-linear fuel cost")


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """The CLI parser; ``suppress=True`` drops all defaults so only explicit flags appear."""
    sup = suppress
    ap = argparse.ArgumentParser(prog="gmm-drcvar", description=__doc__.splitlines()[0])
    _add_globals(ap)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthetic forecast errors from a TOML marginal/correlation spec")
    p.add_argument("spec")
    _arg(p, sup, "--n", type=int, default=None, help="sample count (default: spec's n)")
    _arg(p, sup, "--out", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit", help="fit a GMM with BIC-selected component count")
    p.add_argument("data")
    _arg(p, sup, "--m-range", default="1:6")
    _arg(p, sup, "--out", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ambiguity", help="bootstrap credible regions of the GMM parameters")
    p.add_argument("data")
    _arg(p, sup, "--delta", type=float, default=0.95)
    _arg(p, sup, "--n-resamples", type=int, default=2000)
    _arg(p, sup, "--m-range", default="1:6")
    _arg(p, sup, "--m", type=int, default=None, help="fix the component count")
    _arg(p, sup, "--out", default=None)
    p.set_defaults(func=cmd_ambiguity)

    p = sub.add_parser("solve", help="solve the dispatch problem")
    p.add_argument("case")
    _arg(p, sup, "--model", choices=MODELS, default="dg")
    _arg(p, sup, "--ambiguity", default=None)
    _arg(p, sup, "--gmm", default=None)
    _arg(p, sup, "--moments", default=None)
    _arg(p, sup, "--data", default=None)
    _add_solver(p, sup)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("validate", help="out-of-sample CVaR test of a fixed dispatch")
    p.add_argument("solution")
    p.add_argument("case")
    p.add_argument("scenarios")
    _arg(p, sup, "--n-sigma", type=float, default=3.0)
    _arg(p, sup, "--out", default=None)
    _add_solver(p, sup)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="NA, DG and M models side by side")
    p.add_argument("case")
    p.add_argument("data")
    _arg(p, sup, "--ambiguity", default=None)
    _arg(p, sup, "--gmm", default=None)
    _arg(p, sup, "--scenarios", default=None)
    _arg(p, sup, "--n-oos", type=int, default=100000)
    _arg(p, sup, "--n-sigma", type=float, default=3.0)
    _arg(p, sup, "--models", nargs="+", choices=MODELS, default=["na", "dg", "m"])
    _arg(p, sup, "--delta", type=float, default=0.95)
    _arg(p, sup, "--n-resamples", type=int, default=2000)
    _arg(p, sup, "--m-range", default="1:6")
    _arg(p, sup, "--m", type=int, default=None)
    _add_solver(p, sup)
    p.set_defaults(func=cmd_compare)

    for sp in sub.choices.values():
        _add_globals(sp)
    return ap


def _load_config(path, command) -> dict:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        d = tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as exc:
        raise InputError(f"{p}: {exc}") from None
    flat = {k: v for k, v in d.items() if not isinstance(v, dict)}
    flat.update(d.get(command, {}))
    return {k.replace("-", "_"): v for k, v in flat.items()}


def parse_args(argv=None) -> argparse.Namespace:
    """Flags over config file over built-in defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    explicit = vars(build_parser(suppress=True).parse_args(argv))
    merged = {**GLOBAL_DEFAULTS, **vars(args)}
    if explicit.get("config"):
        known = set(merged)
        for k, v in _load_config(explicit["config"], args.command).items():
            if k not in known or k in ("func", "command"):
                raise InputError(f"unknown config key {k!r} for command {args.command}")
            merged[k] = v
    merged.update(explicit)
    return argparse.Namespace(**merged)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, CaseError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ModelInfeasible as exc:
        msg = f"infeasible: {exc}"
        if exc.violating:
            msg += f"; constraints with cuts: {', '.join(exc.violating)}"
        print(msg, file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
