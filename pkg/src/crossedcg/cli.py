"""Command line driver: ``crossedcg <command> [--config FILE] [--key value ...]``.

Every parameter can come from an INI file section named after the command
or from a ``--key`` flag; flags win. Unknown sections and keys are errors.
Results go to ``--output`` (CSV or JSON) and a manifest with the resolved
configuration and library versions is written next to them.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import platform
import sys
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import scipy

from . import __version__
from .cg import cg_sample, cg_solve, ic_preconditioner, jacobi_preconditioner, pcg_solve
from .cholesky import CholeskySampler, ci_graph, min_degree_order, numeric_cholesky, symbolic_factor
from .designs import DesignSpec, Family, gen_uniform_cells, read_design
from .experiments import (
    TABLE3_CASES,
    cost_benchmark,
    cost_slopes,
    ladder_design,
    rows_to_dicts,
    spectrum_panels,
    table1,
    table3_analog,
    worst_case_benchmark,
)
from .gibbs import GLMMSpec, Likelihood, WishartPrior, geweke_z, run_chain
from .mmio import read_matrix_market
from .sparse_core import FactorDesign, PrecisionModel, assemble_precision, build_design_matrix

__all__ = ["ConfigError", "ExperimentConfig", "SCHEMAS", "load_config", "run", "main"]

SPECTRAL_CAP = 4000
FACTOR_CAP = 20000


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Parameter schema


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in str(text).replace(",", " ").split())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t for t in str(text).replace(",", " ").split())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv: Callable) -> Callable:
    def parse(text):
        if text is None or str(text).strip().lower() in ("", "none"):
            return None
        return conv(text)

    return parse


@dataclass(frozen=True)
class Param:
    parse: Callable[[Any], Any]
    default: Any
    help: str
    choices: tuple[str, ...] | None = None


def _common(cap: int | None) -> dict[str, Param]:
    out = {
        "seed": Param(int, 0, "random seed"),
        "output": Param(_opt(str), None, "result file (stdout when omitted)"),
    }
    if cap is not None:
        out["max_p"] = Param(int, cap, "desk-scale cap on the dimension p")
    return out


_DESIGN_PARAMS = {
    "family": Param(str, "uniform", "design generator",
                    tuple(f.value for f in Family) + ("uniform",)),
    "G": Param(_int_list, (30, 100, 200), "level counts"),
    "K": Param(_opt(int), None, "number of factors for mcar (defaults to len(G))"),
    "pi": Param(_opt(float), None, "cell probability (mcar, er_bipartite)"),
    "N": Param(_opt(int), None, "number of observed cells (uniform)"),
    "d": Param(_int_list, (), "degrees (biregular, worst_case)"),
    "design_file": Param(_opt(str), None, "design file; overrides the generator"),
}

SCHEMAS: dict[str, dict[str, Param]] = {
    "benchmark-fig1": {
        **_common(None),
        "design": Param(str, "mcar", "mcar scenario or worst-case design", ("mcar", "worst_case")),
        "scenario": Param(str, "a", "MCAR scenario", ("a", "b", "c")),
        "grid": Param(_int_list, (50, 100, 200, 400), "ascending level counts G"),
        "d": Param(int, 3, "degree of the worst-case design"),
        "order": Param(str, "auto", "elimination order", ("auto", "min_degree", "natural")),
        "tol": Param(float, 1e-8, "CG relative residual tolerance"),
    },
    "table1": {
        **_common(SPECTRAL_CAP),
        "G1": Param(int, 100, "levels of the first factor"),
        "G2": Param(_int_list, (100, 1000), "levels of the second factor"),
        "tol": Param(float, 1e-8, "CG relative residual tolerance"),
    },
    "table3": {
        **_common(None),
        "cases": Param(_str_list, TABLE3_CASES, f"ladder cases from {TABLE3_CASES}"),
        "N": Param(int, 7000, "observations"),
        "sweeps": Param(int, 250, "total Gibbs sweeps"),
        "burnin": Param(int, 50, "discarded sweeps"),
        "tol": Param(float, 1e-8, "CG relative residual tolerance"),
        "n_trials": Param(int, 1, "binomial trials per observation"),
    },
    "spectrum": {
        **_common(SPECTRAL_CAP),
        **_DESIGN_PARAMS,
        "N": Param(_opt(int), 2000, "number of observed cells (uniform)"),
        "tau": Param(float, 1.0, "likelihood precision"),
        "prior": Param(float, 1.0, "prior precision T_k"),
        "bins": Param(int, 50, "histogram bins"),
    },
    "solve": {
        **_common(FACTOR_CAP),
        "matrix": Param(_opt(str), None, "Matrix Market file of an SPD matrix"),
        "rhs": Param(_opt(str), None, "right-hand side, one value per line (default: ones)"),
        "preconditioner": Param(str, "none", "preconditioner", ("none", "jacobi", "ic0")),
        "tol": Param(float, 1e-8, "relative residual tolerance"),
        "maxit": Param(_opt(int), None, "iteration cap (default 10 p)"),
        "solution": Param(_opt(str), None, "write the solution vector here"),
    },
    "chol": {
        **_common(FACTOR_CAP),
        "matrix": Param(_opt(str), None, "Matrix Market file of an SPD matrix"),
        "ordering": Param(str, "min_degree", "elimination order", ("min_degree", "natural")),
        "numeric": Param(_bool, False, "also factor numerically and report the residual"),
    },
    "sample": {
        **_common(FACTOR_CAP),
        "matrix": Param(_opt(str), None, "Matrix Market file of the N x p design matrix V"),
        "mean": Param(_opt(str), None, "vector m of Q theta = m, one value per line (default: zeros)"),
        "prior": Param(float, 1.0, "diagonal prior precision T"),
        "tau": Param(float, 1.0, "likelihood precision"),
        "method": Param(str, "cg", "sampler", ("cg", "cholesky")),
        "draws": Param(int, 1, "number of draws"),
        "tol": Param(float, 1e-8, "CG relative residual tolerance"),
    },
    "gibbs": {
        **_common(FACTOR_CAP),
        "design_file": Param(_opt(str), None, "design file (default: synthetic ladder design)"),
        "slope_file": Param(_opt(str), None, "slope covariate file for design_file"),
        "response": Param(_opt(str), None, "responses, one per line (required with design_file)"),
        "case": Param(str, "intercepts", "synthetic ladder case", TABLE3_CASES),
        "N": Param(int, 7000, "observations of the synthetic design"),
        "likelihood": Param(str, "binomial", "likelihood", tuple(l.value for l in Likelihood)),
        "n_trials": Param(int, 1, "binomial trials per observation"),
        "tau": Param(float, 1.0, "Gaussian likelihood precision"),
        "fixed_precision": Param(float, 1e-2, "prior precision of the fixed effects (0 is flat)"),
        "learn_T": Param(_bool, True, "update the factor precisions"),
        "alpha": Param(_opt(float), None, "Wishart degrees of freedom (default per dimension)"),
        "phi": Param(_opt(float), None, "Wishart Phi = phi I (default 10)"),
        "sweeps": Param(int, 250, "total sweeps"),
        "burnin": Param(int, 50, "discarded sweeps"),
        "sampler": Param(str, "cg", "theta sampler", ("cg", "cholesky")),
        "tol": Param(float, 1e-8, "CG relative residual tolerance"),
    },
}


@dataclass
class ExperimentConfig:
    """A validated command with its fully resolved parameters."""

    command: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in SCHEMAS:
            raise ConfigError(f"unknown command '{self.command}'")
        schema = SCHEMAS[self.command]
        unknown = sorted(set(self.params) - set(schema))
        if unknown:
            raise ConfigError(f"unknown keys for '{self.command}': {', '.join(unknown)}")
        resolved = {}
        for key, prm in schema.items():
            raw = self.params.get(key, prm.default)
            try:
                value = raw if raw is prm.default else prm.parse(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{self.command}.{key}: {exc}") from None
            if prm.choices is not None and value not in prm.choices and not (
                isinstance(value, tuple) and all(v in prm.choices for v in value)
            ):
                raise ConfigError(f"{self.command}.{key} must be one of {prm.choices}, got {value!r}")
            resolved[key] = value
        self.params = resolved

    @property
    def seed(self) -> int:
        return self.params["seed"]

    def echo(self) -> dict:
        return {"command": self.command, "params": {k: list(v) if isinstance(v, tuple) else v
                                                    for k, v in self.params.items()}}


def load_config(path: str, command: str) -> dict[str, str]:
    """Read the section named ``command`` from an INI file."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    extra = [s for s in parser.sections() if s != command]
    if extra:
        raise ConfigError(f"{path}: unknown sections {extra} for command '{command}'")
    return dict(parser[command]) if parser.has_section(command) else {}


# ---------------------------------------------------------------------------
# Helpers


def _check_cap(p: int, cfg: ExperimentConfig) -> None:
    cap = cfg.params.get("max_p")
    if cap is not None and p > cap:
        raise ConfigError(f"p = {p} exceeds the desk-scale cap {cap}; raise it with --max-p")


def _read_vector(path: str) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=1)


def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _design(cfg: ExperimentConfig) -> FactorDesign:
    prm = cfg.params
    if prm["design_file"]:
        return read_design(prm["design_file"])
    G = prm["G"]
    if prm["family"] == "uniform":
        if prm["N"] is None:
            raise ConfigError("the uniform family needs N")
        return gen_uniform_cells(G, prm["N"], cfg.seed)
    K = prm["K"] if prm["K"] is not None else len(G)
    return DesignSpec(prm["family"], K, G, prm["pi"], prm["d"], cfg.seed).generate()


def versions() -> dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "crossedcg": __version__}


@dataclass
class Result:
    text: str
    summary: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Commands


def cmd_benchmark_fig1(cfg: ExperimentConfig) -> Result:
    prm = cfg.params
    if prm["design"] == "worst_case":
        order = "natural" if prm["order"] == "auto" else prm["order"]
        rows = worst_case_benchmark(prm["grid"], prm["d"], order, cfg.seed, prm["tol"])
    else:
        order = "min_degree" if prm["order"] == "auto" else prm["order"]
        rows = cost_benchmark(prm["scenario"], prm["grid"], cfg.seed, prm["tol"], order)
    summary = cost_slopes(rows) if len(rows) > 1 else {}
    summary["order"] = order
    return Result(_csv_text(rows_to_dicts(rows)), summary)


def cmd_table1(cfg: ExperimentConfig) -> Result:
    prm = cfg.params
    for G2 in prm["G2"]:
        _check_cap(prm["G1"] + G2 + 1, cfg)
    rows = table1(prm["G1"], prm["G2"], cfg.seed, prm["tol"])
    return Result(_csv_text(rows_to_dicts(rows)))


def cmd_table3(cfg: ExperimentConfig) -> Result:
    prm = cfg.params
    rows = table3_analog(prm["cases"], prm["N"], cfg.seed, prm["sweeps"], prm["burnin"], prm["tol"],
                         prm["n_trials"])
    return Result(_csv_text(rows_to_dicts(rows)))


def cmd_spectrum(cfg: ExperimentConfig) -> Result:
    prm = cfg.params
    design = _design(cfg)
    _check_cap(design.p, cfg)
    model = PrecisionModel(np.full(design.p, prm["prior"]), tau=prm["tau"])
    panels = spectrum_panels(design, model, prm["bins"])
    rows = []
    for name, edges, counts in (("Q", panels.edges_Q, panels.counts_Q), ("Qbar", panels.edges_Qbar, panels.counts_Qbar)):
        rows += [{"panel": name, "bin_left": f"{lo:.17g}", "bin_right": f"{hi:.17g}", "count": int(c)}
                 for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    for k, ref in enumerate(panels.reference_lines):
        rows.append({"panel": f"Q:reference:factor{k}", "bin_left": f"{ref:.17g}", "bin_right": f"{ref:.17g}",
                     "count": 0})
    return Result(_csv_text(rows), {"p": design.p, "N": design.N, "reference_lines": panels.reference_lines})


def _load_square(cfg: ExperimentConfig):
    if not cfg.params["matrix"]:
        raise ConfigError(f"'{cfg.command}' needs --matrix")
    A = read_matrix_market(cfg.params["matrix"])
    if A.rows != A.cols:
        raise ConfigError(f"matrix is {A.rows} x {A.cols}, expected square")
    _check_cap(A.rows, cfg)
    return A


def cmd_solve(cfg: ExperimentConfig) -> Result:
    prm = cfg.params
    A = _load_square(cfg)
    b = np.ones(A.rows) if prm["rhs"] is None else _read_vector(prm["rhs"])
    if b.size != A.rows:
        raise ConfigError(f"rhs has {b.size} entries, expected {A.rows}")
    if prm["preconditioner"] == "none":
        x, rep = cg_solve(A, b, prm["tol"], prm["maxit"])
    else:
        M = jacobi_preconditioner(A.diagonal()) if prm["preconditioner"] == "jacobi" else ic_preconditioner(A)
        x, rep = pcg_solve(A, M, b, prm["tol"], prm["maxit"])
    if prm["solution"]:
        np.savetxt(prm["solution"], x, fmt="%.17g")
    out = {"p": A.rows, "nnz": A.nnz, **rep.to_dict()}
    return Result(json.dumps(out, indent=2) + "\n", {"iterations": rep.iterations, "converged": rep.converged})


def cmd_chol(cfg: ExperimentConfig) -> Result:
    prm = cfg.params
    A = _load_square(cfg)
    graph = ci_graph(A)
    order = min_degree_order(graph) if prm["ordering"] == "min_degree" else np.arange(A.rows)
    rep = symbolic_factor(graph, order)
    out = {"p": A.rows, "nnz": A.nnz, "ordering": prm["ordering"], **rep.to_dict()}
    if prm["numeric"]:
        L = numeric_cholesky(A, order).csr
        P = A.permuted(order).to_dense()
        out["relative_residual"] = float(np.linalg.norm(P - (L @ L.T).toarray()) / np.linalg.norm(P))
    return Result(json.dumps(out, indent=2) + "\n", {"n_l_total": rep.total_nl})


def cmd_sample(cfg: ExperimentConfig) -> Result:
    prm = cfg.params
    if not prm["matrix"]:
        raise ConfigError("'sample' needs --matrix (the design matrix V)")
    V = read_matrix_market(prm["matrix"])
    p = V.cols
    _check_cap(p, cfg)
    model = PrecisionModel(np.full(p, prm["prior"]), tau=prm["tau"])
    m = np.zeros(p) if prm["mean"] is None else _read_vector(prm["mean"])
    if m.size != p:
        raise ConfigError(f"mean has {m.size} entries, expected {p}")
    if prm["draws"] < 1:
        raise ConfigError("draws must be positive")
    rng = np.random.default_rng(cfg.seed)
    draws, iters = [], []
    if prm["method"] == "cholesky":
        Q = assemble_precision(V, model)
        sampler = CholeskySampler()
        draws = [sampler.sample(Q, m, rng) for _ in range(prm["draws"])]
    else:
        for _ in range(prm["draws"]):
            theta, rep = cg_sample(V, model, m, prm["tol"], rng)
            draws.append(theta)
            iters.append(rep.iterations)
    text = "\n".join(",".join(f"{v:.17g}" for v in th) for th in draws) + "\n"
    summary = {"p": p, "draws": prm["draws"], "method": prm["method"]}
    if iters:
        summary["mean_cg_iterations"] = float(np.mean(iters))
    return Result(text, summary)


def cmd_gibbs(cfg: ExperimentConfig) -> Result:
    prm = cfg.params
    lik = Likelihood(prm["likelihood"])
    if prm["design_file"]:
        if not prm["response"]:
            raise ConfigError("'gibbs' with design_file needs --response")
        design = read_design(prm["design_file"], prm["slope_file"])
        y = _read_vector(prm["response"])
    else:
        design = ladder_design(prm["case"], prm["N"], cfg.seed)
        rng = np.random.default_rng([cfg.seed, 1])
        eta = build_design_matrix(design).csr @ (0.5 * rng.standard_normal(design.p))
        if lik is Likelihood.BINOMIAL_LOGIT:
            y = rng.binomial(prm["n_trials"], 1.0 / (1.0 + np.exp(-eta))).astype(np.float64)
        else:
            y = eta + rng.standard_normal(design.N) / np.sqrt(prm["tau"])
    _check_cap(design.p, cfg)
    priors = None
    if prm["alpha"] is not None or prm["phi"] is not None:
        defaults = [WishartPrior.default(D) for D in design.slope_dims]
        priors = tuple(WishartPrior(pr.alpha if prm["alpha"] is None else prm["alpha"],
                                    pr.Phi if prm["phi"] is None else prm["phi"] * np.eye(D))
                       for pr, D in zip(defaults, design.slope_dims))
    spec = GLMMSpec(design, y, lik, tau=prm["tau"], n_trials=np.full(design.N, prm["n_trials"]),
                    priors=priors, fixed_precision=prm["fixed_precision"], learn_T=prm["learn_T"])
    sampler = ("cg", prm["tol"]) if prm["sampler"] == "cg" else "cholesky"
    summary = run_chain(spec, prm["sweeps"], prm["burnin"], sampler, seed=cfg.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(summary.trace_columns)
    for row in summary.trace:
        w.writerow([int(row[0]), int(row[1]), int(row[2]), *(f"{v:.17g}" for v in row[3:])])
    fixed0 = summary.trace[:, summary.trace_columns.index("fixed_0")]
    info = {"p": design.p, "N": design.N, "mean_cg_iterations": summary.mean_cg_iterations,
            "geweke_z_fixed_0": geweke_z(fixed0) if fixed0.size >= 20 else None}
    return Result(buf.getvalue(), info)


COMMANDS: dict[str, Callable[[ExperimentConfig], Result]] = {
    "benchmark-fig1": cmd_benchmark_fig1,
    "table1": cmd_table1,
    "table3": cmd_table3,
    "spectrum": cmd_spectrum,
    "solve": cmd_solve,
    "chol": cmd_chol,
    "sample": cmd_sample,
    "gibbs": cmd_gibbs,
}


def run(cfg: ExperimentConfig) -> tuple[Result, dict]:
    """Execute ``cfg`` and return the result with its manifest."""
    result = COMMANDS[cfg.command](cfg)
    manifest = {**cfg.echo(), "versions": versions(), "summary": result.summary}
    return result, manifest


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossedcg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", ""))
        sp.add_argument("--config", help="INI file with a section named after the command")
        sp.add_argument("--manifest", help="manifest path (default: OUTPUT.manifest.json)")
        for key, prm in schema.items():
            hint = f" (choices: {', '.join(prm.choices)})" if prm.choices else ""
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                            help=f"{prm.help}; default {prm.default!r}{hint}")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    schema = SCHEMAS[args.command]
    try:
        params = load_config(args.config, args.command) if args.config else {}
        params.update({k: getattr(args, k) for k in schema if getattr(args, k) is not None})
        cfg = ExperimentConfig(args.command, params)
        result, manifest = run(cfg)
    except (ValueError, OSError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"crossedcg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    out = cfg.params["output"]
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(result.text)
    else:
        sys.stdout.write(result.text)
    mpath = args.manifest or (f"{out}.manifest.json" if out else None)
    if mpath:
        with open(mpath, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, default=str)
            fh.write("\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
