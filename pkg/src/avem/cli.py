"""Config-driven command line: simulate, fit, experiment, validate.

File formats are designed for byte-stable reruns: floats are written with
repr (shortest round-trip decimal), wall-clock times are omitted unless
--with-timing is given, and every output embeds the config hash and master
seed.  Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .base import FitReport, NumericalError
from .emissions import BernoulliEmission, GaussianEmission
from .messm import MessmParams
from .partial import PavemParams
from .simlab import (
    MethodSpec,
    ReplicateResult,
    ScenarioSpec,
    fit_method,
    generate,
    run_monte_carlo,
)
from .validate import SUITES, run_suite

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

_SCENARIO_KEYS = {f.name for f in fields(ScenarioSpec)} - {"seed"}
_SCENARIO_INT_KEYS = {"n", "T", "K", "d", "t0"}
_METHOD_KEYS = {"kind", "n_nodes", "n_samples", "max_iter", "rel_tol"}
_TOP_KEYS = {"schema_version", "scenario", "methods", "n_reps", "output_dir", "master_seed"}


class ConfigError(Exception):
    """Malformed configuration or command arguments; exits with code 2."""


@dataclass
class ExperimentConfig:
    """Validated contents of a config file plus the hash of its raw bytes."""

    scenario: dict
    methods: list[MethodSpec]
    n_reps: int
    output_dir: str
    master_seed: int
    config_sha256: str


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _require_int(value, where: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{where} must be >= {minimum}, got {value}")
    return value


def _check_scenario_block(block) -> dict:
    if not isinstance(block, dict):
        raise ConfigError("scenario must be an object")
    unknown = set(block) - _SCENARIO_KEYS
    if "seed" in block:
        raise ConfigError("scenario.seed is not a config key; seeding comes from master_seed or --seed")
    if unknown:
        raise ConfigError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
    if "variant" not in block or "n" not in block or "T" not in block:
        raise ConfigError("scenario needs at least variant, n, and T")
    for key, value in block.items():
        values = value if isinstance(value, list) else [value]
        if not values:
            raise ConfigError(f"scenario.{key} is an empty list")
        for v in values:
            if key in _SCENARIO_INT_KEYS:
                _require_int(v, f"scenario.{key}")
            elif key != "variant" and isinstance(v, bool):
                raise ConfigError(f"scenario.{key} must be a number")
    return block


def _build_method(raw, where: str) -> MethodSpec:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(raw) - _METHOD_KEYS
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(sorted(unknown))}")
    if "kind" not in raw:
        raise ConfigError(f"{where} needs a kind")
    try:
        return MethodSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    sha = hashlib.sha256(raw).hexdigest()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"missing or unsupported schema_version; this build reads version {SCHEMA_VERSION}")
    if "scenario" not in doc:
        raise ConfigError("config needs a scenario block")
    scenario = _check_scenario_block(doc["scenario"])
    raw_methods = doc.get("methods", [])
    if not isinstance(raw_methods, list):
        raise ConfigError("methods must be a list")
    methods = [_build_method(m, f"methods[{i}]") for i, m in enumerate(raw_methods)]
    n_reps = _require_int(doc.get("n_reps", 1), "n_reps", minimum=1)
    master_seed = _require_int(doc.get("master_seed", 0), "master_seed")
    output_dir = doc.get("output_dir", "out")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")
    return ExperimentConfig(scenario=scenario, methods=methods, n_reps=n_reps,
                            output_dir=output_dir, master_seed=master_seed, config_sha256=sha)


def expand_grid(scenario: dict, seed: int) -> list[ScenarioSpec]:
    """Cartesian product over list-valued scenario keys, in config key order."""
    grid_keys = [k for k, v in scenario.items() if isinstance(v, list)]
    scalars = {k: v for k, v in scenario.items() if not isinstance(v, list)}
    specs = []
    for combo in itertools.product(*(scenario[k] for k in grid_keys)):
        cell = dict(scalars)
        cell.update(zip(grid_keys, combo))
        try:
            specs.append(ScenarioSpec(seed=seed, **cell))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scenario: {exc}") from exc
    return specs


def _single_spec(config: ExperimentConfig, seed: int) -> ScenarioSpec:
    specs = expand_grid(config.scenario, seed)
    if len(specs) != 1:
        raise ConfigError("this command needs scalar scenario values (lists are for experiment grids)")
    return specs[0]


# ---------------------------------------------------------------------------
# serialization helpers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _meta(sha: str, master_seed: int) -> dict:
    return {"schema_version": SCHEMA_VERSION, "config_sha256": sha, "master_seed": master_seed}


def write_csv(path: Path, fieldnames: list[str], rows, meta: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={_fmt(v)}" for k, v in meta.items()) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row[name]) for name in fieldnames])


def write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_csv(path: Path):
    """Rows of a metadata-prefixed CSV; returns (header, list of row lists)."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def _effect_columns(spec: ScenarioSpec, truth) -> tuple[list[str], np.ndarray]:
    if spec.variant == "localized":
        return ["f_a", "f_b"], np.column_stack([truth.f_a, truth.f_b])
    if spec.variant == "messm":
        names = [f"g{j + 1}" for j in range(truth.gs.shape[1])]
        names += [f"h{j + 1}" for j in range(truth.hs.shape[1])]
        return names, np.hstack([truth.gs, truth.hs])
    return [f"f{j + 1}" for j in range(truth.f.shape[1])], truth.f


def write_dataset(out_dir: Path, spec: ScenarioSpec, replicate: int, sha: str) -> dict:
    datasets, truth = generate(spec, replicate)
    meta = _meta(sha, spec.seed)
    p = datasets[0].shape[1]
    obs_rows = []
    for i, D in enumerate(datasets):
        for t in range(D.shape[0]):
            obs_rows.append({"subject_id": i, "t": t, **{f"d{j + 1}": D[t, j] for j in range(p)}})
    write_csv(out_dir / "dataset.csv",
              ["subject_id", "t"] + [f"d{j + 1}" for j in range(p)], obs_rows, meta)
    if spec.variant == "messm":
        q = truth.latents[0].shape[1]
        state_names = [f"u{j + 1}" for j in range(q)]
        state_rows = [{"subject_id": i, "t": t, **{f"u{j + 1}": U[t, j] for j in range(q)}}
                      for i, U in enumerate(truth.latents) for t in range(U.shape[0])]
    else:
        state_names = ["state"]
        state_rows = [{"subject_id": i, "t": t, "state": int(s[t])}
                      for i, s in enumerate(truth.states) for t in range(s.shape[0])]
    write_csv(out_dir / "truth_states.csv", ["subject_id", "t"] + state_names, state_rows, meta)
    eff_names, eff = _effect_columns(spec, truth)
    eff_rows = [{"subject_id": i, **{nm: eff[i, j] for j, nm in enumerate(eff_names)}}
                for i in range(eff.shape[0])]
    write_csv(out_dir / "truth_effects.csv", ["subject_id"] + eff_names, eff_rows, meta)
    manifest = {
        **_meta(sha, spec.seed),
        "kind": "dataset",
        "replicate": replicate,
        "scenario": asdict(spec),
        "files": {"data": "dataset.csv", "states": "truth_states.csv", "effects": "truth_effects.csv"},
    }
    write_json(out_dir / "manifest.json", manifest)
    return manifest


def read_dataset(data_dir: str):
    """Load a simulate output directory back into memory, exactly."""
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{root / 'manifest.json'}: invalid JSON: {exc.msg}")
    if manifest.get("kind") != "dataset" or manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{root} does not hold a version-{SCHEMA_VERSION} dataset")
    try:
        spec = ScenarioSpec(**manifest["scenario"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"manifest scenario block: {exc}") from exc
    header, rows = _read_csv(root / manifest["files"]["data"])
    by_subject: dict[int, list[list[float]]] = {}
    for row in rows:
        by_subject.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
    datasets = [np.array(by_subject[i]) for i in sorted(by_subject)]
    return datasets, spec, manifest


# ---------------------------------------------------------------------------
# fit result files
# ---------------------------------------------------------------------------

def _params_doc(params) -> dict:
    if isinstance(params, MessmParams):
        return {"family": "messm", "mu_g": params.mu_g, "Sigma_g": params.Sigma_g,
                "mu_h": params.mu_h, "Sigma_h": params.Sigma_h, "R_diag": params.R_diag,
                "m0": params.m0, "P0": params.P0}
    emission = params.emission
    if isinstance(emission, GaussianEmission):
        em_doc = {"kind": "gaussian", "mu": emission.mu, "sigma2": emission.sigma2}
    elif isinstance(emission, BernoulliEmission):
        em_doc = {"kind": "bernoulli", "beta": emission.beta}
    else:
        raise NumericalError(f"cannot serialize emission {type(emission).__name__}")
    doc = {"pi": params.chain.pi, "Gamma": params.chain.Gamma, "emission": em_doc}
    if isinstance(params, PavemParams):
        doc.update(family="pavem", tau_a2=params.tau_a2, tau_b2=params.tau_b2, t0=params.t0)
    else:
        doc.update(family="mhmm", Sigma=params.Sigma)
    return doc


def _subjects_doc(report: FitReport) -> list:
    if report.q_factors is None:
        return []
    docs = []
    for qf in report.q_factors:
        if hasattr(qf, "q_g"):  # state-space fits carry two factors per subject
            docs.append({"g": {"nu": qf.q_g.nu, "Omega": qf.q_g.Omega},
                         "h": {"nu": qf.q_h.nu, "Omega": qf.q_h.Omega}})
        else:
            docs.append({"nu": qf.nu, "Omega": qf.Omega})
    return docs


def write_fit_result(out_dir: Path, report: FitReport, method: MethodSpec, spec: ScenarioSpec,
                     replicate: int, sha: str, total_T: int, with_timing: bool) -> None:
    doc = {
        **_meta(sha, spec.seed),
        "kind": "fit_result",
        "method": method.label,
        "replicate": replicate,
        "scenario": asdict(spec),
        "converged": bool(report.extra.get("converged", False)),
        "n_iter": report.n_iter,
        "params": _params_doc(report.params),
        "subjects": _subjects_doc(report),
        "anchors": report.anchors,
        "f_hat": report.f_hat,
        "details": {k: v for k, v in report.extra.items()
                    if isinstance(v, (bool, int, float, str))},
    }
    if with_timing:
        doc["wall_time_seconds"] = report.wall_time_seconds
    write_json(out_dir / "result.json", doc)
    trace_rows = [{"iteration": i + 1, "elbo": float(v), "normalized_elbo": float(v) / total_T}
                  for i, v in enumerate(report.elbo_trace)]
    write_csv(out_dir / "elbo_trace.csv", ["iteration", "elbo", "normalized_elbo"],
              trace_rows, _meta(sha, spec.seed))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _out_dir(args, config: ExperimentConfig) -> Path:
    out = Path(args.out_dir if args.out_dir else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, config: ExperimentConfig) -> int:
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        return args.seed
    return config.master_seed


def _apply_overrides(methods: list[MethodSpec], args) -> list[MethodSpec]:
    out = []
    for m in methods:
        kw = {}
        if getattr(args, "max_iter", None) is not None:
            kw["max_iter"] = args.max_iter
        if getattr(args, "tol", None) is not None:
            kw["rel_tol"] = args.tol
        if getattr(args, "quad_nodes", None) is not None:
            kw["n_nodes"] = args.quad_nodes
        if getattr(args, "mc_samples", None) is not None:
            kw["n_samples"] = args.mc_samples
        try:
            out.append(replace(m, **kw) if kw else m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return out


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    spec = _single_spec(config, _seed(args, config))
    out = _out_dir(args, config)
    if args.replicate < 0:
        raise ConfigError("--replicate must be nonnegative")
    write_dataset(out, spec, args.replicate, config.config_sha256)
    print(f"wrote dataset ({spec.variant}, n={spec.n}, T={spec.T}) to {out}")
    return EXIT_OK


def _pick_method(config: ExperimentConfig, args) -> MethodSpec:
    if args.method:
        for m in config.methods:
            if m.label == args.method or m.kind == args.method:
                return m
        try:
            return MethodSpec(kind=args.method)
        except ValueError as exc:
            raise ConfigError(f"--method: {exc}") from exc
    if not config.methods:
        raise ConfigError("config lists no methods; add one or pass --method")
    return config.methods[0]


def cmd_fit(args) -> int:
    config = load_config(args.config)
    datasets, spec, manifest = read_dataset(args.data)
    if args.seed is not None:
        spec = replace(spec, seed=_seed(args, config))
    method = _apply_overrides([_pick_method(config, args)], args)[0]
    out = _out_dir(args, config)
    report = fit_method(spec, datasets, method, manifest.get("replicate", 0),
                        sign_align=not args.no_sign_align)
    total_T = sum(D.shape[0] for D in datasets)
    write_fit_result(out, report, method, spec, manifest.get("replicate", 0),
                     config.config_sha256, total_T, args.with_timing)
    print(f"fit {method.label}: {report.n_iter} iterations, "
          f"converged={bool(report.extra.get('converged', False))}, results in {out}")
    return EXIT_OK


_RESULT_COLUMNS = [f.name for f in fields(ScenarioSpec)] + ["replicate", "method", "converged"] \
    + [f.name for f in fields(ReplicateResult) if f.name != "wall_time"]


def cmd_experiment(args) -> int:
    config = load_config(args.config)
    if not config.methods:
        raise ConfigError("experiment needs at least one method")
    seed = _seed(args, config)
    specs = expand_grid(config.scenario, seed)
    methods = _apply_overrides(config.methods, args)
    out = _out_dir(args, config)
    n_jobs = args.threads if args.threads is not None else 1
    rows = run_monte_carlo(specs, methods, config.n_reps, n_jobs=n_jobs,
                           with_timing=args.with_timing, sign_align=not args.no_sign_align)
    columns = list(_RESULT_COLUMNS)
    if args.with_timing:
        columns.append("wall_time")
    write_csv(out / "results.csv", columns, rows, _meta(config.config_sha256, seed))
    print(f"wrote {len(rows)} result rows ({len(specs)} cells x {config.n_reps} reps x "
          f"{len(methods)} methods) to {out / 'results.csv'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    results = run_suite(args.suite, seed=args.seed if args.seed is not None else 0)
    ok = True
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        ok &= r["passed"]
        print(f"{r['suite']}: max deviation {r['max_deviation']:.3e} "
              f"(tolerance {r['tolerance']:.0e}, {r['n_cases']} cases, {r['seconds']:.2f}s) {status}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON config file")
            p.add_argument("--out-dir", help="override the config's output_dir")
        p.add_argument("--seed", type=int, help="override master_seed")

    p_sim = sub.add_parser("simulate", help="generate a dataset directory")
    common(p_sim)
    p_sim.add_argument("--replicate", type=int, default=0, help="replicate stream index")
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit one method to a simulated dataset")
    common(p_fit)
    p_fit.add_argument("--data", required=True, help="dataset directory from simulate")
    p_fit.add_argument("--method", help="method kind or label (defaults to the config's first)")
    _fit_knobs(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_exp = sub.add_parser("experiment", help="run a Monte Carlo grid")
    common(p_exp)
    p_exp.add_argument("--threads", type=int, help="replicate workers; 0 = auto, default 1")
    _fit_knobs(p_exp)
    p_exp.set_defaults(func=cmd_experiment)

    p_val = sub.add_parser("validate", help="run brute-force oracle suites")
    p_val.add_argument("suite", choices=list(SUITES) + ["all"])
    p_val.add_argument("--seed", type=int, help="suite RNG seed")
    p_val.set_defaults(func=cmd_validate)
    return parser


def _fit_knobs(p) -> None:
    p.add_argument("--max-iter", type=int, help="override method max_iter")
    p.add_argument("--tol", type=float, help="override method rel_tol")
    p.add_argument("--quad-nodes", type=int, help="override quadrature nodes per dimension")
    p.add_argument("--mc-samples", type=int, help="override Monte Carlo draws per sweep")
    p.add_argument("--no-sign-align", action="store_true",
                   help="disable per-subject sign alignment in state-space fits")
    p.add_argument("--with-timing", action="store_true",
                   help="include wall-clock times in outputs (breaks byte determinism)")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
