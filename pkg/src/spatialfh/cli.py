"""``spatialfh`` command line: fit, simulate, loo, validate, diagnose.

Exit codes: 0 success, 1 runtime/numerical failure, 2 usage or validation
error.  ``SPATIALFH_WORKERS`` sets the default number of worker processes.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DataError, Transform, read_data_csv, read_truth_csv, write_data_csv, write_truth_csv
from .diagnostics import ols_diagnostics
from .evaluate import MOE_Z, EvaluationReport, loo_mspe, posterior_mse
from .lattice import MORAN_SEED, LatticeError, read_neighbor_list, serialize_neighbor_list
from .sampler import (DEFAULT_PROPOSAL_SD, MODELS, McmcConfig, ModelSpec, PriorSpec, SamplerError,
                      fit, posterior_summary)
from .simulate import SimulationError, default_protocol, fit_seed, load_protocol, make_dataset, run_sim_study

CONFIG_KEYS = {
    "prior": {"iw_scale", "iw_df", "rho_bounds", "tau_bounds", "eta_sd", "beta_sd"},
    "mcmc": {"iterations", "burn_in", "thin", "seed", "chains", "adapt", "target_accept", "proposal_sds"},
    "transform": {"kind", "pre_scale"},
    "moe_z": None,
}


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    paths: dict = field(default_factory=dict)
    models: list = field(default_factory=list)
    prior: dict = field(default_factory=dict)
    mcmc: dict = field(default_factory=dict)
    transform: dict = field(default_factory=lambda: {"kind": "log", "pre_scale": 100.0})
    moe_z: float = MOE_Z
    out_dir: str = "."
    jobs: int | None = None
    extra: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        """Everything that affects numeric output, with input files by content hash."""
        inputs = {}
        for k, p in sorted(self.paths.items()):
            if p is not None:
                inputs[k] = hashlib.sha256(Path(p).read_bytes()).hexdigest()
        return {"subcommand": self.subcommand, "models": self.models, "prior": self.prior,
                "mcmc": self.mcmc, "transform": self.transform, "moe_z": self.moe_z,
                "inputs": inputs, "extra": self.extra, "version": __version__}

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, default=_json_default)
        return hashlib.sha256(blob.encode()).hexdigest()

    def mcmc_config(self) -> McmcConfig:
        return McmcConfig(**self.mcmc)

    def model_spec(self, kind: str) -> ModelSpec:
        prior = dict(self.prior)
        for k in ("rho_bounds", "tau_bounds"):
            if k in prior:
                prior[k] = tuple(prior[k])
        return ModelSpec(kind, prior=PriorSpec(**prior))

    def transform_obj(self) -> Transform:
        return Transform(**self.transform)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def _emit(msg: str, err: bool = False):
    print(msg, file=sys.stderr if err else sys.stdout, flush=True)


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if path.endswith(".json"):
        cfg = json.loads(text)
    else:
        import yaml

        cfg = yaml.safe_load(text) or {}
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a mapping")
    for k, v in cfg.items():
        if k not in CONFIG_KEYS:
            raise UsageError(f"{path}: unknown config key {k!r}")
        allowed = CONFIG_KEYS[k]
        if allowed is None:
            continue
        if not isinstance(v, dict):
            raise UsageError(f"{path}: {k!r} must be a mapping")
        bad = sorted(set(v) - allowed)
        if bad:
            raise UsageError(f"{path}: unknown keys under {k!r}: {', '.join(bad)}")
        if k == "mcmc" and "proposal_sds" in v:
            bad = sorted(set(v["proposal_sds"]) - set(DEFAULT_PROPOSAL_SD))
            if bad:
                raise UsageError(f"{path}: unknown proposal_sds keys: {', '.join(bad)}")
    return cfg


def _check_paths(paths: dict):
    for p in paths.values():
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(p)


def build_config(args: argparse.Namespace) -> RunConfig:
    paths = {k: getattr(args, k, None) for k in ("neighbors", "data", "truth", "protocol", "config")}
    paths = {k: v for k, v in paths.items() if v is not None}
    _check_paths(paths)
    file_cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
    mcmc = {"iterations": 5000, "burn_in": 1000, "thin": 1, "seed": 2013, "chains": 1}
    mcmc.update(file_cfg.get("mcmc", {}))
    for k in ("iterations", "burn_in", "thin", "seed", "chains"):
        v = getattr(args, k, None)
        if v is not None:
            mcmc[k] = v
    transform = {"kind": "log", "pre_scale": 100.0}
    transform.update(file_cfg.get("transform", {}))
    if getattr(args, "transform", None):
        transform["kind"] = args.transform
    if getattr(args, "pre_scale", None) is not None:
        transform["pre_scale"] = args.pre_scale
    moe_z = file_cfg.get("moe_z", MOE_Z)
    if getattr(args, "moe_z", None) is not None:
        moe_z = args.moe_z
    models = getattr(args, "models", None) or ([args.model] if getattr(args, "model", None) else [])
    models = [m for m in MODELS if m in models] + [m for m in models if m not in MODELS]
    extra = {}
    if getattr(args, "replicate", None) is not None:
        extra["replicate"] = args.replicate
    cfg = RunConfig(subcommand=args.command, paths=paths, models=models,
                    prior=dict(file_cfg.get("prior", {})), mcmc=mcmc, transform=transform,
                    moe_z=float(moe_z), out_dir=getattr(args, "out", "."),
                    jobs=getattr(args, "jobs", None), extra=extra)
    # fail on bad values before any work
    cfg.mcmc_config()
    cfg.transform_obj()
    for m in cfg.models:
        cfg.model_spec(m)
    return cfg


def _data_order(text: str, adj) -> list | None:
    """Lattice indices in the data file's first-appearance order, if it covers the lattice."""
    order, seen = [], set()
    for row in list(csv.reader(io.StringIO(text)))[1:]:
        if row and row[0].strip() not in seen:
            seen.add(row[0].strip())
            order.append(row[0].strip())
    if sorted(order) != sorted(adj.ids):
        return None
    return [adj.index_of(a) for a in order]


def _load_data(cfg: RunConfig):
    adj = read_neighbor_list(cfg.paths["neighbors"])
    text = Path(cfg.paths["data"]).read_text(encoding="utf-8")
    # area order follows the data file, since an edge list cannot fix it
    order = _data_order(text, adj)
    if order is not None:
        adj = adj.permute(order)
    data = read_data_csv(text, adj, cfg.transform_obj(), cfg.moe_z)
    for m in cfg.models:
        if m == "gmcar" and data.m != 2:
            raise UsageError(f"model gmcar needs exactly 2 outcomes; {cfg.paths['data']} has {data.m}")
    return data


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def cmd_fit(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    out = _out(cfg)
    digest = cfg.digest()
    kind = cfg.models[0]
    draws = fit(data, cfg.model_spec(kind), cfg.mcmc_config())
    summ = posterior_summary(draws)
    _write_json(out / "summary.json", {
        "config_digest": digest, "config": cfg.resolved(), "model": kind,
        "scale": cfg.transform_obj().label, "outcomes": data.outcomes, "area_ids": list(data.ids),
        "acceptance": draws.acceptance, "warnings": draws.warnings, "summary": summ,
    })
    (out / "chains.csv").write_text(draws.to_csv(header_comment=f"config_digest={digest}"))
    diag = {k: {"rhat": v["rhat"], "ess": v["ess"]} for k, v in summ.items()
            if not k.startswith(("u[", "theta["))}
    _write_json(out / "diagnostics.json", {"config_digest": digest, "acceptance": draws.acceptance,
                                           "proposal_sds": draws.proposal_sds,
                                           "convergence": diag, "warnings": draws.warnings})
    _emit(f"fit {kind}: {draws.n_chains} chain(s) x {draws.n_draws} draws -> {out}")
    return 0


def cmd_validate(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    truth = read_truth_csv(Path(cfg.paths["truth"]).read_text(encoding="utf-8"), data.adj,
                           data.outcomes, cfg.transform_obj())
    out = _out(cfg)
    digest = cfg.digest()
    mcmc = cfg.mcmc_config()
    r = cfg.extra.get("replicate", 0)
    per_loc = {}
    for kind in cfg.models:
        draws = fit(data, cfg.model_spec(kind), replace(mcmc, seed=fit_seed(mcmc.seed, r, kind)))
        per_loc[kind] = posterior_mse(draws.theta, truth).sq_error
    report = EvaluationReport.build("mse", data.ids, data.outcomes, per_loc,
                                    {"config_digest": digest, "scale": cfg.transform_obj().label})
    (out / "report.json").write_text(report.to_json())
    (out / "per_location.csv").write_text(f"# config_digest={digest}\n" + report.to_long_csv())
    for k, v in report.overall.items():
        _emit(f"{k}: MSE " + " ".join(f"{o}={x:.5g}" for o, x in zip(data.outcomes, v)))
    return 0


def cmd_loo(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    out = _out(cfg)
    digest = cfg.digest()
    mcmc = cfg.mcmc_config()
    per_loc = {}
    for kind in cfg.models:
        res = loo_mspe(data, cfg.model_spec(kind), replace(mcmc, seed=fit_seed(mcmc.seed, 0, kind)),
                       n_jobs=cfg.jobs)
        per_loc[kind] = res.sq_error
    report = EvaluationReport.build("mspe", data.ids, data.outcomes, per_loc,
                                    {"config_digest": digest, "scale": cfg.transform_obj().label})
    (out / "loo_report.json").write_text(report.to_json())
    (out / "loo_per_location.csv").write_text(f"# config_digest={digest}\n" + report.to_long_csv())
    for k, v in report.overall.items():
        _emit(f"{k}: MSPE " + " ".join(f"{o}={x:.5g}" for o, x in zip(data.outcomes, v)))
    return 0


def cmd_diagnose(cfg: RunConfig) -> int:
    data = _load_data(cfg)
    out = _out(cfg)
    perms = cfg.extra.get("permutations", 9999)
    diag = ols_diagnostics(data, permutations=perms, seed=cfg.extra["moran_seed"])
    res = diag.to_dict(data.outcomes)
    res["config_digest"] = cfg.digest()
    res["scale"] = cfg.transform_obj().label
    _write_json(out / "diagnostics.json", res)
    for o, d in res["outcomes"].items():
        _emit(f"outcome {o}: slope p={d['p_values'][-1]:.3g}, Moran I={d['moran_I']:.3f} (p={d['moran_p_value']:.4f})")
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    protocol = load_protocol(cfg.paths["protocol"]) if "protocol" in cfg.paths else default_protocol(
        eta1=cfg.extra.get("eta1", -0.04))
    out = _out(cfg)
    digest = cfg.digest()
    if cfg.extra.get("write_data"):
        (out / "neighbors.txt").write_text(serialize_neighbor_list(protocol.adj))
        for r in range(protocol.replicates):
            rep = make_dataset(protocol, r)
            ds = rep.to_dataset()
            (out / f"data_r{r}.csv").write_text(write_data_csv(ds))
            (out / f"truth_r{r}.csv").write_text(write_truth_csv(rep.theta, ds.ids, ds.outcomes))
    if not cfg.models:
        _emit(f"wrote {protocol.replicates} replicate(s) to {out}")
        return 0
    specs = [cfg.model_spec(k) for k in cfg.models]
    report = run_sim_study(protocol, specs, cfg.mcmc_config(), n_jobs=cfg.jobs)
    d = report.to_dict()
    d["config_digest"] = digest
    _write_json(out / "sim_report.json", d)
    (out / "sim_mse.csv").write_text(f"# config_digest={digest}\n" + report.to_csv())
    for k, v in d["mean_mse"].items():
        _emit(f"{k}: mean MSE " + " ".join(f"{o}={x:.5g}" for o, x in v.items()))
    return 0


COMMANDS = {"fit": cmd_fit, "validate": cmd_validate, "loo": cmd_loo,
            "diagnose": cmd_diagnose, "simulate": cmd_simulate}


def _add_common(p, data=True):
    if data:
        p.add_argument("--neighbors", required=True, help="neighbor-list file (one edge per line)")
        p.add_argument("--data", required=True, help="long-format data CSV")
        p.add_argument("--transform", choices=["log", "none"])
        p.add_argument("--pre-scale", type=float, dest="pre_scale")
        p.add_argument("--moe-z", type=float, dest="moe_z")
    p.add_argument("--config", help="YAML/JSON with prior, mcmc, transform, moe_z sections")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int)


def _add_mcmc(p):
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", type=int, dest="burn_in")
    p.add_argument("--thin", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (default: $SPATIALFH_WORKERS or 1)")


def _models_arg(p, default):
    p.add_argument("--models", type=lambda s: [m.strip() for m in s.split(",") if m.strip()],
                   default=default, help="comma-separated subset of iw,separable,gmcar")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialfh", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model and write summary + chains")
    _add_common(p)
    _add_mcmc(p)
    p.add_argument("--model", choices=MODELS, required=True)

    p = sub.add_parser("validate", help="fit models and score against a truth file")
    _add_common(p)
    _add_mcmc(p)
    p.add_argument("--truth", required=True, help="CSV area_id,outcome,value")
    p.add_argument("--replicate", type=int, default=0,
                   help="replicate index used for seed derivation (matches simulate)")
    _models_arg(p, list(MODELS))

    p = sub.add_parser("loo", help="leave-one-out MSPE")
    _add_common(p)
    _add_mcmc(p)
    _models_arg(p, list(MODELS))

    p = sub.add_parser("diagnose", help="OLS, residual correlation and Moran's I")
    _add_common(p)
    p.add_argument("--permutations", type=int, default=9999)

    p = sub.add_parser("simulate", help="generate replicates and run the simulation study")
    _add_common(p, data=False)
    _add_mcmc(p)
    p.add_argument("--protocol", help="YAML/JSON protocol file (default: shipped 10x12 fixture)")
    p.add_argument("--eta1", type=float, default=-0.04, help="eta1 for the default protocol")
    p.add_argument("--write-data", action="store_true", help="also write data/truth CSVs per replicate")
    _models_arg(p, list(MODELS))
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        for k in getattr(args, "models", None) or []:
            if k not in MODELS:
                raise UsageError(f"unknown model {k!r}; choose from {', '.join(MODELS)}")
        if args.command == "simulate" and getattr(args, "models", None) == [] and not args.write_data:
            raise UsageError("nothing to do: give --models or --write-data")
        cfg = build_config(args)
        if args.command == "diagnose":
            cfg.extra["permutations"] = args.permutations
            cfg.extra["moran_seed"] = MORAN_SEED if args.seed is None else args.seed
        if args.command == "simulate":
            cfg.extra["eta1"] = args.eta1
            cfg.extra["write_data"] = args.write_data
        return COMMANDS[args.command](cfg)
    except FileNotFoundError as err:
        _emit(f"spatialfh: error: file not found: {err.filename or err}", err=True)
        return 2
    except (UsageError, DataError, LatticeError, ValueError, TypeError) as err:
        _emit(f"spatialfh: error: {err}", err=True)
        return 2
    except (SamplerError, SimulationError, np.linalg.LinAlgError, RuntimeError) as err:
        _emit(f"spatialfh: runtime error: {err}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
