"""Batch experiment driver.

Subcommands:
  run <config.yaml>                 execute one inference run, persist artifacts
  coverage <config.yaml> --c N      replicate study: empirical coverage + log-density
  diagnose <run_dir>                misspecification report, PPC, kernel discrepancy

Exit codes: 0 success, 1 runtime failure (partial artifacts preserved),
2 invalid configuration. The worker-pool size for `coverage` comes from
--workers or the RSNL_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .core import (
    AdjustmentPrior,
    AdjustmentSettings,
    run_rsnl,
    run_snl,
)
from .diagnostics import (
    empirical_coverage,
    kde_log_density,
    mmd,
    posterior_predictive,
    prior_posterior_distance,
    _kde_log_density_many,
    _silverman_bandwidths,
)
from .exceptions import ConfigError
from .flow import TrainConfig, load_flow, save_flow
from .mcmc import McmcConfig, load_chains_csv
from .simulators import SirConfig, get_simulator, simulator_names, sir_simulate, sir_true_simulate


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

_SCHEMA = {
    "example": (str, True),
    "method": (str, True),
    "seed": (int, True),
    "rounds": (int, False),
    "sims_per_round": (int, False),
    "output_dir": (str, False),
    "observed_seed": (int, False),
    "observed_summary": (list, False),
    "sir_diffusion": (str, False),
    "adjustment": (
        {
            "mode": (str, False),
            "tau": (float, False),
            "fixed_scale": (float, False),
            "floor": (float, False),
        },
        False,
    ),
    "mcmc": (
        {
            "chains": (int, False),
            "iterations": (int, False),
            "burn_in": (int, False),
            "thin": (int, False),
            "target_accept": (float, False),
            "max_tree_depth": (int, False),
        },
        False,
    ),
    "flow": (
        {
            "learning_rate": (float, False),
            "batch_size": (int, False),
            "max_epochs": (int, False),
            "patience": (int, False),
            "validation_fraction": (float, False),
        },
        False,
    ),
    "coverage": (
        {
            "replicates": (int, False),
            "alphas": (list, False),
            "posterior_draws": (int, False),
        },
        False,
    ),
}

_DEFAULTS = {
    "rounds": 10,
    "sims_per_round": 1000,
    "observed_seed": 0,
    "sir_diffusion": "state",
    "adjustment": {"mode": "data_driven", "tau": 0.3, "fixed_scale": 1.0, "floor": 0.01},
    "mcmc": {
        "chains": 4,
        "iterations": 3500,
        "burn_in": 1000,
        "thin": 10,
        "target_accept": 0.8,
        "max_tree_depth": 10,
    },
    "flow": {
        "learning_rate": 5e-4,
        "batch_size": 256,
        "max_epochs": 500,
        "patience": 20,
        "validation_fraction": 0.1,
    },
    "coverage": {"replicates": 200, "alphas": [0.05, 0.1, 0.2], "posterior_draws": 2000},
}


def _type_ok(value, expected):
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, expected)


def _validate_node(node, schema, path, fname):
    """Walk a yaml mapping node against the schema, anchoring errors to lines."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{fname}:{node.start_mark.line + 1}: {path or 'config'} must be a mapping")
    seen = {}
    for key_node, value_node in node.value:
        key = key_node.value
        where = f"{fname}:{key_node.start_mark.line + 1}"
        if key not in schema:
            raise ConfigError(f"{where}: unknown key {path}{key}")
        expected, _ = schema[key]
        if isinstance(expected, dict):
            _validate_node(value_node, expected, f"{path}{key}.", fname)
            seen[key] = True
            continue
        value = yaml.safe_load(yaml.serialize(value_node))
        if not _type_ok(value, expected):
            raise ConfigError(
                f"{where}: {path}{key} must be of type {expected.__name__}, got {value!r}"
            )
        seen[key] = True
    for key, (expected, required) in schema.items():
        if required and key not in seen:
            raise ConfigError(f"{fname}:{node.start_mark.line + 1}: missing required key {path}{key}")


def _merge_defaults(config: dict) -> dict:
    out = dict(config)
    for key, default in _DEFAULTS.items():
        if isinstance(default, dict):
            section = dict(default)
            section.update(out.get(key) or {})
            out[key] = section
        else:
            out.setdefault(key, default)
    return out


def load_config(path) -> dict:
    """Parse and schema-validate a YAML run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path.name}: invalid YAML: {exc}") from exc
    if node is None:
        raise ConfigError(f"{path.name}:1: empty configuration")
    _validate_node(node, _SCHEMA, "", path.name)
    config = _merge_defaults(yaml.safe_load(text))

    if config["method"] not in ("rsnl", "snl"):
        raise ConfigError(f"{path.name}: method must be 'rsnl' or 'snl'")
    if config["example"] not in simulator_names():
        raise ConfigError(
            f"{path.name}: unknown example {config['example']!r}; registered: "
            + ", ".join(simulator_names())
        )
    if config["adjustment"]["mode"] not in ("data_driven", "fixed"):
        raise ConfigError(f"{path.name}: adjustment.mode must be data_driven or fixed")
    if config["sir_diffusion"] not in ("state", "initial"):
        raise ConfigError(f"{path.name}: sir_diffusion must be 'state' or 'initial'")
    for field, low in (("rounds", 1), ("sims_per_round", 20)):
        if config[field] < low:
            raise ConfigError(f"{path.name}: {field} must be >= {low}")
    config["_config_text"] = text
    return config


def _build_spec(config):
    spec = get_simulator(config["example"])
    if config["example"] == "misspecified_sir" and config["sir_diffusion"] != "state":
        cfg = SirConfig(diffusion=config["sir_diffusion"])
        spec.simulate = lambda theta, rng: sir_simulate(theta[0], theta[1], cfg, rng)
        spec.true_dgp = lambda theta, rng: sir_true_simulate(theta[0], theta[1], cfg, rng)
    return spec


def _configs_from(config):
    flow_cfg = TrainConfig(
        lr=config["flow"]["learning_rate"],
        batch=config["flow"]["batch_size"],
        max_epochs=config["flow"]["max_epochs"],
        patience=config["flow"]["patience"],
        validation_fraction=config["flow"]["validation_fraction"],
    )
    mcmc_cfg = McmcConfig(
        chains=config["mcmc"]["chains"],
        iterations=config["mcmc"]["iterations"],
        burn_in=config["mcmc"]["burn_in"],
        thin=config["mcmc"]["thin"],
        target_accept=config["mcmc"]["target_accept"],
        max_tree_depth=config["mcmc"]["max_tree_depth"],
    )
    adj = AdjustmentSettings(
        mode=config["adjustment"]["mode"],
        tau=config["adjustment"]["tau"],
        fixed_scale=config["adjustment"]["fixed_scale"],
        floor=config["adjustment"]["floor"],
    )
    return flow_cfg, mcmc_cfg, adj


def _observed_for(spec, config):
    if config.get("observed_summary") is not None:
        return None, np.asarray(config["observed_summary"], dtype=float)
    return spec.observed(np.random.default_rng(config["observed_seed"]))


def _execute(config, rng):
    spec = _build_spec(config)
    flow_cfg, mcmc_cfg, adj = _configs_from(config)
    observed_raw, observed_summary = _observed_for(spec, config)
    runner = run_rsnl if config["method"] == "rsnl" else run_snl
    art = runner(
        spec.simulate,
        spec.summarize,
        spec.prior,
        observed_raw,
        n_rounds=config["rounds"],
        n_sims_per_round=config["sims_per_round"],
        flow_config=flow_cfg,
        mcmc_config=mcmc_cfg,
        adjustment=adj,
        rng=rng,
        observed_summary=observed_summary,
    )
    return spec, art


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_run_dir(run_dir: Path, config, spec, art, elapsed):
    rounds_dir = run_dir / "rounds"
    rounds_dir.mkdir(parents=True, exist_ok=True)
    art.final_chains.to_csv(run_dir / "chains_final.csv")
    round_reports = []
    for i, rec in enumerate(art.rounds):
        rdir = rounds_dir / f"round_{i:02d}"
        rdir.mkdir(exist_ok=True)
        save_flow(rec.flow, rdir / "flow.npz")
        info = {
            "round": i,
            "summary_mean": rec.stats.mean,
            "summary_std": rec.stats.std,
            "context_mean": rec.stats.context_mean,
            "context_std": rec.stats.context_std,
            "observed_std": rec.observed_std,
            "adjustment_scales": rec.adjustment_scales,
            "train_record": rec.train_record,
            "rhat_max": rec.rhat_max,
            "ess_min": rec.ess_min,
            "divergences": rec.divergences,
            "accept_mean": rec.accept_mean,
        }
        (rdir / "stats.json").write_text(json.dumps(_jsonable(info), indent=1))
        round_reports.append(
            {k: _jsonable(v) for k, v in info.items() if k not in ("summary_mean",)}
        )

    if art.gamma_samples is not None:
        with open(run_dir / "gamma_prior_posterior.csv", "w") as fh:
            fh.write("dim,prior_scale,post_mean,post_std,post_q05,post_q50,post_q95\n")
            for j in range(art.gamma_samples.shape[1]):
                g = art.gamma_samples[:, j]
                q05, q50, q95 = np.quantile(g, [0.05, 0.5, 0.95])
                fh.write(
                    f"{j},{art.final_adjustment.scales[j]!r},{g.mean()!r},"
                    f"{g.std(ddof=1)!r},{q05!r},{q50!r},{q95!r}\n"
                )

    report = {
        "status": "complete",
        "example": config["example"],
        "method": config["method"],
        "seed": config["seed"],
        "rounds": config["rounds"],
        "sims_per_round": config["sims_per_round"],
        "observed_summary": _jsonable(art.observed_summary),
        "n_simulations": art.n_simulations,
        "n_retries": art.n_retries,
        "theta_dim": spec.theta_dim,
        "summary_dim": spec.summary_dim,
        "final_adjustment_scales": _jsonable(
            art.final_adjustment.scales if art.final_adjustment is not None else None
        ),
        "divergences_final": art.final_chains.divergences,
        "warnings": art.warnings,
        "round_records": round_reports,
        "elapsed_seconds": elapsed,
    }
    (run_dir / "report.json").write_text(json.dumps(report, indent=1))


def cmd_run(config_path, output_dir=None) -> int:
    config = load_config(config_path)
    run_dir = Path(output_dir or config.get("output_dir") or
                   f"runs/{config['example']}_{config['method']}_seed{config['seed']}")
    run_dir.mkdir(parents=True, exist_ok=True)
    # snapshot before any compute so a crash leaves a self-describing directory
    (run_dir / "config.yaml").write_text(config["_config_text"])
    t0 = time.time()
    try:
        rng = np.random.default_rng(np.random.SeedSequence(config["seed"]))
        spec, art = _execute(config, rng)
        _write_run_dir(run_dir, config, spec, art, time.time() - t0)
    except Exception as exc:  # preserve partial artifacts, report the failure
        (run_dir / "report.json").write_text(
            json.dumps({"status": "failed", "error": repr(exc)}, indent=1)
        )
        print(f"run failed: {exc!r}", file=sys.stderr)
        return 1
    print(f"run complete: {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# coverage study
# ---------------------------------------------------------------------------


def _coverage_replicate(args):
    config, rep = args
    spec = _build_spec(config)
    obs_rng = np.random.default_rng(np.random.SeedSequence((config["seed"], 1000 + rep)))
    observed_summary = spec.replicate_observed(obs_rng)
    flow_cfg, mcmc_cfg, adj = _configs_from(config)
    runner = run_rsnl if config["method"] == "rsnl" else run_snl
    try:
        art = runner(
            spec.simulate,
            spec.summarize,
            spec.prior,
            None,
            n_rounds=config["rounds"],
            n_sims_per_round=config["sims_per_round"],
            flow_config=flow_cfg,
            mcmc_config=mcmc_cfg,
            adjustment=adj,
            rng=np.random.default_rng(np.random.SeedSequence((config["seed"], rep))),
            observed_summary=observed_summary,
        )
    except Exception as exc:
        return {"replicate": rep, "error": repr(exc)}
    cap = config["coverage"]["posterior_draws"]
    theta = art.theta_samples[-cap:]
    bw = _silverman_bandwidths(theta)
    dens_samples = _kde_log_density_many(theta, theta, bw)
    dens_point = _kde_log_density_many(theta, spec.theta_true[None, :], bw)[0]
    alphas = np.sort(np.asarray(config["coverage"]["alphas"], dtype=float))
    member = dens_point >= np.quantile(dens_samples, alphas)
    return {
        "replicate": rep,
        "alphas": alphas.tolist(),
        "membership": member.tolist(),
        "log_density_at_true": float(dens_point),
    }


def cmd_coverage(config_path, n_replicates=None, workers=None, output_dir=None) -> int:
    config = load_config(config_path)
    c = n_replicates or config["coverage"]["replicates"]
    if c < 10:
        raise ConfigError("need at least 10 coverage replicates")
    workers = workers or int(os.environ.get("RSNL_WORKERS", "1"))
    out_dir = Path(output_dir or config.get("output_dir") or
                   f"runs/coverage_{config['example']}_{config['method']}_seed{config['seed']}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(config["_config_text"])

    jobs = [(config, rep) for rep in range(c)]
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_coverage_replicate, jobs)
    else:
        results = [_coverage_replicate(j) for j in jobs]

    ok = [r for r in results if "error" not in r]
    failed = [r for r in results if "error" in r]
    if not ok:
        print("all coverage replicates failed", file=sys.stderr)
        return 1
    alphas = np.asarray(ok[0]["alphas"])
    membership = np.array([r["membership"] for r in ok])
    coverage = membership.mean(axis=0)

    with open(out_dir / "coverage.csv", "w") as fh:
        fh.write("alpha,credibility,coverage\n")
        for a, cov in zip(alphas, coverage):
            fh.write(f"{a!r},{1 - a!r},{cov!r}\n")
    with open(out_dir / "membership.csv", "w") as fh:
        fh.write("replicate,alpha,contained\n")
        for r in ok:
            for a, m in zip(r["alphas"], r["membership"]):
                fh.write(f"{r['replicate']},{a!r},{int(m)}\n")
    with open(out_dir / "logdensity.csv", "w") as fh:
        fh.write("replicate,log_density_at_true\n")
        for r in ok:
            fh.write(f"{r['replicate']},{r['log_density_at_true']!r}\n")
    (out_dir / "coverage_report.json").write_text(
        json.dumps(
            {
                "replicates_requested": c,
                "replicates_completed": len(ok),
                "failures": [r for r in failed],
                "alphas": alphas.tolist(),
                "coverage": coverage.tolist(),
            },
            indent=1,
        )
    )
    print(f"coverage study complete: {out_dir} ({len(ok)}/{c} replicates)")
    return 0


# ---------------------------------------------------------------------------
# post-hoc diagnosis
# ---------------------------------------------------------------------------


def cmd_diagnose(run_dir, ppc_samples: int = 1000) -> int:
    run_dir = Path(run_dir)
    report_path = run_dir / "report.json"
    chains_path = run_dir / "chains_final.csv"
    for p in (report_path, chains_path, run_dir / "config.yaml"):
        if not p.exists():
            print(f"missing run artifact: {p}", file=sys.stderr)
            return 1
    report = json.loads(report_path.read_text())
    if report.get("status") != "complete":
        print(f"run directory {run_dir} is not a completed run", file=sys.stderr)
        return 1
    config = load_config(run_dir / "config.yaml")
    spec = _build_spec(config)
    draws = load_chains_csv(chains_path)
    flat = draws.reshape(-1, draws.shape[2])
    d_theta = report["theta_dim"]
    theta = flat[:, :d_theta]
    observed_summary = np.asarray(report["observed_summary"], dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence((config["seed"], 777)))

    out = {"example": report["example"], "method": report["method"]}

    if report["method"] == "rsnl":
        gamma = flat[:, d_theta:]
        ap = AdjustmentPrior(np.asarray(report["final_adjustment_scales"], dtype=float))
        mis = prior_posterior_distance(gamma, ap, rng=rng)
        out["ks_distances"] = mis.distances.tolist()
        out["flagged_dims"] = np.nonzero(mis.flags)[0].tolist()
        grid_n = 256
        for j in range(gamma.shape[1]):
            g = gamma[:, j]
            lo = min(g.min(), -4 * ap.scales[j])
            hi = max(g.max(), 4 * ap.scales[j])
            grid = np.linspace(lo, hi, grid_n)
            bw = _silverman_bandwidths(g[:, None])
            post = np.exp(_kde_log_density_many(g[:, None], grid[:, None], bw))
            prior = np.exp(-np.abs(grid) / ap.scales[j]) / (2 * ap.scales[j])
            with open(run_dir / f"gamma_density_{j:02d}.csv", "w") as fh:
                fh.write("value,posterior_density,prior_density\n")
                for v, pd, pr in zip(grid, post, prior):
                    fh.write(f"{v!r},{pd!r},{pr!r}\n")

    n_ppc = min(ppc_samples, theta.shape[0])
    ppc = posterior_predictive(theta, spec, n_ppc, rng)
    np.savetxt(
        run_dir / "ppc_summaries.csv",
        ppc.summaries,
        delimiter=",",
        header=",".join(f"s{i}" for i in range(spec.summary_dim)),
        comments="",
    )
    out["ppc_failures"] = ppc.n_failed
    out["mmd"] = float(mmd(ppc.summaries, observed_summary))
    (run_dir / "diagnostics.json").write_text(json.dumps(_jsonable(out), indent=1))
    print(f"diagnostics written to {run_dir} (mmd={out['mmd']:.5f})")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rsnl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one inference run")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir", default=None)

    p_cov = sub.add_parser("coverage", help="replicate coverage study")
    p_cov.add_argument("config")
    p_cov.add_argument("--c", type=int, default=None, help="number of replicates")
    p_cov.add_argument("--workers", type=int, default=None)
    p_cov.add_argument("--output-dir", default=None)

    p_diag = sub.add_parser("diagnose", help="diagnose a completed run directory")
    p_diag.add_argument("run_dir")
    p_diag.add_argument("--ppc-samples", type=int, default=1000)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.output_dir)
        if args.command == "coverage":
            return cmd_coverage(args.config, args.c, args.workers, args.output_dir)
        return cmd_diagnose(args.run_dir, args.ppc_samples)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
