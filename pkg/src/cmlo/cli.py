"""Command-line front end.

Subcommands: verify-bounds (bound campaigns), run (event-triggered or
fixed-interval training), ablate-trigger (both modes over a seed list),
report (cross-run comparison tables). Exit codes: 0 = all checks pass,
1 = scientific failure, 2 = usage/schema failure. The output root comes
from the CMLO_OUT_ROOT environment variable (default ./runs).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from cmlo import bounds, config as cfg, dynamics, engine, envs, monitor, oracles
from cmlo.errors import SchemaError

EXIT_OK = 0
EXIT_SCIENTIFIC = 1
EXIT_USAGE = 2


def out_root() -> Path:
    return Path(os.environ.get("CMLO_OUT_ROOT", "runs"))


def _build_env(env_cfg: dict):
    name = env_cfg["name"]
    if name == "pendulum":
        overrides = {"horizon": env_cfg["horizon"]} if env_cfg["horizon"] else None
        return envs.PendulumEnv(overrides)
    if name == "cartpole":
        overrides = {"horizon": env_cfg["horizon"]} if env_cfg["horizon"] else None
        return envs.CartpoleEnv(overrides)
    if name == "chain":
        mdp = envs.chain_mdp(env_cfg["n_states"], gamma=env_cfg["gamma"])
        return envs.TabularEnv(mdp, horizon=env_cfg["horizon"] or 50)
    if name == "random":
        mdp = envs.random_mdp(
            env_cfg["n_states"], env_cfg["n_actions"], seed=env_cfg["mdp_seed"],
            gamma=env_cfg["gamma"],
        )
        return envs.TabularEnv(mdp, horizon=env_cfg["horizon"] or 50)
    raise SchemaError(f"unknown environment {name!r}")


def _configs_from(parsed: dict):
    oracle_cfg = parsed["oracle"]
    oracle_spec = oracles.OracleSpec(
        kind=oracle_cfg["kind"],
        tolerance=oracle_cfg["tolerance"],
        horizon=oracle_cfg["horizon"],
        population=oracle_cfg["population"],
        elites=oracle_cfg["elites"],
        iterations=oracle_cfg["iterations"],
        replan_stride=oracle_cfg["replan_stride"],
        seed=oracle_cfg["seed"],
    )
    t = parsed["trigger"]
    trigger_config = monitor.TriggerConfig(
        alpha=t["alpha"],
        beta=t["beta"],
        check_frequency=t["check_frequency"],
        t_min=t["t_min"],
        t_max=t["t_max"],
        hull_sample_size=t["hull_sample_size"],
    )
    tr = parsed["train"]
    train_config = dynamics.TrainConfig(
        ensemble_size=tr["ensemble_size"],
        hidden=tr["hidden"],
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        step_size=tr["step_size"],
        max_updates=tr["max_updates"] or None,
        seed=tr["seed"],
    )
    r = parsed["rollout"]
    rollout_config = engine.RolloutConfig(
        length=r["length"],
        per_training=r["per_training"],
        member_sampling=r["member_sampling"],
    )
    return oracle_spec, trigger_config, train_config, rollout_config


def _run_one(parsed: dict, mode: str, interval: int, seed: int) -> engine.RunRecord:
    env = _build_env(parsed["env"])
    oracle_spec, trigger_config, train_config, rollout_config = _configs_from(parsed)
    run_cfg = parsed["run"]
    common = dict(
        exploration_std=run_cfg["exploration_std"],
        exploration_eps=run_cfg["exploration_eps"],
        n_stages=run_cfg["n_stages"],
    )
    if mode == "cmlo":
        return engine.run_cmlo(
            env, oracle_spec, trigger_config, rollout_config, train_config,
            run_cfg["budget"], seed, **common,
        )
    return engine.run_fixed_interval(
        env, oracle_spec, trigger_config, rollout_config, train_config,
        run_cfg["budget"], seed, interval, **common,
    )


def _save_run(record: engine.RunRecord, parsed: dict, run_dir: Path) -> None:
    record.extra.update({"config": parsed, "config_hash": cfg.config_hash(parsed)})
    record.save(run_dir)


def cmd_verify_bounds(parsed: dict) -> int:
    """Bound campaigns: gap/ceiling verification, concentration, interval."""
    c = parsed["campaign"]
    out = out_root() / f"{parsed['experiment']['name']}-bounds-{cfg.config_hash(parsed)}"
    out.mkdir(parents=True, exist_ok=True)

    campaign_cfg = bounds.CampaignConfig(
        n_trials=c["n_trials"],
        n_states=c["n_states"],
        n_actions=c["n_actions"],
        gamma=c["gamma"],
        n_samples=c["n_samples"],
        extra_samples=c["extra_samples"],
        sparsity=c["sparsity"],
        seed=c["seed"],
        kappa_scale=c["kappa_scale"],
    )
    results = bounds.verify_gap_campaign(campaign_cfg)
    bounds.write_campaign_csv(results, out / "gap_campaign.csv")
    conservative_fail = [r.trial for r in results if not r.conservative_ok]
    ceiling_fail = [r.trial for r in results if not r.ceiling_ok]
    paper_fail = [r.trial for r in results if not r.paper_ok]

    probes = bounds.kappa_tightness_probes(
        gamma=c["gamma"], kappa_scale=c["kappa_scale"]
    )
    probe_fail = [p.p for p in probes if not p.ok]

    cells = bounds.concentration_campaign(
        c["concentration_alphabet"],
        tuple(c["concentration_m"]),
        tuple(c["concentration_eps"]),
        c["concentration_draws"],
        seed=c["seed"],
    )
    concentration_fail = [
        (cell.m, cell.eps) for cell in cells if not cell.ok
    ]

    interval_ok = True
    interval_fraction = None
    if c["interval_trials"] > 0:
        trials = bounds.interval_campaign(
            c["interval_trials"],
            n_states=c["interval_states"],
            xi=c["interval_xi"],
            target_eps=c["interval_eps"],
            seed=c["seed"],
        )
        interval_fraction = float(np.mean([t.ok for t in trials]))
        xi = c["interval_xi"]
        slack = 3.0 * math.sqrt(xi * (1.0 - xi) / len(trials))
        interval_ok = interval_fraction >= 1.0 - xi - slack

    summary = {
        "format_version": cfg.FORMAT_VERSION,
        "n_trials": len(results),
        "conservative_failures": conservative_fail,
        "ceiling_failures": ceiling_fail,
        "paper_failures": paper_fail,
        "paper_qualified": sum(r.paper_qualified for r in results),
        "kappa_probe_failures": probe_fail,
        "concentration_failures": concentration_fail,
        "interval_fraction": interval_fraction,
        "interval_ok": interval_ok,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    failed = (
        conservative_fail or ceiling_fail or paper_fail or probe_fail
        or concentration_fail or not interval_ok
    )
    status = "FAIL" if failed else "PASS"
    print(
        f"verify-bounds {status}: {len(results)} trials, "
        f"{len(conservative_fail)} conservative / {len(ceiling_fail)} ceiling / "
        f"{len(paper_fail)} paper failures; outputs in {out}"
    )
    return EXIT_SCIENTIFIC if failed else EXIT_OK


def cmd_run(parsed: dict) -> int:
    name = parsed["experiment"]["name"]
    mode = parsed["run"]["mode"]
    if mode not in ("cmlo", "fixed"):
        raise SchemaError(f"unknown run mode {mode!r}")
    interval = parsed["run"]["interval"]
    label = "cmlo" if mode == "cmlo" else f"fixed-{interval}"
    base = out_root() / f"{name}-{label}-{cfg.config_hash(parsed)}"
    for seed in parsed["experiment"]["seeds"]:
        record = _run_one(parsed, mode, interval, seed)
        run_dir = base / f"seed{seed}"
        _save_run(record, parsed, run_dir)
        print(
            f"{label} seed {seed}: final return {record.final_return():.2f}, "
            f"{record.n_trainings} trainings -> {run_dir}"
        )
    return EXIT_OK


def cmd_ablate_trigger(parsed: dict) -> int:
    """CMLO plus every fixed-interval variant, same seeds, one directory."""
    name = parsed["experiment"]["name"]
    base = out_root() / f"{name}-ablation-{cfg.config_hash(parsed)}"
    for seed in parsed["experiment"]["seeds"]:
        record = _run_one(parsed, "cmlo", 0, seed)
        _save_run(record, parsed, base / "cmlo" / f"seed{seed}")
        print(
            f"cmlo seed {seed}: final return {record.final_return():.2f}, "
            f"{record.n_trainings} trainings"
        )
        for interval in parsed["ablate"]["intervals"]:
            record = _run_one(parsed, "fixed", interval, seed)
            _save_run(record, parsed, base / f"fixed-{interval}" / f"seed{seed}")
            print(
                f"fixed-{interval} seed {seed}: final return "
                f"{record.final_return():.2f}, {record.n_trainings} trainings"
            )
    print(f"ablation outputs in {base}")
    return EXIT_OK


def _aggregate(records: list[engine.RunRecord]):
    finals = [r.final_return() for r in records]
    trainings = [r.n_trainings for r in records]
    return {
        "n_seeds": len(records),
        "final_return_mean": float(np.mean(finals)),
        "final_return_std": float(np.std(finals, ddof=1)) if len(finals) > 1 else 0.0,
        "trainings_mean": float(np.mean(trainings)),
        "trainings_total": int(np.sum(trainings)),
    }


def cmd_report(run_dirs: list[Path], out_dir: Path | None = None) -> int:
    """Comparison tables (CSV) from one or more saved run directories."""
    import csv as _csv

    groups: dict[str, list[engine.RunRecord]] = {}
    for d in run_dirs:
        d = Path(d)
        seed_dirs = sorted(p for p in d.glob("seed*") if p.is_dir()) or [d]
        for sd in seed_dirs:
            record = engine.RunRecord.load(sd)
            groups.setdefault(record.mode, []).append(record)

    out = out_dir or (out_root() / "report")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report_summary.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(
            ["mode", "n_seeds", "final_return_mean", "final_return_std",
             "trainings_mean", "trainings_total"]
        )
        for mode in sorted(groups):
            agg = _aggregate(groups[mode])
            w.writerow(
                [mode, agg["n_seeds"], repr(agg["final_return_mean"]),
                 repr(agg["final_return_std"]), repr(agg["trainings_mean"]),
                 agg["trainings_total"]]
            )
    with open(out / "report_stages.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(
            ["mode", "stage", "coverage_mean", "pred_error_mean", "return_mean",
             "return_std"]
        )
        for mode in sorted(groups):
            records = groups[mode]
            n_stages = max((len(r.stages) for r in records), default=0)
            for stage in range(n_stages):
                cov, err, rets = [], [], []
                for r in records:
                    if stage < len(r.stages):
                        cov.append(r.stages[stage][2])
                        if not math.isnan(r.stages[stage][3]):
                            err.append(r.stages[stage][3])
                        if not math.isnan(r.stages[stage][4]):
                            rets.append(r.stages[stage][4])
                w.writerow(
                    [
                        mode,
                        stage,
                        repr(float(np.mean(cov))) if cov else "",
                        repr(float(np.mean(err))) if err else "",
                        repr(float(np.mean(rets))) if rets else "",
                        repr(float(np.std(rets, ddof=1))) if len(rets) > 1 else "",
                    ]
                )
    print(f"report written to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cmlo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("verify-bounds", "run", "ablate-trigger"):
        p = sub.add_parser(name)
        p.add_argument("config", type=Path)
    rep = sub.add_parser("report")
    rep.add_argument("run_dirs", nargs="+", type=Path)
    rep.add_argument("--out", type=Path, default=None)
    args = parser.parse_args(argv)

    try:
        if args.command == "report":
            return cmd_report(args.run_dirs, args.out)
        parsed = cfg.parse_config(args.config)
        if args.command == "verify-bounds":
            return cmd_verify_bounds(parsed)
        if args.command == "run":
            return cmd_run(parsed)
        return cmd_ablate_trigger(parsed)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
