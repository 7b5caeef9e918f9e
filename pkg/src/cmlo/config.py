"""Experiment configuration: an INI document, strictly schema-checked.

One file per experiment (key-value pairs grouped in sections) so runs
are archivable and hashable; unknown sections or keys are rejected, as
are type errors. All randomness downstream flows from the seeds given
here.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from cmlo.errors import SchemaError

FORMAT_VERSION = 1


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _str(v):
    return str(v)


def _bool(v):
    lowered = v.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v):
    return [int(x) for x in v.split()]


def _float_list(v):
    return [float(x) for x in v.split()]


# section -> key -> (parser, default); None default means required.
SCHEMA = {
    "experiment": {
        "format_version": (_int, None),
        "name": (_str, "experiment"),
        "seeds": (_int_list, [0]),
    },
    "campaign": {
        "n_trials": (_int, 1000),
        "n_states": (_int, 8),
        "n_actions": (_int, 3),
        "gamma": (_float, 0.9),
        "n_samples": (_int, 40),
        "extra_samples": (_int, 40),
        "sparsity": (_float, 1.0),
        "seed": (_int, 0),
        "kappa_scale": (_float, 1.0),
        "concentration_alphabet": (_int, 4),
        "concentration_m": (_int_list, [50, 100, 200]),
        "concentration_eps": (_float_list, [0.2, 0.3]),
        "concentration_draws": (_int, 100_000),
        "interval_trials": (_int, 100),
        "interval_xi": (_float, 0.1),
        "interval_eps": (_float, 0.5),
        "interval_states": (_int, 4),
    },
    "env": {
        "name": (_str, "pendulum"),
        "horizon": (_int, 0),  # 0 = environment default
        "n_states": (_int, 6),
        "n_actions": (_int, 2),
        "gamma": (_float, 0.9),
        "mdp_seed": (_int, 0),
    },
    "oracle": {
        "kind": (_str, "cem_mpc"),
        "tolerance": (_float, 1e-10),
        "horizon": (_int, 15),
        "population": (_int, 200),
        "elites": (_int, 20),
        "iterations": (_int, 5),
        "replan_stride": (_int, 1),
        "seed": (_int, 0),
    },
    "trigger": {
        "alpha": (_float, 2.0),
        "beta": (_float, 1.0),
        "check_frequency": (_int, 25),
        "t_min": (_int, 125),
        "t_max": (_int, 500),
        "hull_sample_size": (_int, 1000),
    },
    "train": {
        "ensemble_size": (_int, 5),
        "hidden": (_int, 64),
        "epochs": (_int, 40),
        "batch_size": (_int, 128),
        "step_size": (_float, 1e-3),
        "max_updates": (_int, 0),  # 0 = uncapped
        "seed": (_int, 0),
    },
    "rollout": {
        "length": (_int, 1),
        "per_training": (_int, 64),
        "member_sampling": (_bool, False),
    },
    "run": {
        "mode": (_str, "cmlo"),
        "interval": (_int, 250),
        "budget": (_int, 20000),
        "exploration_std": (_float, 0.1),
        "exploration_eps": (_float, 0.1),
        "n_stages": (_int, 4),
    },
    "ablate": {
        "intervals": (_int_list, [125, 250, 500]),
    },
}


def parse_config(path: Path | str) -> dict:
    """Parse and validate; returns {section: {key: value}} with defaults filled."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise SchemaError(f"config parse error: {exc}") from exc

    for section in parser.sections():
        if section not in SCHEMA:
            raise SchemaError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise SchemaError(f"unknown key {key!r} in section [{section}]")

    config: dict = {}
    for section, keys in SCHEMA.items():
        config[section] = {}
        for key, (parse, default) in keys.items():
            if parser.has_option(section, key):
                try:
                    config[section][key] = parse(parser.get(section, key))
                except ValueError as exc:
                    raise SchemaError(
                        f"bad value for {key!r} in [{section}]: {exc}"
                    ) from exc
            elif default is None:
                raise SchemaError(f"missing required key {key!r} in [{section}]")
            else:
                config[section][key] = default

    if config["experiment"]["format_version"] != FORMAT_VERSION:
        raise SchemaError(
            f"unsupported format_version {config['experiment']['format_version']}"
        )
    return config


def config_hash(config: dict) -> str:
    """Content hash of the parsed config (first 12 hex chars of sha256)."""
    canon = json.dumps(config, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
