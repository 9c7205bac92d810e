"""Command-line entry point: ``fracouple <subcommand> --config FILE``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import coupling_engine as ce
from . import experiments as ex
from . import fractional_kernels as fk
from .sde_models import contraction_estimate, get_model, integrate

log = logging.getLogger("fracouple")

ERROR_PREFIX = "fracouple:error:"
WORKERS_ENV = "FRACOUPLE_WORKERS"
REQUIRED = ("model", "H", "theta", "alpha", "K", "c3", "beta", "varsigma", "dt", "T_hist",
            "n_replicas", "t_max", "seed")
COUPLING_KEYS = {f.name for f in dataclasses.fields(ce.CouplingConfig)}
EXPERIMENT_KEYS = {"workers", "x1", "x2", "past", "model_kwargs", "n_contraction_paths", "n_ck_runs",
                   "n_t_nodes", "fit_window", "rate_eps", "confidence"}
CONSTANT_KEYS = ("rho_hat", "C_K", "kappa1", "kappa2", "Kbar", "local_radius")


class ConfigError(ValueError):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_config_path() -> Path:
    return Path(str(resources.files("fracouple") / "data" / "default.yaml"))


# ---------------------------------------------------------------- config

def _coerce_overrides(pairs) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"override must be key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def parse_config(path, overrides: dict | None = None) -> tuple[ex.ExperimentConfig, dict]:
    """Read a YAML config, fill defaults and validate.

    Returns the experiment config and the resolved key/value mapping (defaults
    included) for the manifest.  Constants named by a ``constants`` entry are
    loaded only when the stored digest matches the file.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    nested = raw.pop("coupling", {}) or {}
    raw.update(overrides or {})
    for k in REQUIRED:
        if k not in raw:
            raise ConfigError(f"missing required key: {k}")
    known = set(REQUIRED) | COUPLING_KEYS | EXPERIMENT_KEYS | {"constants"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    ckw = {k: raw[k] for k in COUPLING_KEYS if k in raw}
    ckw.update(nested)
    bad = sorted(set(nested) - COUPLING_KEYS)
    if bad:
        raise ConfigError(f"unknown coupling keys: {', '.join(bad)}")
    const = raw.get("constants")
    if const:
        cpath = Path(const["path"] if isinstance(const, dict) else const)
        if not cpath.is_absolute():
            cpath = path.parent / cpath
        if not cpath.is_file():
            raise ConfigError(f"constants file not found: {cpath}")
        if isinstance(const, dict) and const.get("digest") and const["digest"] != sha256_file(cpath):
            raise ConfigError(f"constants file digest mismatch: {cpath}")
        cvals = json.loads(cpath.read_text())
        for k in CONSTANT_KEYS:
            if cvals.get(k) is not None and k not in ckw:
                ckw[k] = cvals[k]
    for k in ("H", "theta", "alpha", "K", "c3", "beta", "varsigma", "dt", "T_hist"):
        ckw[k] = float(ckw[k])
    if "local_radius" in ckw and ckw["local_radius"] in ("inf", float("inf")):
        ckw["local_radius"] = math.inf
    try:
        cc = ce.CouplingConfig(**ckw)
        ekw = {k: raw[k] for k in EXPERIMENT_KEYS if k in raw}
        for k in ("x1", "x2", "fit_window"):
            if k in ekw:
                ekw[k] = tuple(float(v) for v in np.atleast_1d(ekw[k]))
        env = os.environ.get(WORKERS_ENV)
        if env:
            ekw["workers"] = int(env)
        cfg = ex.ExperimentConfig(model=str(raw["model"]), coupling=cc, n_replicas=int(raw["n_replicas"]),
                                  t_max=float(raw["t_max"]), seed=int(raw["seed"]), **ekw)
        get_model(cfg.model, **cfg.model_kwargs)
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(str(e)) from None
    resolved = {"model": cfg.model, "n_replicas": cfg.n_replicas, "t_max": cfg.t_max, "seed": cfg.seed,
                "workers": cfg.workers, "x1": list(cfg.x1), "x2": list(cfg.x2), "past": cfg.past,
                "fit_window": list(cfg.fit_window), "rate_eps": cfg.rate_eps,
                "coupling": {k: (v if not (isinstance(v, float) and math.isinf(v)) else "inf")
                             for k, v in dataclasses.asdict(cc).items()},
                "ell_max": cc.ell_max}
    return cfg, resolved


# -------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    config_digest: str
    version: str
    seed: int
    start_time: float
    end_time: float = 0.0
    outputs: list = field(default_factory=list)
    config_path: str = ""
    resolved: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str))

    @classmethod
    def load(cls, path) -> "RunManifest":
        """Load and verify that the referenced config still has the stored digest."""
        m = cls(**json.loads(Path(path).read_text()))
        if m.config_path and Path(m.config_path).is_file() and sha256_file(m.config_path) != m.config_digest:
            raise ValueError(f"config digest mismatch for {m.config_path}")
        return m


def _manifest(args, cfg) -> RunManifest:
    return RunManifest(sha256_file(args.config), __version__, cfg.seed, time.time(),
                       config_path=str(Path(args.config).resolve()))


def _finish(m: RunManifest, out: Path, resolved: dict) -> None:
    m.end_time = time.time()
    m.resolved = resolved
    m.write(str(out) + ".manifest.json")


# ------------------------------------------------------------- commands

def cmd_fbm(args, cfg, resolved) -> int:
    cc = cfg.coupling
    n = int(round(args.horizon / cc.dt))
    grid = fk.UniformGrid(0.0, cc.dt, n)
    d = get_model(cfg.model, **cfg.model_kwargs).d
    fb = fk.sample_fgn(cc.kernel(), grid, d, ex.replica_rng(cfg.seed, args.replica))
    m = _manifest(args, cfg)
    fk.write_noise_csv(args.out, grid, fb.increments)
    m.outputs.append(str(args.out))
    _finish(m, args.out, resolved)
    return 0


def cmd_integrate(args, cfg, resolved) -> int:
    cc = cfg.coupling
    model = get_model(cfg.model, **cfg.model_kwargs)
    n = int(round(args.horizon / cc.dt))
    grid = fk.UniformGrid(0.0, cc.dt, n)
    fb = fk.sample_fgn(cc.kernel(), grid, model.d, ex.replica_rng(cfg.seed, args.replica))
    tr = integrate(model, np.asarray(cfg.x1, float), fb)
    m = _manifest(args, cfg)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{j + 1}" for j in range(model.d)])
        for i, row in enumerate(tr.states):
            w.writerow([repr(grid.node(i))] + [repr(float(v)) for v in row])
    m.outputs.append(str(args.out))
    _finish(m, args.out, resolved)
    return 0


def cmd_couple(args, cfg, resolved) -> int:
    m = _manifest(args, cfg)
    ctx = ex.prepare_context(cfg)
    rng = ex.replica_rng(cfg.seed, args.replica)
    out = ce.run_coupling(ctx, np.asarray(cfg.x1, float), np.asarray(cfg.x2, float), cfg.t_max, rng,
                          past="zero" if cfg.past == "zero" else None)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ce.TRIAL_LOG_HEADER)
        w.writeheader()
        for row in ce.trial_log_rows(out.records):
            w.writerow(row)
    print(f"tau_inf={out.tau_inf!r} censored={out.censored} trials={len(out.records)}")
    m.outputs.append(str(args.out))
    _finish(m, args.out, resolved)
    return 0


def cmd_tail(args, cfg, resolved) -> int:
    m = _manifest(args, cfg)
    tail = ex.estimate_coupling_tail(cfg)
    ex.write_survival_csv(args.out, tail)
    rf = ex.rate_fit(tail, cfg.rate_eps)
    print(f"coupled={tail.n_replicas - tail.n_censored}/{tail.n_replicas} slope={tail.slope!r} "
          f"ci=({tail.slope_ci[0]!r},{tail.slope_ci[1]!r}) consistent={rf.consistent}")
    m.outputs.append(str(args.out))
    _finish(m, args.out, resolved)
    return 0


def cmd_validate(args, cfg, resolved) -> int:
    m = _manifest(args, cfg)
    items = ex.validate_suite(cfg.model, cfg.coupling.H, cfg.seed, quick=not args.full)
    text = ex.format_report(items)
    Path(args.out).write_text(text)
    sys.stdout.write(text)
    m.outputs.append(str(args.out))
    _finish(m, args.out, resolved)
    return 0 if all(c.status == "pass" for c in items) else 2


def cmd_calibrate(args, cfg, resolved) -> int:
    m = _manifest(args, cfg)
    cc = cfg.coupling
    model = get_model(cfg.model, **cfg.model_kwargs)
    rep = contraction_estimate(model, cc.kernel(), cfg.n_contraction_paths, ex.calibration_rng(cfg.seed, 1))
    cc2 = dataclasses.replace(cc, rho_hat=rep.rho_hat, C_K=None, c2=None)
    ctx = ce.build_context(model, cc2, ex.calibration_rng(cfg.seed, 2))
    C_K = ce.measure_CK(ctx, cfg.n_ck_runs, ex.calibration_rng(cfg.seed, 3), apply=True)
    a = ctx.config.local_radius
    consts = {
        "version": __version__, "H": cc.H, "alpha_H": fk.alpha_h(cc.H),
        "alpha_H_quadrature": fk.calibrate_alpha_h(cc.H), "inversion_C": fk.inversion_constant(cc.H),
        "rho_hat": rep.rho_hat, "C_hat": rep.C_hat, "C_K_measured": C_K, "C_K": ctx.config.C_K,
        "c2": ctx.config.c2, "kappa1": ctx.kappa1, "kappa2": ctx.kappa2, "Kbar": ctx.Kbar,
        "local_radius": "inf" if math.isinf(a) else a, "c3_floor": ctx.config.c3_floor(),
        "config_digest": sha256_file(args.config),
    }
    Path(args.out).write_text(json.dumps(consts, indent=2, sort_keys=True))
    print(f"constants digest {sha256_file(args.out)}")
    m.outputs.append(str(args.out))
    _finish(m, args.out, resolved)
    return 0


COMMANDS = {"fbm": cmd_fbm, "integrate": cmd_integrate, "couple": cmd_couple, "tail": cmd_tail,
            "validate": cmd_validate, "calibrate": cmd_calibrate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fracouple", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", default=str(default_config_path()))
        s.add_argument("--out", required=True, type=Path)
        s.add_argument("--set", action="append", dest="overrides", metavar="KEY=VALUE",
                       help="override a config key")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("fbm", "integrate"):
            s.add_argument("--horizon", type=float, default=1.0)
        if name in ("fbm", "integrate", "couple"):
            s.add_argument("--replica", type=int, default=0)
        if name == "validate":
            s.add_argument("--full", action="store_true", help="full-size sample counts")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, resolved = parse_config(args.config, _coerce_overrides(args.overrides))
        return COMMANDS[args.command](args, cfg, resolved)
    except ConfigError as e:
        print(f"{ERROR_PREFIX}config: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # every failure leaves the process with a stable prefix
        print(f"{ERROR_PREFIX}{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
