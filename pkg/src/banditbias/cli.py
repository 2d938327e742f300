"""Batch experiment driver.

Five subcommands produce plot-ready CSV artifacts from a declarative
config file (TOML or JSON): bias-curves, joint-bias, debias,
analytic-check, scatter. Every command is a pure function of the resolved
config and master seed; re-running overwrites byte-identical files, and
each file starts with a comment row carrying the config hash and seed.

Exit codes: 0 success, 2 config/validation error, 1 runtime error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cmle import CmleConfig
from .core import BERNOULLI, GAUSSIAN, ArmModel, BanditBiasError
from .policies import EPS_GREEDY, PolicyConfig
from .simulate import (
    bernoulli_bias_grid,
    bernoulli_bias_t3_closed_form,
    compare_estimators,
    future_samples_scatter,
    run_campaign,
)

_ESTIMATORS = ("naive", "heldout", "propensity", "cmle")


class ConfigError(Exception):
    """Anything wrong with the declarative config or flag overrides."""


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {where}: {', '.join(unknown)} "
            f"(allowed: {', '.join(sorted(allowed))})"
        )


def _load_config(path: Path) -> dict:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if path.suffix == ".json":
        try:
            return json.loads(raw)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    try:
        import tomllib  # py >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        return tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: invalid TOML: {e}") from e


def _parse_arms(d: dict) -> list[ArmModel]:
    _check_keys(d, {"family", "means", "std"}, "[arms]")
    family = d.get("family", GAUSSIAN)
    means = d.get("means")
    if not isinstance(means, (list, tuple)) or not means:
        raise ConfigError("[arms] means must be a non-empty list")
    if family == BERNOULLI and "std" in d:
        raise ConfigError("[arms] std only applies to the gaussian family")
    std = float(d.get("std", 1.0))
    try:
        return [ArmModel(family, float(m), std) for m in means]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[arms]: {e}") from e


def _parse_policy(d: dict, where: str = "[policy]") -> PolicyConfig:
    allowed = {
        "kind", "epsilon", "beta", "ucb_eps", "delta", "alpha",
        "prior_mean", "prior_var", "gumbel_tau",
    }
    _check_keys(d, allowed, where)
    if "kind" not in d:
        raise ConfigError(f"{where} needs a kind")
    try:
        return PolicyConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _parse_cmle(d: dict) -> CmleConfig:
    allowed = {
        "eta", "n_gd_iters", "mcmc_steps_per_iter", "burn_in_frac",
        "r_samples", "proposal", "divergence_bound",
    }
    _check_keys(d, allowed, "[cmle]")
    try:
        return CmleConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[cmle]: {e}") from e


@dataclass
class GridSpec:
    T: int = 3
    n: int = 41
    lo: float = 0.0
    hi: float = 1.0

    def values(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)


@dataclass
class ExperimentSpec:
    """Resolved, validated configuration for one command invocation."""

    arms: list[ArmModel] = field(default_factory=list)
    policies: list[PolicyConfig] = field(default_factory=list)
    T: int = 0
    n_trials: int = 0
    master_seed: int = 0
    checkpoints: list[int] | None = None
    estimators: list[str] = field(default_factory=lambda: list(_ESTIMATORS))
    cmle: CmleConfig = field(default_factory=CmleConfig)
    t_snapshot: int | None = None
    scatter_arm: int = 0
    workers: int = 1
    grid: GridSpec = field(default_factory=GridSpec)

    def resolved(self) -> dict:
        """Canonical dict for hashing. Excludes workers: the worker count
        must never change any output byte."""
        return {
            "schema": 1,
            "arms": [a.to_dict() for a in self.arms],
            "policies": [p.to_dict() for p in self.policies],
            "run": {
                "T": self.T,
                "n_trials": self.n_trials,
                "master_seed": self.master_seed,
                "checkpoints": self.checkpoints,
                "estimators": self.estimators,
                "t_snapshot": self.t_snapshot,
                "arm": self.scatter_arm,
            },
            "cmle": self.cmle.to_dict(),
            "grid": {
                "T": self.grid.T, "n": self.grid.n,
                "lo": self.grid.lo, "hi": self.grid.hi,
            },
        }

    def sha256(self) -> str:
        canon = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def build_spec(config: dict, args: argparse.Namespace, command: str) -> ExperimentSpec:
    _check_keys(config, {"arms", "policy", "policies", "run", "cmle", "grid"}, "config")
    if "policy" in config and "policies" in config:
        raise ConfigError("give either [policy] or [[policies]], not both")

    spec = ExperimentSpec()
    if "arms" in config:
        spec.arms = _parse_arms(config["arms"])
    if "policy" in config:
        spec.policies = [_parse_policy(config["policy"])]
    for i, p in enumerate(config.get("policies", [])):
        spec.policies.append(_parse_policy(p, f"[[policies]] #{i}"))
    if "cmle" in config:
        spec.cmle = _parse_cmle(config["cmle"])
    if "grid" in config:
        g = config["grid"]
        _check_keys(g, {"T", "n", "lo", "hi"}, "[grid]")
        try:
            spec.grid = GridSpec(
                int(g.get("T", 3)), int(g.get("n", 41)),
                float(g.get("lo", 0.0)), float(g.get("hi", 1.0)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[grid]: {e}") from e
        if spec.grid.n < 1 or not 0.0 <= spec.grid.lo <= spec.grid.hi <= 1.0:
            raise ConfigError("[grid] needs n >= 1 and 0 <= lo <= hi <= 1")

    run = config.get("run", {})
    _check_keys(
        run,
        {"T", "n_trials", "master_seed", "checkpoints", "estimators",
         "t_snapshot", "arm", "workers"},
        "[run]",
    )
    spec.T = int(run.get("T", 0))
    spec.n_trials = int(run.get("n_trials", 0))
    spec.master_seed = int(run.get("master_seed", 0))
    if "checkpoints" in run:
        spec.checkpoints = [int(t) for t in run["checkpoints"]]
    if "estimators" in run:
        spec.estimators = [str(m) for m in run["estimators"]]
    if "t_snapshot" in run:
        spec.t_snapshot = int(run["t_snapshot"])
    spec.scatter_arm = int(run.get("arm", 0))
    spec.workers = int(run.get("workers", 1))

    # flag overrides
    if args.seed is not None:
        spec.master_seed = args.seed
    if args.trials is not None:
        spec.n_trials = args.trials
    if args.threads is not None:
        spec.workers = args.threads
    if spec.workers < 1:
        raise ConfigError("--threads must be >= 1")

    if command == "analytic-check":
        return spec

    # the remaining commands all simulate
    if not spec.arms:
        raise ConfigError("config needs an [arms] table")
    if not spec.policies:
        raise ConfigError("config needs a [policy] table or [[policies]] list")
    K = len(spec.arms)
    if spec.T < K:
        raise ConfigError(f"[run] T must be >= K = {K}")
    if spec.n_trials < 1:
        raise ConfigError("[run] n_trials must be >= 1")
    if spec.checkpoints is not None:
        bad = [t for t in spec.checkpoints if not K <= t <= spec.T]
        if bad:
            raise ConfigError(f"checkpoints outside [K, T]: {bad}")

    if command == "debias":
        unknown = sorted(set(spec.estimators) - set(_ESTIMATORS))
        if unknown:
            raise ConfigError(f"unknown estimator(s): {', '.join(unknown)}")
        if not spec.estimators:
            raise ConfigError("[run] estimators must be non-empty")
        for pol in spec.policies:
            if "cmle" in spec.estimators:
                if not pol.randomized:
                    raise ConfigError(
                        f"cmle needs a Gumbel-randomized policy; {pol.label()} is hard"
                    )
                if any(a.family != GAUSSIAN for a in spec.arms):
                    raise ConfigError("cmle needs gaussian arms")
            if "propensity" in spec.estimators and not (
                pol.randomized or pol.kind == EPS_GREEDY
            ):
                raise ConfigError(
                    f"propensity needs randomized selection; {pol.label()} "
                    "puts zero mass on losing arms"
                )
    if command == "scatter":
        if len(spec.policies) != 1:
            raise ConfigError("scatter runs a single policy")
        if spec.t_snapshot is None:
            raise ConfigError("[run] t_snapshot is required for scatter")
        if not K <= spec.t_snapshot < spec.T:
            raise ConfigError("[run] t_snapshot must lie in [K, T)")
        if not 0 <= spec.scatter_arm < K:
            raise ConfigError("[run] arm out of range")
    return spec


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, spec: ExperimentSpec, header: tuple, rows) -> None:
    lines = [
        f"# banditbias schema=1 spec_sha256={spec.sha256()} master_seed={spec.master_seed}",
        ",".join(header),
    ]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}")


def cmd_bias_curves(spec: ExperimentSpec, out_dir: Path) -> int:
    K = len(spec.arms)
    cps = spec.checkpoints or list(range(K, spec.T + 1))
    rows = []
    for pol in spec.policies:
        rep = run_campaign(
            spec.arms, pol, spec.T, spec.n_trials, spec.master_seed,
            checkpoints=cps, workers=spec.workers,
        )
        for ci, t in enumerate(rep.checkpoints):
            for k in range(K):
                rows.append((pol.label(), t, k, rep.bias[ci, k], rep.bias_se[ci, k]))
    _write_csv(out_dir / "bias_curves.csv", spec, ("policy", "round", "arm", "bias", "se"), rows)
    return 0


def cmd_joint_bias(spec: ExperimentSpec, out_dir: Path) -> int:
    K = len(spec.arms)
    rows = []
    text = []
    head = "policy".ljust(28) + "".join(f"m={m}".rjust(9) for m in range(K + 1))
    text.append(head)
    for pol in spec.policies:
        rep = run_campaign(
            spec.arms, pol, spec.T, spec.n_trials, spec.master_seed,
            workers=spec.workers,
        )
        freq = rep.joint_freq[-1]
        for m in range(K + 1):
            rows.append((pol.label(), m, freq[m]))
        text.append(pol.label().ljust(28) + "".join(f"{f:9.4f}" for f in freq))
    _write_csv(out_dir / "joint_bias.csv", spec, ("policy", "m", "fraction"), rows)
    print("\n".join(text))
    return 0


def cmd_debias(spec: ExperimentSpec, out_dir: Path) -> int:
    K = len(spec.arms)
    rows = []
    text = [
        "policy".ljust(28) + "method".ljust(12)
        + "pooled|bias|".rjust(14) + "pooled MSE".rjust(14)
    ]
    for pol in spec.policies:
        comp = compare_estimators(
            spec.arms, pol, spec.T, spec.n_trials, methods=spec.estimators,
            master_seed=spec.master_seed, cmle_config=spec.cmle,
            workers=spec.workers,
        )
        for m in spec.estimators:
            st = comp.methods[m]
            for k in range(K):
                rows.append((pol.label(), m, k, st.bias[k], st.bias_se[k], st.mse[k]))
            text.append(
                pol.label().ljust(28) + m.ljust(12)
                + f"{st.pooled_abs_bias:14.5f}" + f"{st.pooled_mse:14.5f}"
            )
    _write_csv(
        out_dir / "debias.csv", spec,
        ("policy", "method", "arm", "bias", "se", "mse"), rows,
    )
    print("\n".join(text))
    return 0


def cmd_analytic_check(spec: ExperimentSpec, out_dir: Path) -> int:
    g = spec.grid.values()
    b0, b1 = bernoulli_bias_grid(g, g, spec.grid.T)
    rows = []
    for i, m0 in enumerate(g):
        for j, m1 in enumerate(g):
            rows.append((m0, m1, b0[i, j], b1[i, j]))
    _write_csv(out_dir / "heatmap.csv", spec, ("mu0", "mu1", "bias0", "bias1"), rows)
    interior = (g > 0.0) & (g < 1.0)
    if interior.any():
        box = np.ix_(interior, interior)
        worst = max(b0[box].max(), b1[box].max())
        print(f"max bias on the open square: {worst:.3e} (negative bias everywhere)")
    if spec.grid.T == 3:
        c0, c1 = bernoulli_bias_t3_closed_form(g, g)
        resid = max(np.abs(b0 - c0).max(), np.abs(b1 - c1).max())
        print(f"max |enumeration - closed form| at T=3: {resid:.3e}")
    return 0


def cmd_scatter(spec: ExperimentSpec, out_dir: Path) -> int:
    pts = future_samples_scatter(
        spec.arms, spec.policies[0], spec.T, spec.t_snapshot, spec.n_trials,
        master_seed=spec.master_seed, arm=spec.scatter_arm, workers=spec.workers,
    )
    rows = [(i, pts[i, 0], int(pts[i, 1])) for i in range(len(pts))]
    _write_csv(
        out_dir / "scatter.csv", spec,
        ("trial", "bias_at_snapshot", "future_draws"), rows,
    )
    return 0


_COMMANDS = {
    "bias-curves": (cmd_bias_curves, True),
    "joint-bias": (cmd_joint_bias, True),
    "debias": (cmd_debias, True),
    "analytic-check": (cmd_analytic_check, False),
    "scatter": (cmd_scatter, True),
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="banditbias",
        description="Bias of adaptively collected sample means: simulation, "
        "exact enumeration, and debiasing estimator campaigns.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "bias-curves": "per-round per-arm bias curves for each policy",
        "joint-bias": "fraction of trials with m simultaneously low-biased arms",
        "debias": "bias/MSE comparison of naive, held-out, propensity, cmle",
        "analytic-check": "exact two-armed Bernoulli bias heatmap (and T=3 closed form)",
        "scatter": "per-trial (snapshot bias, future draws) cloud",
    }
    for name in _COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="TOML or JSON experiment config")
        p.add_argument("--seed", type=int, help="override [run] master_seed")
        p.add_argument("--trials", type=int, help="override [run] n_trials")
        p.add_argument("--threads", type=int, help="worker processes (output-invariant)")
        p.add_argument("--out-dir", type=Path, default=Path("."), help="artifact directory")
    args = parser.parse_args(argv)
    fn, needs_config = _COMMANDS[args.command]
    try:
        if args.config is None:
            if needs_config:
                raise ConfigError(f"{args.command} requires --config")
            config = {}
        else:
            config = _load_config(args.config)
        spec = build_spec(config, args, args.command)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        out_dir = args.out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        return fn(spec, out_dir)
    except BanditBiasError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
