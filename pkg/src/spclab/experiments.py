"""Configuration-driven rate studies and dominance sweeps."""

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.stats

from . import bounds as bd
from . import index_calc as ic
from . import opspace as ops
from . import posterior_core as pc
from .errors import BalanceError, ConfigError, InvalidInputError, SpcLabError, UnsupportedCaseError

SCHEMA_VERSION = 1
RATE_COLUMNS = ("delta", "alpha_star", "spc", "mc_spc", "mc_se")


# ---------------------------------------------------------------------------
# configuration


def _geometric(spec, name):
    if isinstance(spec, dict):
        try:
            return np.geomspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
        except KeyError as exc:
            raise ConfigError(f"{name} needs start, stop and num (missing {exc})") from exc
    try:
        arr = np.asarray(spec, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a list of numbers") from exc
    if arr.ndim != 1:
        raise ConfigError(f"{name} must be one-dimensional")
    return arr


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Experiment description, usually loaded from JSON.

    ``smoothness`` takes either ``{"sobolev_beta": b}`` (``phi = t^{b/(1+2a)}``)
    or an index-function spec under ``"phi"``; ``"v"`` selects the source
    element (``first``, ``random`` or ``extremal``).
    """

    instance: dict
    smoothness: dict
    delta_grid: np.ndarray
    alpha_policy: object = "balanced"
    alpha_grid: Optional[np.ndarray] = None
    n_mc: int = 0
    seed: int = 0
    output_path: str = "spclab_out"
    drop_largest: bool = True
    u: float = 2.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.delta_grid
        if d.size < 1 or np.any(d <= 0):
            raise ConfigError("delta_grid must hold positive values")
        if np.any(np.diff(d) >= 0):
            raise ConfigError("delta_grid must be strictly decreasing")
        if self.n_mc < 0 or (0 < self.n_mc < 100):
            raise ConfigError("n_mc must be 0 or at least 100")
        if self.alpha_grid is not None and np.any(self.alpha_grid <= 0):
            raise ConfigError("alpha_grid must hold positive values")
        if self.alpha_policy != "balanced" and not (
                isinstance(self.alpha_policy, tuple) and self.alpha_policy[0] == "fixed_grid"):
            raise ConfigError("alpha_policy must be 'balanced' or {'fixed_grid': [...]}")

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        try:
            instance = dict(raw["instance"])
            smoothness = dict(raw["smoothness"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"configuration needs 'instance' and 'smoothness' objects ({exc})") from exc
        policy = raw.get("alpha_policy", "balanced")
        if isinstance(policy, dict):
            if "fixed_grid" not in policy:
                raise ConfigError("alpha_policy object must contain 'fixed_grid'")
            policy = ("fixed_grid", tuple(_geometric(policy["fixed_grid"], "fixed_grid").tolist()))
        delta = _geometric(raw.get("delta_grid", {"start": 1e-1, "stop": 1e-5, "num": 9}), "delta_grid")
        alpha = raw.get("alpha_grid")
        known = {"schema_version", "instance", "smoothness", "delta_grid", "alpha_policy",
                 "alpha_grid", "n_mc", "seed", "output_path", "drop_largest", "u"}
        try:
            return cls(
                instance=instance,
                smoothness=smoothness,
                delta_grid=delta,
                alpha_policy=policy,
                alpha_grid=None if alpha is None else _geometric(alpha, "alpha_grid"),
                n_mc=int(raw.get("n_mc", 0)),
                seed=int(raw.get("seed", 0)),
                output_path=str(raw.get("output_path", "spclab_out")),
                drop_largest=bool(raw.get("drop_largest", True)),
                u=float(raw.get("u", 2.0)),
                extra={k: v for k, v in raw.items() if k not in known},
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed configuration value: {exc}") from exc


def load_config(path):
    if not os.path.isfile(path):
        raise ConfigError(f"configuration file not found: {path}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def build_instance(cfg, seed=None):
    try:
        return ops.instance_from_spec(cfg.instance, seed=seed)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc


def build_phi(cfg, inst):
    sm = cfg.smoothness
    if "sobolev_beta" in sm:
        return ic.sobolev_phi(float(sm["sobolev_beta"]), inst.a, a_max=max(1.0, inst.C0.norm()))
    if "phi" in sm:
        try:
            return ic.from_spec(sm["phi"])
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc
    raise ConfigError("smoothness needs 'sobolev_beta' or 'phi'")


def build_spec(cfg, inst):
    phi = build_phi(cfg, inst)
    choice = cfg.smoothness.get("v", "first")
    v = None if choice == "extremal" else choice
    spec = pc.make_smoothness(inst, phi, v, rng_seed=cfg.seed, u=cfg.u)
    if spec.classification is not None and spec.classification.concavity_checked == "untested":
        spec = pc.SmoothnessSpec(spec.phi, spec.v, spec.x_star, spec.case_tag,
                                 bd.verify_concavity(spec.classification, rng_seed=cfg.seed))
    if spec.case_tag == "high" and inst.lifting is None and inst.kind == "rotated":
        raise ConfigError("the high-order case needs 'lift_u' in the instance spec")
    return spec


def theoretical_exponent(cfg, inst):
    """Rate predicted for the study, or ``None`` when no closed form applies."""
    sm = cfg.smoothness
    if "sobolev_beta" not in sm:
        return None
    beta = float(sm["sobolev_beta"])
    if inst.kind == "heat":
        return -beta
    return 4.0 * beta / (1.0 + 2.0 * beta + 2.0 * inst.p)


# ---------------------------------------------------------------------------
# fitting


def fit_loglog(xs, ys):
    """Least-squares line through ``(log x, log y)``; returns slope, intercept, 2 standard errors."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InvalidInputError("xs and ys must be 1-D arrays of equal length")
    if xs.size < 5:
        raise InvalidInputError("at least 5 points are needed for a rate fit")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise InvalidInputError("log-log fit needs positive data")
    fit = scipy.stats.linregress(np.log(xs), np.log(ys))
    return float(fit.slope), float(fit.intercept), float(2.0 * fit.stderr)


# ---------------------------------------------------------------------------
# rate study


@dataclass(frozen=True, eq=False)
class RateStudyResult:
    rows: list
    fitted_exponent: float
    exponent_ci_halfwidth: float
    theoretical_exponent: Optional[float]
    regressor: str
    failures: list = field(default_factory=list)
    fitted_rows: int = 0

    def summary(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "fitted_exponent": self.fitted_exponent,
            "exponent_ci_halfwidth": self.exponent_ci_halfwidth,
            "theoretical_exponent": self.theoretical_exponent,
            "regressor": self.regressor,
            "n_rows": len(self.rows),
            "n_fitted": self.fitted_rows,
            "failures": self.failures,
        }


def _rate_row(inst, spec, cfg, i, delta):
    if cfg.alpha_policy == "balanced":
        alpha = bd.balance_alpha(inst, spec, delta)
        spc = pc.spc_closed(inst, spec, alpha, delta).spc
    else:
        grid = np.asarray(cfg.alpha_policy[1])
        vals = [pc.spc_closed(inst, spec, al, delta).spc for al in grid]
        k = int(np.argmin(vals))
        alpha, spc = float(grid[k]), float(vals[k])
    row = {"delta": float(delta), "alpha_star": float(alpha), "spc": float(spc),
           "mc_spc": None, "mc_se": None}
    if cfg.n_mc > 0:
        est, se = pc.spc_monte_carlo(inst, spec, alpha, delta, cfg.n_mc, [cfg.seed, i])
        row["mc_spc"], row["mc_se"] = est, se
    return row


def run_rate_study(cfg, workers=1, inst=None):
    """Balanced (or grid-optimal) SPC along the delta grid and its fitted rate."""
    inst = build_instance(cfg) if inst is None else inst
    spec = build_spec(cfg, inst)
    if not spec.classification or not spec.classification.supported:
        raise UnsupportedCaseError(f"rate studies need a supported case, got {spec.case_tag}")
    if cfg.n_mc > 0 and spec.extremal:
        raise ConfigError("Monte Carlo cross-checks need an explicit source element")

    def task(item):
        i, delta = item
        try:
            return _rate_row(inst, spec, cfg, i, delta)
        except BalanceError as exc:
            return {"delta": float(delta), "error": str(exc)}

    items = list(enumerate(cfg.delta_grid))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, items))
    else:
        results = [task(it) for it in items]
    rows = [r for r in results if "error" not in r]
    failures = [r for r in results if "error" in r]
    fit_rows = sorted(rows, key=lambda r: -r["delta"])
    if cfg.drop_largest and len(fit_rows) - 1 >= 7:
        fit_rows = fit_rows[1:]
    deltas = np.array([r["delta"] for r in fit_rows])
    spcs = np.array([r["spc"] for r in fit_rows])
    if inst.theta.family == "exp_power":
        regressor = "loglog_inv_delta"
        xs = np.log(1.0 / deltas)
    else:
        regressor = "log_delta"
        xs = deltas
    slope, _, ci = fit_loglog(xs, spcs)
    return RateStudyResult(rows, slope, ci, theoretical_exponent(cfg, inst), regressor,
                           failures, len(fit_rows))


# ---------------------------------------------------------------------------
# dominance sweep


def run_dominance_sweep(cfg, inst=None, spec=None, link_scale=1.0):
    """Bias, spread and SPC bound reports on the configured (alpha, delta) grid.

    ``link_scale`` multiplies the bound constants; values below one are a
    mutation test of the harness itself.
    """
    inst = build_instance(cfg) if inst is None else inst
    spec = build_spec(cfg, inst) if spec is None else spec
    alphas = cfg.alpha_grid if cfg.alpha_grid is not None else np.geomspace(1e-8, 1.0, 10)
    deltas = cfg.delta_grid
    b_act = np.array([pc.bias(inst, spec, al) for al in alphas])
    b_bnd = link_scale * bd.bias_bound(inst, spec, alphas)
    reports = [bd.BoundReport.build("bias", alphas, b_act, b_bnd)]
    A, D = np.meshgrid(alphas, deltas, indexing="ij")
    spr = np.array([[pc.spread(inst, al, de) for de in deltas] for al in alphas])
    spr_b = np.array([[bd.spread_bound(inst, al, de) for de in deltas] for al in alphas])
    reports.append(bd.BoundReport.build("spread", A, spr, link_scale ** 2 * spr_b, D))
    spc = np.array([[b_act[i] ** 2 + pc.variance(inst, al, de) + spr[i, j]
                     for j, de in enumerate(deltas)] for i, al in enumerate(alphas)])
    spc_b = np.array([[bd.spc_bound(inst, spec, al, de) for de in deltas] for al in alphas])
    reports.append(bd.BoundReport.build("spc", A, spc, link_scale ** 2 * spc_b, D))
    return reports


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_rate_csv(result, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RATE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in sorted(result.rows, key=lambda r: -r["delta"]):
            writer.writerow({k: _fmt(row[k]) for k in RATE_COLUMNS})


def write_json(payload, path):
    payload = dict(payload)
    payload.setdefault("schema_version", SCHEMA_VERSION)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


__all__ = [
    "ExperimentConfig",
    "RateStudyResult",
    "SpcLabError",
    "fit_loglog",
    "load_config",
    "run_dominance_sweep",
    "run_rate_study",
]
