"""Command-line entry point.

Every subcommand reads an optional ``--config`` file of ``key = value`` lines
whose keys are the :class:`ExperimentConfig` field names; flags given on the
command line override the file. Results go to CSV under ``--out`` with the
config hash and seed on every row.

Exit codes: 0 success, 2 infeasible constraints, 1 any other error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .detector import decide
from .fixtures import ConfigError, load_fixture, parse_kv_file
from .linalg import SolverError, StabilityError
from .montecarlo import (
    BASELINES,
    EstimationError,
    McConfig,
    compare_baselines,
    estimate_add_far_anw,
    estimate_overshoot_stats,
    result_rows,
    write_results_csv,
)
from .plant import WatermarkConfig, run_closed_loop
from .policy import (
    InfeasibleError,
    PolicyStructureError,
    build_transition_sampler,
    lagrange_grid_search,
    load_policy,
    make_grid,
    save_policy,
    solve_policy,
    transition_matrices,
    watermark_digest,
)
from .theory import (
    kld_post_pre,
    lqg_intermediates,
    optimize_watermark,
    theoretical_add,
    theoretical_far,
    threshold_transform,
)

COMMANDS = ("solve-policy", "simulate", "mc-eval", "theory-eval", "optimize-watermark", "compare", "sweep")
SWEEP_VARS = ("sigma_e", "th_d", "th_s", "lambda_e", "lambda_f", "budget")
EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2


@dataclass
class ExperimentConfig:
    fixture: str = "system-a"
    sigma_e: float = 1.19  # equal-power diagonal watermark variance
    lambda_e: float = 0.2
    lambda_f: float = 100.0
    lambda_e_grid: Optional[list] = None
    lambda_f_grid: Optional[list] = None
    far_th: Optional[float] = None
    anw_th: Optional[float] = None
    th_s: Optional[float] = None
    th_d: Optional[float] = None
    trials: int = 10_000
    batch_size: int = 2_000
    horizon: Optional[int] = None
    attack_time: Optional[int] = None
    seed: int = 0
    samples: int = 2_000
    grid_size: int = 501
    baseline: str = "PW-Sigma_e"
    budget: Optional[float] = None
    anw: Optional[float] = None
    overshoot: bool = False
    sweep_var: str = "sigma_e"
    sweep_values: Optional[list] = None
    out: str = "results"
    policy_cache: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer", key="seed")
        for key in ("lambda_e_grid", "lambda_f_grid", "sweep_values"):
            v = getattr(self, key)
            if v is not None and (not isinstance(v, (list, tuple)) or len(v) == 0):
                raise ConfigError("must be a non-empty list", key=key)
        if self.sweep_var not in SWEEP_VARS:
            raise ConfigError(f"unknown sweep variable; choose from {SWEEP_VARS}", key="sweep_var")
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline; choose from {BASELINES}", key="baseline")
        if self.sigma_e < 0:
            raise ConfigError("watermark variance must be non-negative", key="sigma_e")

    def digest(self, model_hash: str = "") -> str:
        d = {k: v for k, v in asdict(self).items() if k not in ("out", "policy_cache")}
        d["model_hash"] = model_hash
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def mc(self) -> McConfig:
        return McConfig(trials=self.trials, horizon=self.horizon, seed=self.seed,
                        attack_time=self.attack_time, batch_size=self.batch_size)


CONFIG_KEYS = tuple(f.name for f in fields(ExperimentConfig))


def read_config(path) -> dict:
    """Parse a config file and check its keys against :class:`ExperimentConfig`."""
    lines = {}
    raw = parse_kv_file(path, lines)
    for key in raw:
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key (valid: {', '.join(CONFIG_KEYS)})", path, lines[key], key)
    return raw


# ---------------------------------------------------------------- argparse


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2, which is reserved."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("experiment")
    g.add_argument("--config", help="key = value file with ExperimentConfig fields")
    g.add_argument("--fixture", help="system-a, system-b or a key = value model file")
    g.add_argument("--sigma-e", type=float, help="equal-power watermark variance")
    g.add_argument("--lambda-e", type=float)
    g.add_argument("--lambda-f", type=float)
    g.add_argument("--th-s", type=float, help="posterior threshold to start watermarking")
    g.add_argument("--th-d", type=float, help="posterior threshold to declare an attack")
    g.add_argument("--trials", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--horizon", type=int, help="steps simulated past the onset")
    g.add_argument("--attack-time", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--samples", type=int, help="transition-sampler library size")
    g.add_argument("--grid-size", type=int)
    g.add_argument("--out", help="output directory")
    g.add_argument("--policy-cache", help="policy JSON path (default OUT/policy.json)")

    p = _Parser(prog="wmdetect", description="Parsimonious watermarking for replay-attack detection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve-policy", parents=[common], help="value iteration for the two thresholds")
    s.add_argument("--lambda-e-grid", type=_floats)
    s.add_argument("--lambda-f-grid", type=_floats)
    s.add_argument("--far-th", type=float)
    s.add_argument("--anw-th", type=float)

    sub.add_parser("simulate", parents=[common], help="one closed-loop run, per-step CSV")

    s = sub.add_parser("mc-eval", parents=[common], help="Monte-Carlo ADD/FAR/ANW/cost")
    s.add_argument("--overshoot", action="store_true", default=None, help="also estimate r_bar, l_bar, xi")

    sub.add_parser("theory-eval", parents=[common], help="closed-form KLD, ADD, FAR and cost")

    s = sub.add_parser("optimize-watermark", parents=[common], help="KLD-maximizing covariance under a budget")
    s.add_argument("--budget", type=float, help="parsimonious cost budget")
    s.add_argument("--anw", type=float, help="ANW used to map the budget to always-on")

    s = sub.add_parser("compare", parents=[common], help="proposed rule against a baseline")
    s.add_argument("--baseline", choices=BASELINES)
    s.add_argument("--anw", type=float)

    s = sub.add_parser("sweep", parents=[common], help="repeat theory and MC over one variable")
    s.add_argument("--sweep-var", choices=SWEEP_VARS)
    s.add_argument("--sweep-values", type=_floats)
    s.add_argument("--overshoot", action="store_true", default=None)
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if args.config:
        values.update(read_config(args.config))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc), args.config) from None


# ---------------------------------------------------------------- helpers


class Context:
    """Resolved config plus the loaded model and a few cached derived objects."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.model, self.attack = load_fixture(cfg.fixture)
        self.wm = WatermarkConfig.diagonal(self.model.p, cfg.sigma_e)
        self.hash = cfg.digest(self.model.digest())
        self.out = Path(cfg.out)
        self.rows = []

    @property
    def policy_path(self) -> Path:
        return Path(self.cfg.policy_cache) if self.cfg.policy_cache else self.out / "policy.json"

    def with_sigma(self, sigma2: float) -> WatermarkConfig:
        return WatermarkConfig.diagonal(self.model.p, sigma2)

    def add_row(self, metric, estimate, half_width=math.nan, trials=0, censored=0):
        self.rows.append((metric, float(estimate), float(half_width), int(trials), int(censored), self.hash, self.cfg.seed))

    def write(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        write_results_csv(path, self.rows)
        return path


def _policy(ctx: Context, wm: WatermarkConfig, lambda_e: float, lambda_f: float, save: bool = True):
    """Reuse a cached policy when it matches the model, seed and multipliers."""
    path = ctx.policy_path
    cfg = ctx.cfg
    if path.exists():
        try:
            pol = load_policy(path)
        except (ValueError, KeyError, json.JSONDecodeError):
            pol = None
        if (pol is not None and pol.lambda_e == lambda_e and pol.lambda_f == lambda_f
                and pol.provenance.get("seed") == cfg.seed
                and pol.provenance.get("model_hash") == ctx.model.digest()
                and pol.provenance.get("watermark_hash") == watermark_digest(wm)
                and pol.provenance.get("samples") == cfg.samples
                and len(pol.value_table.grid if pol.value_table is not None else []) in (0, cfg.grid_size)):
            return pol
    pol = solve_policy(ctx.model, ctx.attack, wm, lambda_e, lambda_f, seed=cfg.seed,
                       grid_size=cfg.grid_size, samples=cfg.samples)
    if save:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_policy(pol, path)
    return pol


def _thresholds(ctx: Context, wm: Optional[WatermarkConfig] = None) -> tuple[float, float]:
    cfg = ctx.cfg
    if cfg.th_s is not None and cfg.th_d is not None:
        if not 0.0 <= cfg.th_s <= cfg.th_d < 1.0:
            raise ConfigError("need 0 <= th_s <= th_d < 1", key="th_s/th_d")
        return cfg.th_s, cfg.th_d
    pol = _policy(ctx, wm or ctx.wm, cfg.lambda_e, cfg.lambda_f)
    return (cfg.th_s if cfg.th_s is not None else pol.th_s), (cfg.th_d if cfg.th_d is not None else pol.th_d)


def _print_table(rows, cols=("metric", "estimate", "half_width", "trials")):
    print("  ".join(f"{c:>22s}" if i else f"{c:<28s}" for i, c in enumerate(cols)))
    for r in rows:
        cells = [f"{r[0]:<28s}"]
        for x in r[1:len(cols)]:
            cells.append(f"{x:>22.6g}" if isinstance(x, float) else f"{x:>22}")
        print("  ".join(cells))


def _theory_rows(ctx: Context, wm: WatermarkConfig, th_d: Optional[float], prefix: str = ""):
    rho = ctx.attack.rho
    kld = kld_post_pre(ctx.model, ctx.attack, wm.Sigma_e)[0]
    tr = float(np.trace(lqg_intermediates(ctx.model).H @ wm.Sigma_e))
    ctx.add_row(prefix + "kld", kld)
    ctx.add_row(prefix + "delta_lqg_always_on", tr)
    if th_d is not None:
        Th_D = threshold_transform(th_d, rho)
        ctx.add_row(prefix + "Th_D", Th_D)
        ctx.add_row(prefix + "add_first_order", theoretical_add(Th_D, kld, rho))
        ctx.add_row(prefix + "far_bound", theoretical_far(Th_D, rho))
    return kld


def _mc_rows(ctx: Context, wm: WatermarkConfig, th_s: float, th_d: float, overshoot: bool, prefix: str = ""):
    cfg = ctx.cfg.mc()
    res = estimate_add_far_anw(ctx.model, ctx.attack, wm, (th_s, th_d), cfg)
    if overshoot:
        rho = ctx.attack.rho
        Th_D = threshold_transform(th_d, rho)
        Th_S = threshold_transform(th_s, rho) if th_s > 0 else -math.inf
        res.overshoot = estimate_overshoot_stats(ctx.model, ctx.attack, wm, Th_S, Th_D, cfg)
    ctx.rows += result_rows(res, ctx.hash, ctx.cfg.seed, prefix)
    ctx.add_row(prefix + "delta_lqg_theory", res.anw * ctx.attack.rho * float(np.trace(lqg_intermediates(ctx.model).H @ wm.Sigma_e)))
    if res.overshoot is not None:
        o = res.overshoot
        kld = kld_post_pre(ctx.model, ctx.attack, wm.Sigma_e)[0]
        Th_D = threshold_transform(th_d, ctx.attack.rho)
        ctx.add_row(prefix + "add_overshoot_corrected", theoretical_add(Th_D, kld, ctx.attack.rho, o.r_bar, o.l_bar))
        ctx.add_row(prefix + "far_overshoot_corrected", theoretical_far(Th_D, ctx.attack.rho, o.xi))
    return res


# ---------------------------------------------------------------- commands


def cmd_theory_eval(ctx: Context) -> int:
    _theory_rows(ctx, ctx.wm, ctx.cfg.th_d)
    path = ctx.write("theory.csv")
    _print_table(ctx.rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_solve_policy(ctx: Context) -> int:
    cfg = ctx.cfg
    if cfg.lambda_e_grid or cfg.lambda_f_grid:
        if cfg.far_th is None or cfg.anw_th is None:
            raise ConfigError("a Lagrange grid search needs far_th and anw_th", key="far_th/anw_th")
        sampler = build_transition_sampler(ctx.model, ctx.attack, ctx.wm, cfg.samples, np.random.default_rng(cfg.seed))
        mats = transition_matrices(make_grid(cfg.grid_size), sampler)

        def evaluate(le, lf):
            pol = solve_policy(ctx.model, ctx.attack, ctx.wm, le, lf, seed=cfg.seed, grid_size=cfg.grid_size,
                               sampler=sampler, matrices=mats)
            res = estimate_add_far_anw(ctx.model, ctx.attack, ctx.wm, pol.thresholds, cfg.mc(), track_cost=False)
            print(f"  lambda_e={le:g} lambda_f={lf:g}: th_s={pol.th_s:.5f} th_d={pol.th_d:.5f} "
                  f"ADD={res.add:.3f} FAR={res.far:.4g} ANW={res.anw:.3f}")
            return pol, res.add, res.far, res.anw

        try:
            pol, cands = lagrange_grid_search(cfg.lambda_e_grid or [cfg.lambda_e], cfg.lambda_f_grid or [cfg.lambda_f],
                                              cfg.far_th, cfg.anw_th, evaluate)
        except InfeasibleError as exc:
            print(f"infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        for c in cands:
            tag = f"@lambda_e={c.lambda_e:g},lambda_f={c.lambda_f:g}"
            for name in ("th_s", "th_d", "add", "far", "anw"):
                ctx.add_row(name + tag, getattr(c, name), trials=cfg.trials)
            ctx.add_row("feasible" + tag, float(c.feasible))
    else:
        pol = solve_policy(ctx.model, ctx.attack, ctx.wm, cfg.lambda_e, cfg.lambda_f, seed=cfg.seed,
                           grid_size=cfg.grid_size, samples=cfg.samples)
    path = ctx.policy_path
    path.parent.mkdir(parents=True, exist_ok=True)
    save_policy(pol, path)
    for name in ("lambda_e", "lambda_f", "th_s", "th_d"):
        ctx.add_row(name, getattr(pol, name))
    ctx.add_row("Th_S", pol.Th_S)
    ctx.add_row("Th_D", pol.Th_D)
    csv_path = ctx.write("policy.csv")
    print(f"action pattern over increasing p: {' / '.join(pol.value_table.pattern())}")
    print(f"Th_s = {pol.th_s:.6f} < Th_d = {pol.th_d:.6f}")
    print(f"policy cached at {path}; summary in {csv_path}")
    return EXIT_OK


def cmd_simulate(ctx: Context) -> int:
    cfg = ctx.cfg
    th_s, th_d = _thresholds(ctx)
    horizon = cfg.horizon or 2_000
    trace = run_closed_loop(ctx.model, ctx.attack, ctx.wm, lambda k, p: decide(p, th_s, th_d), horizon,
                            np.random.default_rng(cfg.seed), attack_time=cfg.attack_time)
    ctx.out.mkdir(parents=True, exist_ok=True)
    path = ctx.out / "trace.csv"
    trace.to_csv(path, {"config_hash": ctx.hash, "seed": cfg.seed})
    print(f"thresholds th_s={th_s:.6f} th_d={th_d:.6f}")
    print(f"attack onset {trace.attack_time}, alarm {trace.detection_time}, censored {trace.censored}, "
          f"watermarked steps {sum(trace.s)} of {len(trace.k)}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_mc_eval(ctx: Context) -> int:
    th_s, th_d = _thresholds(ctx)
    ctx.add_row("th_s", th_s)
    ctx.add_row("th_d", th_d)
    _theory_rows(ctx, ctx.wm, th_d, "theory_")
    _mc_rows(ctx, ctx.wm, th_s, th_d, bool(ctx.cfg.overshoot))
    path = ctx.write("mc.csv")
    _print_table(ctx.rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_optimize_watermark(ctx: Context) -> int:
    cfg = ctx.cfg
    rho = ctx.attack.rho
    H = lqg_intermediates(ctx.model).H
    anw = cfg.anw
    if anw is None:
        th_s, th_d = _thresholds(ctx)
        anw = estimate_add_far_anw(ctx.model, ctx.attack, ctx.wm, (th_s, th_d), cfg.mc(), track_cost=False).anw
    budget = cfg.budget if cfg.budget is not None else rho * anw * float(np.trace(H @ ctx.wm.Sigma_e))
    Sigma, kld = optimize_watermark(ctx.model, ctx.attack, budget, anw, rho)
    J_A = budget / (rho * anw)
    diag = WatermarkConfig.diagonal(ctx.model.p, J_A / float(np.trace(H)))
    kld_diag = kld_post_pre(ctx.model, ctx.attack, diag.Sigma_e)[0]
    ctx.add_row("budget", budget)
    ctx.add_row("anw", anw)
    ctx.add_row("always_on_budget", J_A)
    ctx.add_row("kld_optimal", kld)
    ctx.add_row("kld_diagonal", kld_diag)
    for i in range(Sigma.shape[0]):
        for j in range(Sigma.shape[1]):
            ctx.add_row(f"Sigma_e[{i}][{j}]", Sigma[i, j])
    path = ctx.write("watermark.csv")
    _print_table(ctx.rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_compare(ctx: Context) -> int:
    cfg = ctx.cfg
    th_s, th_d = _thresholds(ctx)
    res = compare_baselines(cfg.baseline, ctx.model, ctx.attack, ctx.wm, (th_s, th_d), cfg.mc(), anw=cfg.anw)
    ctx.rows += result_rows(res["proposed"], ctx.hash, cfg.seed, "proposed_")
    ctx.rows += result_rows(res["baseline"], ctx.hash, cfg.seed, "baseline_")
    for key in ("scale", "period", "budget", "anw_pilot"):
        if key in res:
            ctx.add_row(key, res[key])
    path = ctx.write(f"compare_{cfg.baseline}.csv")
    _print_table(ctx.rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(ctx: Context) -> int:
    cfg = ctx.cfg
    if not cfg.sweep_values:
        raise ConfigError("sweep needs a non-empty list of values", key="sweep_values")
    var = cfg.sweep_var
    for value in cfg.sweep_values:
        tag = f"@{var}={value:g}"
        sub = Context.__new__(Context)
        sub.__dict__.update(ctx.__dict__)
        sub.cfg = replace(cfg, **{var: float(value)}) if var != "budget" else replace(cfg, budget=float(value))
        sub.wm = ctx.with_sigma(sub.cfg.sigma_e)
        sub.rows = ctx.rows
        if var == "budget":
            anw = cfg.anw
            if anw is None:
                raise ConfigError("a budget sweep needs anw", key="anw")
            Sigma, kld = optimize_watermark(ctx.model, ctx.attack, float(value), anw, ctx.attack.rho)
            ctx.add_row("kld_optimal" + tag, kld)
            continue
        if var in ("lambda_e", "lambda_f"):
            sub.cfg = replace(sub.cfg, th_s=None, th_d=None)
            pol = _policy(sub, sub.wm, sub.cfg.lambda_e, sub.cfg.lambda_f, save=False)
            th_s, th_d = pol.thresholds
        else:
            th_s, th_d = _thresholds(sub, sub.wm)
        ctx.add_row("th_s" + tag, th_s)
        ctx.add_row("th_d" + tag, th_d)
        _theory_rows(sub, sub.wm, th_d, "theory_")
        _mc_rows(sub, sub.wm, th_s, th_d, bool(cfg.overshoot))
        for i in range(len(ctx.rows)):
            m = ctx.rows[i][0]
            if "@" not in m:
                ctx.rows[i] = (m + tag,) + tuple(ctx.rows[i][1:])
    path = ctx.write(f"sweep_{var}.csv")
    _print_table(ctx.rows)
    print(f"wrote {path}")
    return EXIT_OK


HANDLERS = {
    "solve-policy": cmd_solve_policy,
    "simulate": cmd_simulate,
    "mc-eval": cmd_mc_eval,
    "theory-eval": cmd_theory_eval,
    "optimize-watermark": cmd_optimize_watermark,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    try:
        ctx = Context(resolve_config(args))
        return HANDLERS[args.command](ctx)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except StabilityError as exc:
        print(f"error: unstable model: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ConfigError, SolverError, PolicyStructureError, EstimationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
