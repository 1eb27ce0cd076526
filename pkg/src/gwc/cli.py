"""Command-line front end: ``gwc <command> [options]``.

Exit status: 0 success, 1 invalid input or unmet precondition, 2 numerical
failure (non-convergence, overflow), 3 when ``verify`` finds a failing check.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import deviation, limits, montecarlo
from .errors import GWCError, NumericalError, ValidationError
from .iterate import IterationContext, extinction, f_n_order_eval, zn_distribution
from .mechanism import MechanismSchedule, schedule_from_json
from .moments import normalizers, var_w, var_w_n, variance_zn
from .series import DEFAULT_DEGREE

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_VERIFY_FAILED = 0, 1, 2, 3

DEFAULT_SCHEDULE = {"mechanisms": [{"probs": [0.0, 0.5, 0.5]}, {"probs": [0.0, 0.5, 0.5]}]}
DEFAULTS = {
    "tol": 1e-10, "max_iter": 100_000, "degree": DEFAULT_DEGREE, "seed": 42, "paths": 20_000,
    "epsilon": 0.25, "delta": 0.5, "s0": 1.5, "r": 2.0, "n": 4, "n_max": 12,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(kind):
    def conv(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{text!r} is not a valid {kind.__name__}") from None
        if isinstance(value, float) and not math.isfinite(value) or value <= 0:
            raise argparse.ArgumentTypeError(f"{text!r} must be > 0")
        return value
    return conv


def _nonneg_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"{text!r} must be >= 0")
    return value


def _probe_list(text):
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated list of numbers") from None
    if not values or not all(math.isfinite(v) for v in values):
        raise argparse.ArgumentTypeError(f"{text!r} needs at least one finite value")
    return values


def load_schedule(document) -> MechanismSchedule:
    """Schedule from a JSON string, a parsed document, or None for the default pair."""
    if document is None:
        return schedule_from_json(DEFAULT_SCHEDULE)
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config: not valid JSON ({exc.msg} at char {exc.pos})") from None
    return schedule_from_json(document)


def _read_config(value):
    if value is None:
        return None
    if value.lstrip().startswith("{"):
        return value
    try:
        return Path(value).read_text()
    except OSError as exc:
        raise ValidationError(f"--config: cannot read {value!r} ({exc.strerror})") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="schedule JSON file, or an inline JSON document")
    common.add_argument("--format", choices=("csv", "json"),
                        help="report format (default: json for verify, csv otherwise)")
    common.add_argument("--out", help="write the report here instead of stdout")
    common.add_argument("--tol", type=_positive(float), default=DEFAULTS["tol"])
    common.add_argument("--max-iter", type=_positive(int), default=DEFAULTS["max_iter"])
    common.add_argument("--degree", type=_positive(int), default=DEFAULTS["degree"])
    common.add_argument("--seed", type=_nonneg_int, default=DEFAULTS["seed"])
    common.add_argument("--paths", type=_positive(int), default=DEFAULTS["paths"])
    common.add_argument("--epsilon", type=_positive(float), default=DEFAULTS["epsilon"])
    common.add_argument("--delta", type=_positive(float), default=DEFAULTS["delta"])
    common.add_argument("--s0", type=_positive(float), default=DEFAULTS["s0"])
    common.add_argument("--r", type=_positive(float), default=DEFAULTS["r"])
    common.add_argument("--n", type=_nonneg_int, default=DEFAULTS["n"])
    common.add_argument("--n-max", type=_positive(int), default=DEFAULTS["n_max"])
    common.add_argument("--s", type=_probe_list, help="comma-separated probe points")

    parser = _Parser(prog="gwc", description="Alternating two-mechanism branching processes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "extinction": "fixed points of f(a), f(b) and of the two compositions",
        "moments": "mean normalizers and the variance of Z_n",
        "iterate": "f_n(ab; s) (or ba with --order) at probe points",
        "dist": "exact or truncated law of Z_n",
        "qfunc": "Q and Q~ at probe points with horizons and residuals",
        "rfunc": "R and R~ at probe points with horizons and residuals",
        "chernoff": "Chernoff rates for both mechanisms",
        "ldp": "exact ratio deviation, its normalization and the limit sum",
        "simulate": "Monte Carlo trajectories",
        "verify": "Monte Carlo versus exact comparison suite",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=text) for name, text in helps.items()}
    subs["iterate"].add_argument("--order", choices=("ab", "ba"), default="ab")
    subs["rfunc"].add_argument("--order", choices=("ab", "ba"), default="ab")
    subs["simulate"].add_argument("--summary", action="store_true",
                                  help="per-generation summary instead of trajectories")
    return parser


# -- report writing -----------------------------------------------------------------

def _num(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        x = float(x)
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def render(report: dict, fmt: str) -> str:
    """``report`` has ``command``, ``settings``, ``columns`` and ``rows``."""
    if fmt == "json":
        doc = {"command": report["command"], "settings": report["settings"],
               "results": [dict(zip(report["columns"], row)) for row in report["rows"]]}
        if "extra" in report:
            doc.update(report["extra"])
        return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    buf.write(f"# command={report['command']}\n")
    for key in sorted(report["settings"]):
        value = report["settings"][key]
        text = json.dumps(value, sort_keys=True) if isinstance(value, (dict, list)) else _num(value)
        buf.write(f"# {key}={text}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(report["columns"])
    for row in report["rows"]:
        writer.writerow([_num(v) for v in row])
    return buf.getvalue()


def _settings(args, schedule, *keys):
    """Every shared option lands in the header so a report describes its own run."""
    out = {"schedule": schedule.to_json()}
    for k in (*DEFAULTS, *keys):
        out[k] = getattr(args, k)
    return out


# -- commands -------------------------------------------------------------------------

def _ctx(args, schedule):
    return IterationContext(schedule.require_pair(), tolerance=min(args.tol, 1e-12),
                            max_iter=args.max_iter)


def cmd_extinction(args, schedule):
    res = extinction(_ctx(args, schedule))
    rows = [[k, v] for k, v in res.as_dict().items()]
    return {"columns": ["quantity", "value"], "rows": rows,
            "settings": _settings(args, schedule, "tol", "max_iter")}


def cmd_moments(args, schedule):
    schedule.require_pair()
    table = normalizers(schedule)
    n = args.n
    variance, source = variance_zn(schedule, n, args.degree)
    rows = [["n", n], ["mean", table.gamma(n)], ["variance", variance],
            ["variance_source", source], ["gamma", table.gamma(n)],
            ["gamma_tilde", table.gamma_tilde(n)], ["omega", table.omega(n)],
            ["m", table.m], ["sigma_sq", table.sigma_sq]]
    if table.m > 1:
        rows += [["var_w", var_w(table)], ["var_w_n", var_w_n(table, n)]]
    return {"columns": ["quantity", "value"], "rows": rows,
            "settings": _settings(args, schedule, "n", "degree")}


def cmd_iterate(args, schedule):
    ctx = _ctx(args, schedule)
    probes = args.s or [0.0, 0.25, 0.5, 0.75, 1.0]
    values = [f_n_order_eval(ctx, args.order, args.n, s) for s in probes]
    return {"columns": ["s", "f_n"], "rows": [list(r) for r in zip(probes, values)],
            "settings": _settings(args, schedule, "n", "order")}


def cmd_dist(args, schedule):
    law = zn_distribution(_ctx(args, schedule), args.n, args.degree)
    settings = _settings(args, schedule, "n", "degree")
    settings.update(exact=law.exact, tail_bound=law.tail_bound)
    return {"columns": ["index", "coefficient"],
            "rows": [[j, float(c)] for j, c in enumerate(law.coeffs)], "settings": settings}


def cmd_qfunc(args, schedule):
    ctx = _ctx(args, schedule)
    probes = np.array(args.s) if args.s else limits.q_probe_grid()
    if np.any((probes < 0) | (probes >= 1)):
        raise ValidationError("--s: Q probes must lie in [0, 1)")
    q = limits.q_limit(ctx, probes, args.tol, "Q")
    qt = limits.q_limit(ctx, probes, args.tol, "Q_tilde")
    res = limits.functional_residual_q_profile(ctx, q, qt, probes)
    rows = [[s, q.probe_values[float(s)], qt.probe_values[float(s)], q.horizons[float(s)],
             qt.horizons[float(s)], r] for s, r in zip(probes, res)]
    return {"columns": ["s", "Q", "Q_tilde", "horizon_Q", "horizon_Q_tilde", "residual"],
            "rows": rows, "settings": _settings(args, schedule, "tol")}


def cmd_rfunc(args, schedule):
    ctx = _ctx(args, schedule)
    probes = np.array(args.s) if args.s else limits.chebyshev_grid(1.0 + 1e-3, args.s0)
    if np.any(probes < 0):
        raise ValidationError("--s: R probes must be >= 0")
    r = limits.r_limit(ctx, "ab", probes, args.tol, args.s0)
    rt = limits.r_limit(ctx, "ba", probes, args.tol, args.s0)
    res = limits.functional_residual_r_profile(ctx, probes, min(args.tol, 1e-12), args.s0)
    rows = [[s, r.probe_values[float(s)], rt.probe_values[float(s)], r.horizons[float(s)],
             rt.horizons[float(s)], x] for s, x in zip(probes, res)]
    return {"columns": ["s", "R", "R_tilde", "horizon_R", "horizon_R_tilde", "residual"],
            "rows": rows, "settings": _settings(args, schedule, "tol", "s0")}


def cmd_chernoff(args, schedule):
    schedule.require_pair()
    rows = []
    for name, mech in (("a", schedule.a), ("b", schedule.b)):
        c = deviation.chernoff_rate(mech, args.epsilon)
        rows.append([name, c.lam, c.alpha_star, c.beta_star, c.upper_rate, c.lower_rate])
    rows.append(["common", max(rows[0][1], rows[1][1]), None, None, None, None])
    return {"columns": ["mechanism", "lambda", "alpha_star", "beta_star", "upper_rate",
                        "lower_rate"], "rows": rows,
            "settings": _settings(args, schedule, "epsilon")}


def cmd_ldp(args, schedule):
    ctx = _ctx(args, schedule)
    sums = {side: deviation.limit_sum(ctx, args.epsilon, side).value for side in ("a", "b")}
    rows = []
    for n in range(args.n_max + 1):
        rep = deviation.ratio_deviation_exact(ctx, n, args.epsilon, min(args.degree, 2048))
        rows.append([n, rep.exact, rep.normalized, rep.chernoff_bound,
                     sums["a" if n % 2 == 0 else "b"], rep.truncation_error])
    return {"columns": ["n", "exact", "normalized", "chernoff_bound", "limit_sum",
                        "truncation_error"], "rows": rows,
            "settings": _settings(args, schedule, "epsilon", "n_max")}


def cmd_simulate(args, schedule):
    cfg = montecarlo.SimConfig(schedule, args.n_max, args.paths, args.seed)
    ens = montecarlo.simulate(cfg)
    settings = _settings(args, schedule, "n_max", "paths", "seed")
    settings["block_size"] = montecarlo.BLOCK_SIZE
    if args.summary:
        rows = []
        for n in range(args.n_max + 1):
            w = ens.w_values[:, n]
            z = ens.trajectories[:, n]
            rows.append([n, float(z.mean()), float(w.mean()), float(w.var(ddof=1)) if w.size > 1 else 0.0,
                         float(np.mean(z == 0))])
        return {"columns": ["n", "mean_Z", "mean_W", "var_W", "extinct_fraction"],
                "rows": rows, "settings": settings}
    traj = ens.trajectories
    rows = [[p, n, int(traj[p, n])] for p in range(traj.shape[0]) for n in range(traj.shape[1])]
    return {"columns": ["path", "n", "Z_n"], "rows": rows, "settings": settings}


def run_verify(schedule: MechanismSchedule, seed: int, paths: int = 20_000,
               n_max: int = 12, epsilon: float = 0.25, s0: float = 1.5) -> dict:
    """Deterministic comparison suite; every check records value, tolerance and pass."""
    ctx = IterationContext(schedule.require_pair())
    table = normalizers(schedule)
    checks = []

    def add(name, passed, value, tolerance, note=""):
        checks.append({"name": name, "pass": bool(passed), "value": value,
                       "tolerance": tolerance, "note": note})

    ext = extinction(ctx)
    cfg = montecarlo.SimConfig(schedule, n_max + 1, paths, seed)
    ens = montecarlo.simulate(cfg)
    freq = montecarlo.extinction_frequency(ens, n_max + 1)
    gap = abs(freq.value - ext.rho_ab)
    add("extinction_frequency", gap <= 3 * freq.se + 1.0 / paths, freq.value, 3 * freq.se,
        f"rho_ab={ext.rho_ab!r}; bias of a finite horizon is below 1/paths")

    worst_mean = worst_var = 0.0
    for n in range(1, n_max + 1):
        w = montecarlo.empirical_w_moments(ens, n)
        worst_mean = max(worst_mean, abs(w.mean - 1.0) / w.mean_se if w.mean_se else 0.0)
        if table.m > 1:
            target = var_w_n(table, n)
            worst_var = max(worst_var, abs(w.variance - target) / w.variance_se if w.variance_se else 0.0)
    add("w_mean_within_3se", worst_mean <= 3, worst_mean, 3.0, "max |mean - 1| / SE over n")
    add("w_variance_within_3se", worst_var <= 3, worst_var, 3.0, "max |var - closed form| / SE")

    no_death = schedule.a.probs[0] == 0 and schedule.b.probs[0] == 0
    if no_death:
        worst = 0.0
        for n in range(0, 7):
            est = montecarlo.estimate_ratio_deviation(ens, n, epsilon)
            exact = deviation.ratio_deviation_exact(ctx, n, epsilon).exact
            d = abs(est.value - exact)
            worst = max(worst, d / est.se if est.se else (0.0 if d < 1e-12 else math.inf))
        add("ratio_deviation_mc_vs_exact", worst <= 3, worst, 3.0, "max |MC - exact| / SE, n <= 6")

        ls = deviation.limit_sum(ctx, epsilon, "a")
        seq = [r.normalized for r in deviation.normalized_sequence(ctx, epsilon, 40)]
        rel = abs(seq[-1] - ls.value) / ls.value if ls.value else abs(seq[-1])
        add("limit_sum_vs_normalized_sequence", rel <= 0.01, rel, 0.01, "generation 40")

        approx_q = limits.q_limit(ctx, tol=1e-12)
        approx_qt = limits.q_limit(ctx, tol=1e-12, kind="Q_tilde")
        rq = limits.functional_residual_q(ctx, approx_q, approx_qt)
        add("q_functional_residual", rq <= 1e-6, rq, 1e-6)
        rr = limits.functional_residual_r(ctx, s0=s0)
        add("r_functional_residual", rr <= 1e-6, rr, 1e-6)
        dr = limits.r_derivative_at_one(ctx)
        add("r_slope_at_one", abs(dr - 1) <= 1e-4, dr, 1e-4)

        th = limits.theta1_bound(ctx, s0=s0)
        cap = float(schedule.a(s0))
        worst_mgf = max(limits.mgf_wn(ctx, n, th.theta1) for n in range(31))
        add("mgf_bound", worst_mgf <= cap, worst_mgf, cap, f"theta1={th.theta1!r}")

    worst_ratio = 0.0
    for mech in (schedule.a, schedule.b):
        for eps in (0.1, 0.25, 0.5):
            rate = deviation.chernoff_rate(mech, eps)
            phi = deviation.phi_table(mech, 20, eps)[1:]
            bound = rate.bound(np.arange(1, 21))
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(bound > 0, phi / bound, np.where(phi > 0, np.inf, 0.0))
            worst_ratio = max(worst_ratio, float(r.max()))
    add("chernoff_bound_validity", worst_ratio <= 1.0, worst_ratio, 1.0, "max phi / bound, k <= 20")

    return {
        "settings": {"seed": seed, "paths": paths, "n_max": n_max, "epsilon": epsilon, "s0": s0,
                     "schedule": schedule.to_json(), "block_size": montecarlo.BLOCK_SIZE},
        "checks": checks,
        "all_pass": all(c["pass"] for c in checks),
    }


def cmd_verify(args, schedule):
    rep = run_verify(schedule, args.seed, args.paths, args.n_max, args.epsilon, args.s0)
    rows = [[c["name"], c["pass"], c["value"], c["tolerance"], c["note"]] for c in rep["checks"]]
    return {"columns": ["check", "pass", "value", "tolerance", "note"], "rows": rows,
            "settings": {**_settings(args, schedule), **rep["settings"]},
            "extra": {"all_pass": rep["all_pass"]},
            "status": EXIT_OK if rep["all_pass"] else EXIT_VERIFY_FAILED}


COMMANDS = {
    "extinction": cmd_extinction, "moments": cmd_moments, "iterate": cmd_iterate,
    "dist": cmd_dist, "qfunc": cmd_qfunc, "rfunc": cmd_rfunc, "chernoff": cmd_chernoff,
    "ldp": cmd_ldp, "simulate": cmd_simulate, "verify": cmd_verify,
}


def parse_and_dispatch(argv=None, stdout=None, stderr=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        schedule = load_schedule(_read_config(args.config))
        report = COMMANDS[args.command](args, schedule)
        report["command"] = args.command
        fmt = args.format or ("json" if args.command == "verify" else "csv")
        text = render(report, fmt)
        if args.out:
            Path(args.out).write_text(text)
        else:
            stdout.write(text)
        return report.get("status", EXIT_OK)
    except ValidationError as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        gap = getattr(exc, "last_gap", None)
        suffix = f" (last gap {gap!r})" if gap is not None else ""
        print(f"numerical failure: {exc}{suffix}", file=stderr)
        return EXIT_NUMERIC
    except (GWCError, OSError) as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_INVALID


def main(argv=None):
    sys.exit(parse_and_dispatch(argv))
