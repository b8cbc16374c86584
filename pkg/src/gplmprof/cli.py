"""Command-line interface: ``gplmprof {fit,profile,funnel,simulate}``.

Exit status is 0 on success, 2 for bad arguments, 3 for unreadable or
malformed input and 4 for numerical failures. Errors are also written to
standard error as a single JSON object.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import sim
from .funnel import fit_empirical_null, funnel_points, z_scores
from .io import (ArtifactError, ModelArtifact, PanelParseError, atomic_write_text, config_hash,
                 describe_panel, load_artifact, load_panel, save_artifact, write_csv)
from .model import DropoutSpec, NetworkParams, NetworkTopology, OutcomeFamily
from .optim import ALGORITHMS, SAMPLING, TrainConfig, fit
from .profile import REPORT_COLUMNS, estimate_sigma2, null_models, profile_providers, report_rows

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


class CommandError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    dropout = DropoutSpec(args.retention) if args.retention < 1.0 else None
    return TrainConfig(algorithm=args.algorithm, sampling=args.sampling, train_fraction=args.train_fraction,
                       batch_fraction=args.batch_fraction, learning_rate=args.learning_rate,
                       patience=args.patience, max_iter=args.max_iter, dropout=dropout, seed=args.seed)


def cmd_fit(args) -> int:
    panel = load_panel(args.input, args.family, args.categorical)
    topology = (NetworkTopology.linear(panel.p0) if not args.hidden
                else NetworkTopology.mlp(panel.p0, tuple(args.hidden)))
    config = _train_config(args)
    family = OutcomeFamily(args.family)
    result = fit(panel, topology, family, config)
    if family.kind == "gaussian":
        family = family.with_sigma2(estimate_sigma2(panel, result.params, topology))
    meta = {
        "config": {k: (v if not isinstance(v, DropoutSpec) else v.retention_prob)
                   for k, v in config.__dict__.items()},
        "config_hash": config_hash(config),
        "iterations": result.iterations,
        "best_iteration": result.best_iteration,
        "validation_loss": result.validation_loss,
        "train_loss": result.train_loss,
        "panel": describe_panel(panel),
    }
    save_artifact(ModelArtifact(topology, result.params, list(panel.provider_ids), family, config.dropout,
                                meta), args.output)
    print(f"fitted {panel.m} providers, {panel.n} rows in {result.iterations} iterations "
          f"(validation loss {result.validation_loss:.6g}) -> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# profile / funnel
# ---------------------------------------------------------------------------


def _load_for_artifact(args):
    artifact = load_artifact(args.model)
    panel = load_panel(args.input, artifact.family, args.categorical)
    if list(panel.provider_ids) != artifact.provider_ids:
        unknown = sorted(set(panel.provider_ids) - set(artifact.provider_ids))
        if unknown:
            raise CommandError("input", f"providers not in the fitted model: {unknown[:5]}", EXIT_INPUT)
        # re-index the fitted effects to the panel's provider order
        pos = {pid: k for k, pid in enumerate(artifact.provider_ids)}
        params = artifact.params.copy(artifact.topology)
        gamma = artifact.params.gamma[[pos[p] for p in panel.provider_ids]]
        flat = np.concatenate([gamma, params.flat[len(artifact.provider_ids):]])
        artifact = replace(artifact, params=NetworkParams.from_flat(artifact.topology, panel.m, flat),
                           provider_ids=list(panel.provider_ids))
    if artifact.topology.layer_sizes[0] != panel.p0:
        raise CommandError("input", f"model expects {artifact.topology.layer_sizes[0]} covariates, "
                                    f"input has {panel.p0}", EXIT_INPUT)
    return artifact, panel


def _retention(artifact) -> float:
    return artifact.dropout.retention_prob if artifact.dropout is not None else 1.0


def cmd_profile(args) -> int:
    artifact, panel = _load_for_artifact(args)
    results = profile_providers(panel, artifact.params, artifact.topology, artifact.family, args.alpha,
                                args.alpha1, _norm(args.norm), args.min_size, not args.no_ci,
                                _retention(artifact))
    write_csv(args.output, REPORT_COLUMNS, report_rows(results))
    counts = {f: sum(r.flag == f for r in results) for f in ("better", "expected", "worse")}
    print(f"profiled {len(results)} of {panel.m} providers: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return 0


def _norm(text: str):
    try:
        return float(text)
    except ValueError:
        return text


def funnel_table(points, taus, alphas, adjusted: bool):
    modes = ("exact", "adjusted") if adjusted else ("exact",)
    header = ["provider_id", "n_i", "O_i", "E_i", "precision", "SRR"]
    for tau in taus:
        for alpha in alphas:
            for mode in modes:
                tag = f"{mode}_tau{tau:g}_a{alpha:g}"
                header += [f"lower_{tag}", f"upper_{tag}"]
    header.append("flag")
    rows = []
    for p, n in points:
        lim = {(t, a, md): (lo, hi) for t, a, md, lo, hi in p.limits}
        row = [p.provider_id, n, p.observed, p.expected, p.precision, p.srr]
        for tau in taus:
            for alpha in alphas:
                for mode in modes:
                    row += list(lim[(float(tau), float(alpha), mode)])
        row.append(p.flag)
        rows.append(row)
    return header, rows


def funnel_svg(points, tau: float, alpha: float, mode: str, width: int = 640, height: int = 420) -> str:
    """Scatter of SRR against precision with the control-limit curves and the target line."""
    x = np.array([p.precision for p, _ in points])
    y = np.array([p.srr for p, _ in points])
    lim = np.array([[lo, hi] for p, _ in points for t, a, md, lo, hi in p.limits
                    if t == tau and a == alpha and md == mode])
    finite = np.concatenate([y, lim[np.isfinite(lim)].ravel(), [tau]])
    x0, x1 = 0.0, float(x.max()) * 1.05
    y0, y1 = float(max(0.0, finite.min())) * 0.95, float(finite.max()) * 1.05
    pad = 40

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def py(v):
        return height - pad - (np.clip(v, y0, y1) - y0) / (y1 - y0) * (height - 2 * pad)

    order = np.argsort(x, kind="stable")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{px(x0):.2f}" y1="{py(tau):.2f}" x2="{px(x1):.2f}" y2="{py(tau):.2f}" '
           f'stroke="black" stroke-dasharray="4,3"/>']
    for col in (0, 1):
        pts = " ".join(f"{px(x[k]):.2f},{py(lim[k, col]):.2f}" for k in order if np.isfinite(lim[k, col]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="1.5"/>')
    colors = {"worse": "firebrick", "better": "seagreen", "expected": "gray"}
    for k in order:
        p = points[k][0]
        out.append(f'<circle cx="{px(x[k]):.2f}" cy="{py(y[k]):.2f}" r="2.5" fill="{colors[p.flag]}"/>')
    out += [f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="12">precision</text>',
            f'<text x="12" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 12 {height / 2:.0f})" '
            f'text-anchor="middle">standardized ratio</text>',
            "</svg>"]
    return "\n".join(out) + "\n"


def cmd_funnel(args) -> int:
    artifact, panel = _load_for_artifact(args)
    keep = [i for i in range(panel.m) if panel.sizes[i] >= args.min_size]
    models = null_models(panel, artifact.params, artifact.topology, artifact.family, _norm(args.norm),
                         retention=_retention(artifact))
    models = [models[i] for i in keep]
    observed = [float(panel.outcomes[panel.rows(i)].sum()) for i in keep]
    fit_od = None
    if args.overdispersion:
        V = np.array([md.with_tau(args.tau[0]).null_variance() for md in models])
        fit_od = fit_empirical_null(z_scores([md.with_tau(args.tau[0]) for md in models], observed), V)
        print(f"empirical null: kappa0={fit_od.kappa0:.4g} sigma2_phi={fit_od.sigma2_phi:.4g}"
              + ("" if fit_od.converged else " (not converged, unadjusted)"))
    pts = funnel_points(models, observed, [panel.provider_ids[i] for i in keep], args.tau, args.alpha, fit_od)
    paired = list(zip(pts, [int(panel.sizes[i]) for i in keep]))
    header, rows = funnel_table(paired, args.tau, args.alpha, fit_od is not None)
    write_csv(args.output, header, rows)
    if args.svg:
        mode = "adjusted" if fit_od is not None else "exact"
        atomic_write_text(args.svg, funnel_svg(paired, float(args.tau[0]), float(args.alpha[0]), mode))
    print(f"funnel data for {len(pts)} providers -> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_SCENARIO = re.compile(r"^(?P<truth>linear|nonlinear|weak-nonlinear)-m(?P<m>\d+)-rho(?P<rho>[\d.]+)"
                       r"-nu(?P<nu>[\d.]+)(?:-n1(?P<n1>\d+))?$")


def parse_scenario(name: str, replicates: int, seed: int) -> sim.SimScenario:
    """Scenario from a name such as ``nonlinear-m100-rho0-nu50`` or ``weak-nonlinear-m100-rho0.5-nu100-n1100``."""
    match = _SCENARIO.match(name)
    if match is None:
        raise CommandError("usage", f"cannot parse scenario {name!r}; expected e.g. nonlinear-m100-rho0-nu50",
                           EXIT_USAGE)
    d = match.groupdict()
    return sim.SimScenario(m=int(d["m"]), mean_size=float(d["nu"]), rho=float(d["rho"]), truth=d["truth"],
                           focal_size=None if d["n1"] is None else int(d["n1"]), replicates=replicates,
                           seed=seed)


def cmd_simulate(args) -> int:
    scenario = parse_scenario(args.scenario, args.replicates, args.seed)
    out = Path(args.output_dir)
    config = replace(sim.SIM_CONFIG, seed=args.seed)
    if args.table == "1":
        reports = sim.run_model_comparison(scenario, config=config)
        write_csv(out / "table1.csv", *sim.model_comparison_table(reports))
        for name, r in reports.items():
            print(f"{name}: AUC {r.mean['auc']:.4f} ({r.sd['auc']:.4f}) over {r.replicates} replicates")
    elif args.table == "2":
        algs = ("amsgrad", "adam", "rmsprop") + (("sgd",) if args.sgd else ())
        cmp_ = sim.run_optimizer_comparison(scenario, algorithms=algs, fits_per_panel=args.fits, config=config)
        write_csv(out / "table2.csv", *sim.optimizer_table(cmp_))
        for alg in algs[1:]:
            print(f"speedup of amsgrad over {alg}: {cmp_.speedup(alg):.3f}")
    elif args.table == "3":
        rows = sim.run_variance_comparison(scenario, config=config)
        write_csv(out / "table3.csv", *sim.variance_table(rows))
        for block in ("w", "b", "gamma"):
            share = np.mean([r[f"stratified_{block}"] < r[f"simple_{block}"] for r in rows])
            print(f"stratified < simple variance ({block}): {share:.0%} of replicates")
    else:
        if scenario.focal_size is None:
            scenario = replace(scenario, focal_size=100)
        rows = sim.run_test_calibration(scenario, args.deltas, alpha=args.alpha, config=config)
        write_csv(out / "calibration.csv", *sim.calibration_table(rows))
        for r in rows:
            print(f"{r.test:6s} delta={r.delta:+g}: rejection rate {r.reject:.3f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gplmprof", description="Provider profiling with neural-network "
                                                                   "risk adjustment.")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--input", required=True, help="panel CSV: provider_id, outcome, covariates...")
        p.add_argument("--categorical", type=lambda s: [c for c in s.split(",") if c], default=[],
                       help="comma-separated covariate columns to one-hot encode")

    p = sub.add_parser("fit", help="fit the model and save an artifact")
    data_args(p)
    p.add_argument("--output", required=True, help="artifact path (JSON)")
    p.add_argument("--family", choices=("gaussian", "bernoulli", "poisson"), default="bernoulli")
    p.add_argument("--hidden", type=_ints, default=[32, 16],
                   help="hidden layer sizes, e.g. 32,16; empty string for a linear model")
    p.add_argument("--algorithm", choices=ALGORITHMS, default="amsgrad")
    p.add_argument("--sampling", choices=SAMPLING, default="stratified")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--batch-fraction", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--max-iter", type=int, default=10000)
    p.add_argument("--retention", type=float, default=1.0, help="dropout retention probability")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    def model_args(p):
        data_args(p)
        p.add_argument("--model", required=True, help="artifact written by 'fit'")
        p.add_argument("--output", required=True)
        p.add_argument("--norm", default="median", help="median, mean or a number")
        p.add_argument("--min-size", type=int, default=15, help="skip providers with fewer rows")

    p = sub.add_parser("profile", help="exact tests and intervals for every provider")
    model_args(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--alpha1", type=float, default=None, help="lower-tail share of alpha (default alpha/2)")
    p.add_argument("--no-ci", action="store_true", help="skip confidence intervals")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("funnel", help="funnel-plot data and optional SVG")
    model_args(p)
    p.add_argument("--alpha", type=_floats, default=[0.05, 0.002], help="comma-separated levels")
    p.add_argument("--tau", type=_floats, default=[1.0], help="comma-separated targets")
    p.add_argument("--overdispersion", action="store_true", help="add empirical-null adjusted limits")
    p.add_argument("--svg", default=None, help="write an SVG funnel plot here")
    p.set_defaults(func=cmd_funnel)

    p = sub.add_parser("simulate", help="simulation studies")
    p.add_argument("--table", choices=("1", "2", "3", "calibration"), required=True)
    p.add_argument("--scenario", default="nonlinear-m100-rho0-nu50")
    p.add_argument("--replicates", type=int, default=50)
    p.add_argument("--fits", type=int, default=5, help="fits per panel in the optimizer comparison")
    p.add_argument("--sgd", action="store_true", help="include plain SGD in the optimizer comparison")
    p.add_argument("--deltas", type=_floats, default=[0.0], help="focal effect shifts for calibration")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--output-dir", default=".")
    p.set_defaults(func=cmd_simulate)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("alpha", "tau"):
        values = getattr(args, name, None)
        values = values if isinstance(values, list) else [values] if values is not None else []
        if name == "tau" and any(v <= 0 for v in values):
            return _fail("usage", "tau must be positive", EXIT_USAGE)
        if name == "alpha" and any(not 0 < v < 1 for v in values):
            return _fail("usage", "alpha must lie in (0, 1)", EXIT_USAGE)
    try:
        return args.func(args)
    except CommandError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except PanelParseError as exc:
        print(json.dumps(exc.as_dict()), file=sys.stderr)
        return EXIT_INPUT
    except ArtifactError as exc:
        return _fail("artifact", str(exc), EXIT_INPUT)
    except FloatingPointError as exc:
        return _fail("numeric", str(exc), EXIT_NUMERIC)
    except ValueError as exc:
        return _fail("value", str(exc), EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())
