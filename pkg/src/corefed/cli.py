"""Command-line front end: generate, train, audit, report.

Exit codes: 0 success, 2 configuration or input error, 3 utility violation
during training, 4 oracle solver did not converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import audit, data, federation, solver, utility
from .errors import CoreFedError, NonPositiveUtility, NotConverged
from .federation import Aggregator, RoundConfig
from .models import ModelSpec
from .runspec import ConfigError, RunSpec, load_runspec
from .utility import AgentProfile, UtilityConfig

logger = logging.getLogger("corefed")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_UTILITY, EXIT_NOT_CONVERGED = 0, 2, 3, 4
DISPLAY = {"fedavg": "FedAvg", "corefed": "CoreFed", "weighted-corefed": "Weighted-CoreFed", "oracle": "Oracle"}


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- generate

def _build_dataset(rs: RunSpec):
    src, d, kind = rs.data["source"], rs.data, rs.model["kind"]
    if src == "synthetic_regression":
        dim = d["dim"]
        true_theta = d.get("true_theta")
        if true_theta is None:
            true_theta = np.random.default_rng([rs.seed, 0]).standard_normal(dim)
        return data.gen_synthetic_regression(d["n"], dim, true_theta, float(d.get("noise_sigma", 0.1)), rs.seed), None
    if src == "synthetic_classification":
        n_classes = int(d.get("n_classes", 2))
        if kind == "logreg" and n_classes != 2:
            raise ConfigError("data.n_classes", "logreg needs exactly 2 classes")
        if kind == "mlp" and n_classes != rs.model["layer_dims"][-1]:
            raise ConfigError("model.layer_dims", "last entry must equal data.n_classes")
        ds = data.gen_synthetic_classification(
            d["n"], d["dim"], n_classes, float(d.get("separation", 2.0)), rs.seed, signed=kind == "logreg"
        )
        return ds, ds.targets
    path = Path(d["path"])
    if not path.is_absolute():
        path = rs.base_dir / path
    ds = data.load_csv(path, d["target"], bool(d.get("normalize", False)), binary=kind == "logreg")
    return ds, (None if kind == "linreg" else ds.targets)


def cmd_generate(rs: RunSpec) -> int:
    ds, labels = _build_dataset(rs)
    group = labels if labels is not None else np.zeros(len(ds))
    plan, parts = data.dirichlet_partition(ds, rs.n_agents, rs.dirichlet_alpha, rs.seed, labels=group, strict=True)
    sigmas = rs.noise_sigmas or (0.0,) * rs.n_agents
    parts = [data.add_gaussian_noise(p, float(s), [rs.seed, 1, i]) for i, (p, s) in enumerate(zip(parts, sigmas))]
    out = rs.out_dir / "data"
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(parts):
        data.save_dataset_csv(out / f"agent_{i}.csv", p)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": rs.seed,
        "dirichlet_alpha": rs.dirichlet_alpha,
        "n_agents": rs.n_agents,
        "total": len(ds),
        "sizes": [int(s) for s in plan.sizes],
        "labels": [float(v) for v in plan.labels],
        "proportions": plan.proportions.tolist(),
        "counts": plan.counts.tolist(),
        "noise_sigmas": [float(s) for s in sigmas],
        "input_dim": ds.dim,
        "files": [f"data/agent_{i}.csv" for i in range(rs.n_agents)],
    }
    _write_json(rs.out_dir / "partition.json", manifest)
    print(f"wrote {rs.n_agents} agent files ({', '.join(str(s) for s in manifest['sizes'])} samples) to {out}")
    return EXIT_OK


# ------------------------------------------------------------------- train

def _model_spec(rs: RunSpec, input_dim: int) -> ModelSpec:
    m = rs.model
    if m["kind"] == "linreg":
        return ModelSpec.linreg(input_dim)
    if m["kind"] == "logreg":
        return ModelSpec.logreg(input_dim, float(m.get("alpha", 1.0)))
    return ModelSpec.mlp(input_dim, m["layer_dims"])


def _solver_config(rs: RunSpec, spec: ModelSpec) -> solver.SolverConfig:
    opts = {k: rs.solver[k] for k in ("max_iters", "grad_tol", "domain_radius") if k in rs.solver}
    return solver.SolverConfig.for_spec(spec, seed=rs.seed, **opts)


def _load_agents(rs: RunSpec):
    manifest_path = rs.out_dir / "partition.json"
    if not manifest_path.exists():
        raise ConfigError("out", f"{manifest_path} not found; run 'generate' first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest["n_agents"] != rs.n_agents:
        raise ConfigError("n_agents", f"config says {rs.n_agents}, generated data has {manifest['n_agents']}")
    parts = [data.load_dataset_csv(rs.out_dir / f) for f in manifest["files"]]
    weights = rs.weights or (1.0,) * rs.n_agents
    agents = [AgentProfile(i, p, weight=float(w)) for i, (p, w) in enumerate(zip(parts, weights))]
    return agents, _model_spec(rs, manifest["input_dim"])


def _resolve_caps(rs: RunSpec, spec: ModelSpec, agents):
    ucfg = UtilityConfig(safety=float(rs.cap_safety))
    if rs.caps == "auto":
        caps = utility.calibrate_caps(spec, agents, solver.cap_probes(spec, agents, _solver_config(rs, spec)), ucfg)
    elif isinstance(rs.caps, tuple):
        caps = np.array(rs.caps, dtype=float)
    else:
        caps = np.full(len(agents), float(rs.caps))
    return utility.with_caps(agents, caps), ucfg


def _write_run(run_dir: Path, method: str, spec, theta, agents, rounds, ucfg, trace=None, extra=None):
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        utils = utility.agent_utilities(spec, theta, agents, ucfg)
    except NonPositiveUtility as exc:
        exc.round_index = rounds
        raise
    federation.save_checkpoint(
        run_dir / "checkpoint.json", theta, spec, rounds,
        method=method,
        agent_ids=[a.id for a in agents],
        caps=[a.cap for a in agents],
        weights=[a.weight for a in agents],
        losses=utility.agent_losses(spec, theta, agents).tolist(),
        **(extra or {}),
    )
    if trace is not None:
        trace.write_jsonl(run_dir / "trace.jsonl")
    header = ["schema_version", "method"] + [f"agent_{a.id}" for a in agents] + ["u_average", "u_multi"]
    row = [SCHEMA_VERSION, method] + [repr(float(u)) for u in utils] + [
        repr(float(np.mean(utils))), repr(float(np.prod(utils)))]
    with open(run_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerow(row)
    return utils


def cmd_train(rs: RunSpec, oracle: bool = False) -> int:
    agents, spec = _load_agents(rs)
    agents, ucfg = _resolve_caps(rs, spec, agents)
    if oracle:
        weights_on = rs.aggregator == Aggregator.WEIGHTED_COREFED.value
        res = solver.maximize_nash(agents, spec, _solver_config(rs, spec), weights_on=weights_on, ucfg=ucfg, strict=True)
        utils = _write_run(rs.out_dir / "oracle", "oracle", spec, res.theta_star, agents, res.iterations, ucfg,
                           extra={"grad_norm": res.grad_norm, "objective": res.objective})
        print(f"oracle: {res.iterations} iterations, residual {res.grad_norm:.3g}, utilities {np.round(utils, 4).tolist()}")
        return EXIT_OK
    cfg = RoundConfig(
        total_rounds=rs.rounds, local_epochs=rs.local_epochs, learning_rate=float(rs.learning_rate),
        clients_per_round=rs.clients_per_round, batch_size=rs.batch_size, aggregator=rs.aggregator, seed=rs.seed,
    )
    theta0 = solver.project(solver._default_start(spec, _solver_config(rs, spec)), None)
    theta, trace = federation.run_rounds(agents, spec, cfg, theta0, ucfg)
    utils = _write_run(rs.out_dir / cfg.aggregator.value, cfg.aggregator.value, spec, theta, agents, rs.rounds, ucfg, trace)
    print(f"{cfg.aggregator.value}: {rs.rounds} rounds, utilities {np.round(utils, 4).tolist()}, "
          f"U(Average) {np.mean(utils):.4f}, U(Multi) {np.prod(utils):.4f}")
    return EXIT_OK


# ------------------------------------------------------------------- audit

def _run_dir(rs: RunSpec, name: str) -> Path:
    p = Path(name)
    if p.suffix == ".json":
        return p.parent
    return p if p.is_dir() and (p / "checkpoint.json").exists() else rs.out_dir / name


def _load_run(rs: RunSpec, name: str):
    ckpt = _run_dir(rs, name) / "checkpoint.json"
    if not ckpt.exists():
        raise ConfigError("ref/alt", f"no checkpoint at {ckpt}")
    return federation.load_checkpoint(ckpt)


def cmd_audit(rs: RunSpec, ref: str, alt: str, proportionality=False, pseudo_core=False, k=2.0,
              probe_radius=1.0, n_probes=200, weighted=False) -> int:
    theta_ref, spec, h_ref = _load_run(rs, ref)
    theta_alt, spec_alt, h_alt = _load_run(rs, alt)
    if h_ref["agent_ids"] != h_alt["agent_ids"] or h_ref["caps"] != h_alt["caps"]:
        raise ConfigError("ref/alt", "runs do not share the same agents and caps")
    if spec != spec_alt:
        raise ConfigError("ref/alt", "runs use different model specs")
    agents, _ = _load_agents(rs)
    if [a.id for a in agents] != h_ref["agent_ids"]:
        raise ConfigError("ref/alt", "checkpoint agents do not match the generated data")
    agents = [AgentProfile(a.id, a.dataset, cap=c, weight=w)
              for a, c, w in zip(agents, h_ref["caps"], h_ref["weights"])]
    u_ref = utility.agent_utilities(spec, theta_ref, agents)
    u_alt = utility.agent_utilities(spec, theta_alt, agents)
    weights = np.array([a.weight for a in agents]) if weighted else None
    cert = audit.core_ratio(u_ref, u_alt, weights)
    report = {
        "schema_version": SCHEMA_VERSION,
        "ref": ref, "alt": alt,
        "u_ref": u_ref.tolist(), "u_alt": u_alt.tolist(),
        "ratio_sum": cert.ratio_sum, "threshold": cert.threshold, "holds": cert.holds,
        "verdict": cert.verdict(),
        "alt_pareto_dominates_ref": audit.check_pareto_dominated(u_ref, u_alt),
        "ref_pareto_dominates_alt": audit.check_pareto_dominated(u_alt, u_ref),
    }
    lines = [
        f"sum_i u_i({alt}) / u_i({ref}) = {cert.verdict()}   [raw {cert.ratio_sum!r}]",
        f"certificate {'holds' if cert.holds else 'FAILS'} (threshold {cert.threshold:g})",
        f"{alt} Pareto-dominates {ref}: {report['alt_pareto_dominates_ref']}",
    ]
    if proportionality:
        cfg = _solver_config(rs, spec)
        best = np.array([solver.maximize_agent_utility(a, spec, cfg).objective for a in agents])
        verdicts = audit.check_proportionality(u_ref, best, weights)
        report["u_best"] = best.tolist()
        report["proportional"] = verdicts.tolist()
        for a, u, b, ok in zip(agents, u_ref, best, verdicts):
            lines.append(f"agent {a.id}: u={u:.4f} best={b:.4f} share={u / b:.3f} -> {'pass' if ok else 'FAIL'}")
    if pseudo_core:
        grad_norm = solver.fixed_point_residual(spec, theta_ref, agents)
        pc = audit.pseudo_core_report(spec, theta_ref, agents, u_ref, grad_norm, k, probe_radius, n_probes, rs.seed)
        report["pseudo_core"] = {
            "radius": pc.radius, "beta_lower_bound": pc.beta, "probe_radius": pc.probe_radius,
            "n_probes": pc.n_probes, "grad_norm": pc.grad_norm, "k": pc.k, "within_probe_ball": pc.within_probe_ball,
        }
        flag = "" if pc.within_probe_ball else "  (radius exceeds the probed ball; beta estimate does not cover it)"
        lines.append(f"pseudo-core radius d={pc.radius:.4g} for k={k:g} "
                     f"(beta >= {pc.beta:.4g} from {n_probes} probes, |grad|={grad_norm:.3g}){flag}")
    name = f"audit_{Path(ref).stem}_vs_{Path(alt).stem}.json"
    _write_json(rs.out_dir / name, report)
    print("\n".join(lines))
    return EXIT_OK


def cmd_audit_matrix(path: str, ref_col: str, weighted: bool = False) -> int:
    m = audit.UtilityMatrix.from_csv(path)
    if not weighted:
        m = audit.UtilityMatrix(m.values, None, m.candidates)
    try:
        ref = m.column(ref_col) if not ref_col.isdigit() else int(ref_col)
    except ValueError:
        raise ConfigError("ref-col", f"{ref_col!r} is not a candidate in {list(m.candidates)}")
    u_ref = m.values[:, ref]
    for j, name in enumerate(m.candidates):
        cert = audit.core_ratio(u_ref, m.values[:, j], m.weights)
        print(f"{name}: {cert.verdict()}")
    hit = audit.find_blocking_coalition(m, ref)
    if hit is None:
        print(f"no blocking coalition against {m.candidates[ref]}")
    else:
        S, c = hit
        print(f"blocking coalition {{{', '.join(str(i) for i in S)}}} with candidate {m.candidates[c]}")
    return EXIT_OK


# ------------------------------------------------------------------ report

def _read_summary(run_dir: Path):
    with open(run_dir / "summary.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, row = rows[0], rows[1]
    utils = [float(v) for h, v in zip(header, row) if h.startswith("agent_")]
    return row[1], np.array(utils)


def render_table(rows, ratio_text: str) -> str:
    """Fixed-width table: one row per method, two-decimal utilities."""
    n = len(rows[0][1])
    head = ["Method"] + [f"Agent {i}" for i in range(n)] + ["U(Average)", "U(Multi)", "sum u(alt)/u(ref)"]
    body = []
    for k, (method, u) in enumerate(rows):
        cells = [DISPLAY.get(method, method)] + [f"{v:.2f}" for v in u] + [f"{np.mean(u):.2f}", f"{np.prod(u):.2f}"]
        cells.append(ratio_text if k == 0 else "")
        body.append(cells)
    widths = [max(len(r[j]) for r in [head] + body) for j in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(head)] + [fmt(r) for r in body])


def cmd_report(rs: RunSpec, ref: str = "corefed", alt: str = "fedavg") -> int:
    runs = []
    for name in (alt, ref):
        d = rs.out_dir / name
        if not (d / "summary.csv").exists():
            raise ConfigError("out", f"no summary for {name!r} under {rs.out_dir}; train it first")
        runs.append(_read_summary(d))
    cert = audit.core_ratio(runs[1][1], runs[0][1])
    print(render_table(runs, cert.verdict()))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = len(runs[0][1])
    w.writerow(["schema_version", "method"] + [f"agent_{i}" for i in range(n)] + ["u_average", "u_multi", "ratio_sum", "threshold"])
    for method, u in runs:
        w.writerow([SCHEMA_VERSION, method] + [repr(float(v)) for v in u]
                   + [repr(float(np.mean(u))), repr(float(np.prod(u))), repr(cert.ratio_sum), repr(cert.threshold)])
    (rs.out_dir / "report.csv").write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corefed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run configuration (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--aggregator", choices=[a.value for a in Aggregator], help="override the aggregator")

    common(sub.add_parser("generate", help="synthesize or load data and split it across agents"))
    p = sub.add_parser("train", help="run federated training and write checkpoint, trace and summary")
    common(p)
    p.add_argument("--oracle", action="store_true", help="solve the welfare program centrally instead")
    p = sub.add_parser("audit", help="certify one trained model against another, or audit a utility matrix")
    common(p, config_required=False)
    p.add_argument("--ref", default="corefed", help="run being certified (name under --out or a checkpoint path)")
    p.add_argument("--alt", default="fedavg", help="alternative run")
    p.add_argument("--matrix", help="utility-matrix CSV instead of trained runs")
    p.add_argument("--ref-col", help="reference column of the utility matrix")
    p.add_argument("--weighted", action="store_true", help="use agent weights")
    p.add_argument("--proportionality", action="store_true", help="solve per-agent optima and check shares")
    p.add_argument("--pseudo-core", action="store_true", help="report the local pseudo-core radius")
    p.add_argument("--k", type=float, default=2.0)
    p.add_argument("--probe-radius", type=float, default=1.0)
    p.add_argument("--probes", type=int, default=200)
    p = sub.add_parser("report", help="print the utility table for two trained runs")
    common(p)
    p.add_argument("--ref", default="corefed")
    p.add_argument("--alt", default="fedavg")
    return parser


def _dispatch(args) -> int:
    if args.command == "audit" and args.matrix:
        if not args.ref_col:
            raise ConfigError("ref-col", "--matrix needs --ref-col")
        return cmd_audit_matrix(args.matrix, args.ref_col, args.weighted)
    if not args.config:
        raise ConfigError("config", "--config is required")
    rs = load_runspec(args.config).with_overrides(args.seed, args.out, args.aggregator)
    if args.command == "generate":
        return cmd_generate(rs)
    if args.command == "train":
        return cmd_train(rs, oracle=args.oracle)
    if args.command == "audit":
        return cmd_audit(rs, args.ref, args.alt, args.proportionality, args.pseudo_core, args.k,
                         args.probe_radius, args.probes, args.weighted)
    return cmd_report(rs, args.ref, args.alt)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonPositiveUtility as exc:
        print(f"error: utility violation: {exc}", file=sys.stderr)
        return EXIT_UTILITY
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (CoreFedError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
