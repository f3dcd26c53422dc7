"""Command line front end.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose keys
are the long option names (dashes or underscores).  Environment variables
``STAIRCASE_<KEY>`` override the file; explicit flags override both.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .domain import snap_to_domain
from .estimation import Estimator, observe
from .experiments import MECHANISM_IDS, MECHANISMS, ExperimentConfig, bench, run_distribution, truth_for
from .formats import (
    RunManifest,
    domain_from_points,
    domain_text,
    estimate_text,
    od_text,
    read_domain,
    read_points_csv,
    read_scenario,
    read_table,
    scenario_text,
    write_table,
)
from .geo import encode
from .mechanism import perturb_indices, precompute
from .metrics import reports_to_csv
from .seeding import STREAM_PERTURB, STREAM_TRUTH, make_rng
from .synthetic import sample_users, synthetic_domain

log = logging.getLogger("staircase_ldp")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out += range(int(a), int(b) + 1)
        elif part:
            out.append(int(part))
    return tuple(out)


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _versions() -> dict:
    return {"staircase_ldp": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _load_domain(args):
    if getattr(args, "domain", None):
        return read_domain(args.domain)
    return synthetic_domain(args.d, args.domain_seed)


# --- subcommands -----------------------------------------------------------------------------


def cmd_build_domain(args) -> int:
    pts = read_points_csv(args.csv)
    dom = domain_from_points(pts, level=args.level)
    text = domain_text(dom)
    if args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
    log.info("domain of %d cells, %d-bit codes after a %d-bit shared prefix", dom.d, dom.nbits, dom.prefix.nbits)
    return 0


def cmd_precompute(args) -> int:
    dom = _load_domain(args)
    t0 = time.perf_counter()
    log.info("precomputing d=%d epsilon=%g", dom.d, args.epsilon)
    table = precompute(dom, args.epsilon, m=args.m, isolate_input=not args.shared_first_group)
    log.info("m=%d c=%.6g epsilon achieved %.9g in %.2fs", table.m, table.c, table.epsilon_achieved, time.perf_counter() - t0)
    write_table(table, args.output)
    return 0


def cmd_run(args) -> int:
    out = Path(args.out)
    dom = _load_domain(args)
    truth = None
    snapped = 0
    if args.dataset:
        pts = read_points_csv(args.dataset)
        full = {dom.full_code(i): i for i in range(dom.d)}
        idx = []
        level = (dom.prefix.nbits + dom.nbits) // 2
        for p in pts:
            code = encode(p, level)
            if code in full:
                idx.append(full[code])
            else:
                snapped += 1
                idx.append(snap_to_domain(dom, code))
        truth = np.bincount(idx, minlength=dom.d) / len(idx)
    cfg = ExperimentConfig(
        mechanisms=_names(args.mechanisms),
        epsilons=_floats(args.epsilons),
        n=args.n,
        seeds=_ints(args.seeds),
        d=dom.d,
        dist=args.dist,
        zipf_s=args.zipf_s,
        knn_k=args.knn_k,
        truth=truth,
    )
    res = run_distribution(cfg, dom)
    csv_text = reports_to_csv(res.reports)
    _write(out, "metrics.csv", csv_text)
    if args.estimates:
        seed = cfg.seeds[0]
        x = sample_users(truth_for(cfg, dom.d), cfg.n, make_rng(seed, STREAM_TRUTH))
        for eps, table in res.tables.items():
            rng = make_rng(seed, STREAM_PERTURB, MECHANISM_IDS["srr"])
            est = Estimator(table).estimate(observe(dom.d, perturb_indices(table, x, rng)))
            _write(out, f"estimate_eps{eps:g}.csv", estimate_text(dom, est.p_hat, est.n, eps, est.residual))
    manifest = RunManifest(
        "run",
        {k: v for k, v in vars(args).items() if k != "func"},
        _versions(),
        {"domain": dom.hash, "metrics.csv": _sha(csv_text)},
        {"snapped": snapped, "seconds_per_user": res.seconds_per_user},
    )
    _write(out, "manifest.json", manifest.text())
    return 0


def cmd_od(args) -> int:
    from .metrics import l1 as l1_dist
    from .od import estimate_od, od_perturb_many, sparse_od_truth

    out = Path(args.out)
    dom = _load_domain(args)
    d = dom.d
    rows = ["epsilon,seed,l1"]
    last = None
    for eps in _floats(args.epsilons):
        half = precompute(dom, eps / 2)
        for seed in _ints(args.seeds):
            truth = sparse_od_truth(d, args.support, make_rng(args.truth_seed, STREAM_TRUTH, 5))
            flat = make_rng(seed, STREAM_TRUTH).choice(d * d, size=args.n, p=truth.ravel())
            no, nd = od_perturb_many(half, flat // d, flat % d, make_rng(seed, 31))
            est = estimate_od(half, no, nd, design=args.design, lam=args.lam)
            rows.append(f"{eps:g},{seed},{l1_dist(est.table.ravel(), truth.ravel()):.10g}")
            last = est
    _write(out, "od_metrics.csv", "\n".join(rows) + "\n")
    if last is not None:
        _write(out, "od_pairs.csv", od_text(dom, last.table))
    return 0


def cmd_navigate(args) -> int:
    from .navigation import route_deviation, simulate_fleet, synthetic_scenario, trip_time_deviation

    out = Path(args.out)
    if args.scenario:
        sc = read_scenario(args.scenario)
    else:
        sc = synthetic_scenario(seed=args.seed)
        _write(out, "scenario.txt", scenario_text(sc))
    thetas = _floats(args.thetas) if args.thetas else (sc.theta,)
    epsilons = _floats(args.epsilons) if args.epsilons else (sc.epsilon,)
    rows = ["epsilon,theta,vehicles,total_lambda,mean_lambda,spent,route_deviation,trip_time_deviation"]
    for eps in epsilons:
        sc.epsilon = eps
        table = precompute(sc.domain, eps)
        for theta in thetas:
            ref = simulate_fleet(sc, theta=theta, private=False)
            res = simulate_fleet(sc, theta=theta, table=table)
            rd = np.mean([route_deviation(a.route, b.route) for a, b in zip(ref.outcomes, res.outcomes)])
            td = np.mean([trip_time_deviation(a.trip_time, b.trip_time) for a, b in zip(ref.outcomes, res.outcomes)])
            spent = sum(o.spent for o in res.outcomes)
            rows.append(
                f"{eps:g},{theta:g},{len(res.outcomes)},{res.total_lambda},{res.mean_lambda:.6g},{spent:.6g},{rd:.6g},{td:.6g}"
            )
    _write(out, "navigation.csv", "\n".join(rows) + "\n")
    return 0


def cmd_bench(args) -> int:
    from .experiments import BenchRow

    dom = _load_domain(args)
    rows = bench(dom, _floats(args.epsilons), args.n)
    lines = [",".join(BenchRow.FIELDS)]
    for r in rows:
        lines.append(
            f"{r.epsilon:g},{r.mechanism},{r.c:.10g},{r.m},{r.epsilon_achieved:.10g},{r.mi_bound:.10g},{r.l1_bound:.10g}"
        )
    lines += [f"# {name}: not implemented" for name in ("olh-h", "pldp")]
    _write(Path(args.out), "bench.csv", "\n".join(lines) + "\n")
    return 0


def cmd_serve(args) -> int:
    from .estimation import Estimator
    from .service import Collector, CollectorServer, load_config

    cfg = load_config(args.config_file)
    if args.host:
        cfg.host = args.host
    if args.port is not None:
        cfg.port = args.port
    if not cfg.domain or not cfg.table:
        raise SystemExit("serve needs domain and table paths (config file or STAIRCASE_DOMAIN / STAIRCASE_TABLE)")
    dom = read_domain(cfg.domain)
    table = read_table(cfg.table, dom)
    server = CollectorServer(Collector(Estimator(table), cfg.low_confidence_below), cfg.host, cfg.port)
    server.start()
    print(f"listening on {server.host}:{server.port}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


# --- parser --------------------------------------------------------------------------------------


def _domain_flags(p):
    p.add_argument("--domain", help="domain file; a synthetic domain is generated when omitted")
    p.add_argument("--d", type=int, default=374, help="synthetic domain size")
    p.add_argument("--domain-seed", type=int, default=1, help="synthetic domain seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="staircase-ldp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("build-domain", help="encode a CSV of points into a domain file")
    p.add_argument("csv", help="'lat,lon' or 'user,seq,lat,lon,timestamp' rows")
    p.add_argument("-o", "--output", default="-", help="output path ('-' for stdout)")
    p.add_argument("--level", type=int, default=23, help="tile level")
    p.set_defaults(func=cmd_build_domain)

    p = sub.add_parser("precompute", help="build a scheme table for a budget")
    _domain_flags(p)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--m", type=int, default=None, help="force the number of groups")
    p.add_argument("--shared-first-group", action="store_true", help="let inputs share their first group")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("run", help="distribution-estimation experiment")
    _domain_flags(p)
    p.add_argument("--dataset", help="CSV of real points; their empirical distribution is the truth")
    p.add_argument("--mechanisms", default="srr,grr", help=f"comma list from {','.join(MECHANISMS)}")
    p.add_argument("--epsilons", default="1,3,5")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seeds", default="0", help="comma list or range a..b")
    p.add_argument("--dist", default="zipf", choices=("zipf", "uniform"))
    p.add_argument("--zipf-s", type=float, default=1.1)
    p.add_argument("--knn-k", type=int, default=0, help="also score k-NN lists (0 = off)")
    p.add_argument("--estimates", action="store_true", help="export one SRR estimate per epsilon")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("od", help="origin-destination experiment")
    _domain_flags(p)
    p.set_defaults(d=32)
    p.add_argument("--epsilons", default="1,3,6")
    p.add_argument("--n", type=int, default=200_000)
    p.add_argument("--seeds", default="0")
    p.add_argument("--support", type=int, default=20)
    p.add_argument("--truth-seed", type=int, default=0)
    p.add_argument("--design", default="joint", choices=("joint", "marginal"))
    p.add_argument("--lam", type=float, default=1e-3, help="penalty as a fraction of its smallest all-zero value")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_od)

    p = sub.add_parser("navigate", help="navigation simulation")
    p.add_argument("--scenario", help="scenario file; a synthetic one is generated when omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--thetas", default="", help="comma list of delay thresholds in seconds")
    p.add_argument("--epsilons", default="", help="comma list of per-update budgets")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_navigate)

    p = sub.add_parser("bench", help="closed-form SRR vs GRR table")
    _domain_flags(p)
    p.add_argument("--epsilons", default="1,1.5,2,2.5,3,3.5,4,4.5,5,5.5,6,6.5,7,7.5,8")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the collector")
    p.add_argument("--config-file", help="service config (host, port, domain, table, epoch_seconds)")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    for sp in sub.choices.values():
        if sp.prog.endswith("serve"):
            continue
        sp.add_argument("--config", help="key = value file supplying option defaults")
    return ap


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse twice: first to find the subcommand and config file, then with those defaults."""
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions}
    values = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        for lineno, raw in enumerate(Path(cfg_path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                parser.error(f"{cfg_path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            k = k.replace("-", "_")
            if k not in dests:
                parser.error(f"{cfg_path}:{lineno}: unknown option {k}")
            values[k] = v
    for dest in dests:
        env = os.environ.get("STAIRCASE_" + dest.upper())
        if env is not None:
            values[dest] = env
    if not values:
        return args
    typed = {}
    for a in sub._actions:
        if a.dest in values:
            raw = values[a.dest]
            if a.const is True or isinstance(a, argparse._StoreTrueAction):
                typed[a.dest] = raw.lower() in ("1", "true", "yes", "on")
            else:
                typed[a.dest] = a.type(raw) if a.type else raw
            a.required = False
    sub.set_defaults(**typed)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
