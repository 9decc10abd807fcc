"""Command-line pipelines: generate, thin, cluster, diagnose, sweep."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import INITS, ClusterState, FcmConfig, run_restarts
from .diagnostics import (
    confidence_counts,
    detect_center_collapse,
    entropy_field,
    hard_partition,
    k_stability_sweep,
    m_stability_sweep,
    max_likelihood_trajectories,
)
from .ensemble import atomic_write, load_ensemble, read_manifest, save_ensemble, thin_ensemble
from .flows import FLOW_KINDS, FlowSpec, integrate_ensemble
from .geometry import KINDS, GeometryConfig, from_working, to_working

log = logging.getLogger("coherent_sets")


class CliError(Exception):
    pass


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("RUN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"RUN_SEED must be an integer, got {env!r}") from None
    return 0


def _threads(n: int) -> int:
    if n == 0:
        return os.cpu_count() or 1
    return n


# ----------------------------------------------------------------------------
# generate / thin


def cmd_generate(args) -> None:
    seed = _resolve_seed(args.seed)
    if args.flow == "interval-map-3":
        t_end = float(args.iters if args.iters is not None else 9)
        stride = 1.0
    else:
        t_end = args.tau if args.tau is not None else 1.0
        stride = args.stride
    spec = FlowSpec(
        kind=args.flow,
        n=args.n,
        t_end=t_end,
        seeding=args.seeding,
        seed=seed,
        output_stride=stride,
        integrator_step=args.step,
        A=args.A,
        delta=args.delta,
        omega=args.omega,
    )
    e = integrate_ensemble(spec)
    save_ensemble(e, args.out, format=args.format, extra_manifest={"flow": spec.to_dict(), "tool_version": __version__})
    print(f"wrote {e.n} trajectories x {e.num_times} slices x d={e.d} to {args.out}")


def cmd_thin(args) -> None:
    if not 0.0 <= args.fraction < 1.0:
        raise CliError(f"--fraction must lie in [0, 1), got {args.fraction}")
    seed = _resolve_seed(args.seed)
    e = load_ensemble(args.input)
    manifest = read_manifest(args.input)
    fmt = args.format or manifest.get("format", "long")
    thinned = thin_ensemble(e, args.fraction, seed)
    extra = {k: v for k, v in manifest.items() if k not in ("format", "d", "n", "num_times", "coordinates", "mass_column")}
    extra["thinning"] = {"fraction": args.fraction, "seed": seed, "source": str(args.input)}
    save_ensemble(thinned, args.out, format=fmt, extra_manifest=extra)
    kept = int(thinned.mask.sum())
    print(f"kept {kept} of {int(e.mask.sum())} observations; wrote {args.out}")


# ----------------------------------------------------------------------------
# cluster


def _geometry(args, e) -> GeometryConfig:
    kind = args.geometry
    if kind == "ellipsoid":
        if args.ellipsoid_lengths is None:
            raise CliError("ellipsoid geometry needs --ellipsoid-lengths")
        lengths = np.asarray(args.ellipsoid_lengths, dtype=float)
        if args.ellipsoid_axes is None:
            axes = np.eye(lengths.size)
        else:
            axes = np.asarray(args.ellipsoid_axes, dtype=float).reshape(lengths.size, lengths.size)
        return GeometryConfig(kind, ellipsoid_axes=axes, ellipsoid_lengths=lengths)
    g = GeometryConfig(kind, sphere_lift=(kind == "sphere" and e.coordinates == "lonlat-degrees"))
    g.check_dimension(e.d)
    return g


def _geometry_dict(g: GeometryConfig) -> dict:
    out = {"kind": g.kind, "sphere_lift": g.sphere_lift}
    if g.kind == "ellipsoid":
        out["ellipsoid_axes"] = g.ellipsoid_axes.tolist()
        out["ellipsoid_lengths"] = g.ellipsoid_lengths.tolist()
    return out


def _geometry_from_dict(d: dict) -> GeometryConfig:
    return GeometryConfig(
        d["kind"],
        ellipsoid_axes=d.get("ellipsoid_axes"),
        ellipsoid_lengths=d.get("ellipsoid_lengths"),
        sphere_lift=d.get("sphere_lift", False),
    )


def _fcm_config(args) -> FcmConfig:
    return FcmConfig(
        K=args.k,
        m=args.m,
        init=args.init,
        seed=_resolve_seed(args.seed),
        tol=args.tol,
        max_iter=args.max_iter,
        normalize_by_support=args.normalize_by_support,
        use_masses=args.use_masses,
    )


def write_memberships(path, ids, U) -> None:
    def w(fh):
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["trajectory_id", "k", "u"])
        for i, tid in enumerate(ids):
            for k in range(U.shape[1]):
                out.writerow([tid, k, _fmt(U[i, k])])

    atomic_write(path, w)


def write_centers(path, centers_native, defined) -> None:
    K, T, d = centers_native.shape

    def w(fh):
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["k", "t"] + [f"c{j}" for j in range(d)] + ["defined"])
        for k in range(K):
            for t in range(T):
                vals = [_fmt(v) if defined[k, t] else "" for v in centers_native[k, t]]
                out.writerow([k, t] + vals + [int(defined[k, t])])

    atomic_write(path, w)


def read_memberships(path, ids) -> np.ndarray:
    index = {tid: i for i, tid in enumerate(ids)}
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            entries.append((index[row["trajectory_id"]], int(row["k"]), float(row["u"])))
    K = max(k for _, k, _ in entries) + 1
    U = np.zeros((len(ids), K))
    for i, k, u in entries:
        U[i, k] = u
    return U


def read_centers(path, num_times, d) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    K = max(int(r["k"]) for r in rows) + 1
    C = np.full((K, num_times, d), np.nan)
    defined = np.zeros((K, num_times), dtype=bool)
    for r in rows:
        k, t = int(r["k"]), int(r["t"])
        if int(r["defined"]):
            C[k, t] = [float(r[f"c{j}"]) for j in range(d)]
            defined[k, t] = True
    return C, defined


def _cluster(input_path, g_dict, cfg_dict, restarts, threads, out_dir, argv_echo) -> dict:
    started = time.perf_counter()
    e = load_ensemble(input_path)
    g = _geometry_from_dict(g_dict)
    g.check_dimension(e.d)
    cfg = FcmConfig(**cfg_dict)
    state = run_restarts(e, g, cfg, restarts=restarts, workers=_threads(threads))
    elapsed = time.perf_counter() - started

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_memberships(out / "memberships.csv", e.ids, state.memberships)
    centers = from_working(state.centers, g)
    write_centers(out / "centers.csv", centers, state.center_defined)

    def w_hist(fh):
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iteration", "objective"])
        for it, J in enumerate(state.objective_history, start=1):
            wr.writerow([it, _fmt(J)])

    atomic_write(out / "objective.csv", w_hist)
    manifest = {
        "tool": "coherent_sets",
        "tool_version": __version__,
        "command": argv_echo,
        "input": str(Path(input_path).resolve()),
        "geometry": g_dict,
        "config": cfg_dict,
        "restarts": restarts,
        "runtime_seconds": elapsed,
        "convergence": {
            "iterations": state.iterations,
            "converged": state.converged,
            "objective": state.objective,
            "stalled_slices": len(state.stalled_slices),
        },
        "outputs": ["memberships.csv", "centers.csv", "objective.csv", "manifest.json"],
    }
    atomic_write(out / "manifest.json", lambda fh: json.dump(manifest, fh, indent=2))
    return manifest


def cmd_cluster(args) -> None:
    if args.from_manifest:
        with open(args.from_manifest) as fh:
            prior = json.load(fh)
        summary = _cluster(
            prior["input"], prior["geometry"], prior["config"], prior.get("restarts", 1), args.threads,
            args.out, prior.get("command"),
        )
    else:
        if args.input is None:
            raise CliError("cluster needs --input or --from-manifest")
        e = load_ensemble(args.input)
        g = _geometry(args, e)
        cfg = _fcm_config(args)
        cfg_dict = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
        summary = _cluster(args.input, _geometry_dict(g), cfg_dict, args.restarts, args.threads, args.out, sys.argv[1:])
    conv = summary["convergence"]
    print(
        f"K={summary['config']['K']} m={summary['config']['m']}: {conv['iterations']} iterations, "
        f"converged={conv['converged']}, objective={conv['objective']:.10g}; wrote {args.out}"
    )


# ----------------------------------------------------------------------------
# diagnose / sweep


def load_run(run_dir) -> tuple:
    run_dir = Path(run_dir)
    with open(run_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    e = load_ensemble(manifest["input"])
    g = _geometry_from_dict(manifest["geometry"])
    U = read_memberships(run_dir / "memberships.csv", e.ids)
    native, defined = read_centers(run_dir / "centers.csv", e.num_times, e.d)
    centers = np.nan_to_num(to_working(np.where(defined[..., None], native, _placeholder(g, e.d)), g))
    state = ClusterState(
        centers=centers,
        center_defined=defined,
        memberships=U,
        iterations=manifest["convergence"]["iterations"],
        converged=manifest["convergence"]["converged"],
        objective_history=[manifest["convergence"]["objective"]],
    )
    return e, g, state, manifest


def _placeholder(g: GeometryConfig, d: int) -> np.ndarray:
    # any valid native point; used only on undefined slices
    if g.kind == "sphere" and not g.sphere_lift:
        return np.eye(d)[0]
    return np.zeros(d)


def cmd_diagnose(args) -> None:
    e, g, state, _ = load_run(args.input_run)
    out = Path(args.out or args.input_run)
    h = entropy_field(state)
    labels = hard_partition(state)

    def w_entropy(fh):
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["trajectory_id", "h"])
        for tid, v in zip(e.ids, h):
            wr.writerow([tid, _fmt(v)])

    def w_labels(fh):
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["trajectory_id", "label"])
        for tid, v in zip(e.ids, labels):
            wr.writerow([tid, int(v)])

    report = detect_center_collapse(state, e, g, ratio=args.collapse_ratio)
    ml = max_likelihood_trajectories(state)
    summary = {
        "ml_trajectories": [{"k": k, "index": int(i), "trajectory_id": e.ids[i]} for k, i in enumerate(ml)],
        "confidence_counts": {str(c): n for c, n in confidence_counts(state, args.confidence).items()},
        "mean_entropy": float(h.mean()),
        "n": e.n,
    }
    atomic_write(out / "entropy.csv", w_entropy)
    atomic_write(out / "labels.csv", w_labels)
    atomic_write(out / "collapse.json", lambda fh: json.dump(report.to_dict(), fh, indent=2))
    atomic_write(out / "summary.json", lambda fh: json.dump(summary, fh, indent=2))
    print(f"mean entropy {h.mean():.4f}; {len(report.pairs)} collapsed center pair(s); wrote {out}")


def cmd_sweep(args) -> None:
    e = load_ensemble(args.input)
    g = _geometry(args, e)
    base = _fcm_config(args)
    workers = _threads(args.threads)
    if args.vary == "m":
        rows = m_stability_sweep(e, g, base, args.values, restarts=args.restarts, workers=workers)
        header = ["m", "k", "ml_index", "ml_id", "t0"] + [f"x{j}" for j in range(e.d)] + ["drift", "objective"]
        table = []
        for row in rows:
            for k in range(len(row.ml_trajectory)):
                i = int(row.ml_trajectory[k])
                drift = "" if row.drift is None else _fmt(row.drift[k])
                table.append(
                    [_fmt(row.m), k, i, e.ids[i], int(row.t0[k])]
                    + [_fmt(v) for v in row.positions[k]]
                    + [drift, _fmt(row.objective)]
                )
    else:
        ks = [int(v) for v in args.values]
        if any(v != k for v, k in zip(args.values, ks)):
            raise CliError("--vary k needs integer values")
        rows = k_stability_sweep(
            e, g, base, ks, collapse_ratio=args.collapse_ratio, confidence=args.confidence,
            restarts=args.restarts, workers=workers,
        )
        header = ["K", "mean_entropy", "median_entropy", "max_entropy", "collapse_pairs"]
        header += [f"count_u_gt_{c:g}" for c in args.confidence] + ["objective", "iterations", "converged"]
        table = []
        for row in rows:
            counts = confidence_counts_for(row, args.confidence)
            table.append(
                [row.K, _fmt(row.mean_entropy), _fmt(row.median_entropy), _fmt(row.max_entropy), len(row.collapse.pairs)]
                + counts
                + [_fmt(row.objective), row.iterations, int(row.converged)]
            )

    def w(fh):
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(table)

    atomic_write(args.out, w)
    print(f"wrote {len(table)} row(s) to {args.out}")


def confidence_counts_for(row, thresholds) -> list[int]:
    return [row.confidence.get(float(c), 0) for c in thresholds]


# ----------------------------------------------------------------------------
# parser


def _add_cluster_flags(p) -> None:
    p.add_argument("--input", help="ensemble CSV (long or wide)")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--m", type=float, default=2.0)
    p.add_argument("--geometry", choices=KINDS, default="euclidean")
    p.add_argument("--ellipsoid-lengths", type=_float_list)
    p.add_argument("--ellipsoid-axes", type=_float_list, help="row-major d x d matrix of axis directions")
    p.add_argument("--init", choices=INITS, default="random-memberships")
    p.add_argument("--seed", type=int, help="defaults to $RUN_SEED, then 0")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--normalize-by-support", action="store_true")
    p.add_argument("--use-masses", action="store_true")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--threads", type=int, default=1, help="worker threads, 0 = all cores")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coherent-sets", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="integrate a synthetic flow into an ensemble file")
    g.add_argument("--flow", choices=FLOW_KINDS, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--tau", type=float, help="flow duration (continuous flows)")
    g.add_argument("--iters", type=int, help="iterate count (interval map)")
    g.add_argument("--stride", type=float, default=0.1)
    g.add_argument("--step", type=float, default=1e-2, help="RK4 step")
    g.add_argument("--seeding", choices=("uniform-random", "uniform-grid"), default="uniform-random")
    g.add_argument("--seed", type=int)
    g.add_argument("--A", type=float, default=0.25)
    g.add_argument("--delta", type=float, default=0.25)
    g.add_argument("--omega", type=float, default=2.0 * np.pi)
    g.add_argument("--format", choices=("long", "wide"), default="long")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("thin", help="randomly delete observations")
    t.add_argument("--input", required=True)
    t.add_argument("--fraction", type=float, required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--format", choices=("long", "wide"))
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_thin)

    c = sub.add_parser("cluster", help="fuzzy c-means on the space-time embedding")
    _add_cluster_flags(c)
    c.add_argument("--from-manifest", help="re-run the configuration recorded in a manifest.json")
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_cluster)

    d = sub.add_parser("diagnose", help="entropy, labels and center collapse for a finished run")
    d.add_argument("--input-run", required=True, help="directory written by 'cluster'")
    d.add_argument("--collapse-ratio", type=float, default=0.05)
    d.add_argument("--confidence", type=_float_list, default=[0.9, 0.95])
    d.add_argument("--out", help="output directory (defaults to the run directory)")
    d.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("sweep", help="stability over m or K")
    _add_cluster_flags(s)
    s.add_argument("--vary", choices=("m", "k"), required=True)
    s.add_argument("--values", type=_float_list, required=True)
    s.add_argument("--collapse-ratio", type=float, default=0.05)
    s.add_argument("--confidence", type=_float_list, default=[0.9, 0.95])
    s.add_argument("--out", required=True, help="CSV report")
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "sweep" and args.input is None:
        parser.error("sweep needs --input")
    try:
        args.func(args)
    except (CliError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
