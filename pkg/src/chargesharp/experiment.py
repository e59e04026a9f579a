"""Experiment orchestration: sweeps, worker pools and result files.

Every (p, L) point of a sweep owns exactly one result file.  A point is
skipped on rerun when its file exists, parses, echoes the same
configuration and carries a matching checksum.  Output bytes never depend
on the worker count: work units are keyed by trajectory/realization index
and merged through exact accumulators.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import hashlib
import json
import logging
import math
import os
from pathlib import Path

import numpy as np

from . import analysis, hydro, percolation
from .circuit import CircuitSpec, realize
from .filter import run_trajectory
from .observables import (CorrelatorSet, ObservableAccumulator, average_snapshots,
                          new_accumulators, snapshot_observables)
from .oracles import enumerate_trajectories, sigma_values

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "CHARGESHARP_WORKERS"


class ExperimentError(RuntimeError):
    pass


def resolve_workers(requested: int | None) -> int:
    env = os.environ.get(WORKERS_ENV)
    n = int(env) if env else (requested or 1)
    if n < 1:
        raise ExperimentError("worker count must be >= 1")
    return n


def _chunks(n: int, n_chunks: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, n, n_chunks + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _map(fn, tasks, workers):
    if workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _csv(header_lines, columns, rows) -> str:
    out = [f"# {line}" for line in header_lines]
    out.append(",".join(columns))
    out.extend(",".join(_fmt(v) for v in row) for row in rows)
    return "\n".join(out) + "\n"


def read_csv(path) -> tuple[list[str], list[dict]]:
    """Provenance comment lines and rows (as dicts of strings)."""
    comments, rows, columns = [], [], None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif columns is None:
            columns = line.split(",")
        elif line:
            rows.append(dict(zip(columns, line.split(","))))
    return comments, rows


# --------------------------------------------------------------------------
# steady-state trajectory sweeps

@dataclass(frozen=True)
class RunPlan:
    L: int
    p: float
    trajectories: int
    seed: int = 1
    mode: str = "projective"
    gamma: float = 0.0
    dt: float = 0.0
    burn_in: int | None = None
    snapshot_every: int | None = None
    snapshots: int = 10
    batches: int = 20

    def __post_init__(self):
        if self.trajectories < 1 or self.snapshots < 1 or self.batches < 1:
            raise ExperimentError("trajectory, snapshot and batch counts must be >= 1")
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", 4 * self.L)
        if self.snapshot_every is None:
            object.__setattr__(self, "snapshot_every", self.L)

    @property
    def depth(self) -> int:
        return self.burn_in + self.snapshots * self.snapshot_every

    @property
    def spec(self) -> CircuitSpec:
        return CircuitSpec(L=self.L, depth=self.depth, p=self.p, mode=self.mode,
                           gamma=self.gamma, dt=self.dt, seed=self.seed)

    @property
    def snapshot_steps(self) -> list[int]:
        return [self.burn_in + (s + 1) * self.snapshot_every for s in range(self.snapshots)]

    def batch_of(self, k: int) -> int:
        return k * self.batches // self.trajectories

    def stem(self) -> str:
        return f"run_L{self.L}_p{self.p:.4f}"


def _run_chunk(args):
    plan, (start, stop) = args
    spec = plan.spec
    accs: dict[int, dict[str, ObservableAccumulator]] = {}
    for k in range(start, stop):
        traj = run_trajectory(spec, k, snapshot_steps=plan.snapshot_steps, observe=snapshot_observables)
        sample = average_snapshots(traj.snapshots)
        b = plan.batch_of(k)
        acc = accs.setdefault(b, new_accumulators(plan.L))
        for name, values in sample.items():
            acc[name].add(values)
    return {b: {k: a.to_dict() for k, a in d.items()} for b, d in accs.items()}


def simulate(plan: RunPlan, workers: int = 1) -> list[dict[str, ObservableAccumulator]]:
    """Per-batch accumulators for one (p, L) point."""
    n_chunks = max(1, min(plan.trajectories, 4 * workers)) if workers > 1 else 1
    parts = _map(_run_chunk, [(plan, c) for c in _chunks(plan.trajectories, n_chunks)], workers)
    batches = [new_accumulators(plan.L) for _ in range(plan.batches)]
    for part in parts:
        for b, d in part.items():
            batches[int(b)] = {k: batches[int(b)][k].merge(ObservableAccumulator.from_dict(v))
                               for k, v in d.items()}
    return batches


def merge_batches(batches):
    total = new_accumulators(len(batches[0]["cz"].mean()) * 2 - 2)
    for b in batches:
        total = {k: total[k].merge(b[k]) for k in total}
    return total


def _run_header(plan: RunPlan) -> list[str]:
    cfg = {k: v for k, v in asdict(plan).items()}
    lines = [f"schema_version = {SCHEMA_VERSION}", "command = run"]
    lines += [line for line in plan.spec.to_config().splitlines()]
    lines += [f"{k} = {cfg[k]}" for k in ("trajectories", "burn_in", "snapshot_every", "snapshots", "batches")]
    return lines


def _plan_config(plan: RunPlan) -> dict:
    d = asdict(plan)
    d["schema_version"] = SCHEMA_VERSION
    return d


def run_point(plan: RunPlan, out_dir: Path, workers: int = 1) -> Path:
    """Simulate one point and write ``<stem>.csv`` plus ``<stem>.json``."""
    plan.spec  # raises on an invalid spec before anything is written
    config = _plan_config(plan)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{plan.stem()}.csv"
    json_path = out_dir / f"{plan.stem()}.json"
    if point_complete(json_path, csv_path, config):
        log.info("skipping completed point %s", plan.stem())
        return json_path
    batches = simulate(plan, workers)
    total = merge_batches(batches)
    rows = []
    for name in ("cz", "zz", "cw", "vq", "z", "qvar"):
        acc = total[name]
        for x, (m, e) in enumerate(zip(acc.mean(), acc.stderr())):
            rows.append((plan.p, plan.L, name, x, m, e, acc.count))
    text = _csv(_run_header(plan), ["p", "L", "observable", "x", "estimate", "stderr", "nSamples"], rows)
    _write_atomic(csv_path, text)
    summary = {
        "config": config,
        "csv": csv_path.name,
        "csv_sha256": _sha(text),
        "batch_means": {name: [b[name].mean().tolist() for b in batches if b[name].count]
                        for name in ("cz", "zz", "cw", "vq", "z", "qvar")},
        "batch_counts": [b["cz"].count for b in batches],
    }
    _write_atomic(json_path, json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return json_path


def point_complete(json_path: Path, csv_path: Path, config: dict) -> bool:
    try:
        summary = json.loads(Path(json_path).read_text(encoding="utf-8"))
        text = Path(csv_path).read_text(encoding="utf-8")
    except (OSError, ValueError):
        return False
    return summary.get("config") == json.loads(json.dumps(config)) and summary.get("csv_sha256") == _sha(text)


def run_sweep(Ls, ps, out_dir, workers=1, **plan_kw) -> list[Path]:
    plans = [RunPlan(L=L, p=p, **plan_kw) for L in Ls for p in ps]
    for plan in plans:
        plan.spec  # a bad grid entry should fail before hours of simulation, not after
    return [run_point(plan, out_dir, workers) for plan in plans]


# --------------------------------------------------------------------------
# loading and fitting sweep results

@dataclass
class PointResult:
    L: int
    p: float
    correlators: CorrelatorSet
    config: dict = field(repr=False)


def load_point(json_path) -> PointResult:
    json_path = Path(json_path)
    try:
        summary = json.loads(json_path.read_text(encoding="utf-8"))
        cfg = summary["config"]
        if cfg.get("schema_version") != SCHEMA_VERSION:
            raise ExperimentError(f"{json_path}: schema version {cfg.get('schema_version')} != {SCHEMA_VERSION}")
        csv_text = (json_path.parent / summary["csv"]).read_text(encoding="utf-8")
        if _sha(csv_text) != summary["csv_sha256"]:
            raise ExperimentError(f"{json_path}: checksum mismatch with {summary['csv']}")
        _, rows = read_csv(json_path.parent / summary["csv"])
        L = int(cfg["L"])
        half = L // 2
        est = {}
        for r in rows:
            est.setdefault(r["observable"], {})[int(r["x"])] = (float(r["estimate"]), float(r["stderr"]),
                                                                  int(r["nSamples"]))
        arr = {k: (np.array([est[k][x][0] for x in range(half + 1)]),
                   np.array([est[k][x][1] for x in range(half + 1)])) for k in ("cz", "cw", "vq")}
        n = est["cz"][0][2]
        batches = {k: np.asarray(summary["batch_means"][k], float) for k in ("cz", "cw", "vq")}
    except (KeyError, ValueError, TypeError) as exc:
        raise ExperimentError(f"{json_path}: schema mismatch ({exc})") from None
    cs = CorrelatorSet(L, n, arr["cz"][0], arr["cz"][1], arr["cw"][0], arr["cw"][1],
                       arr["vq"][0], arr["vq"][1], batches)
    return PointResult(L, float(cfg["p"]), cs, cfg)


def collect_points(paths) -> list[PointResult]:
    files = []
    for path in paths:
        path = Path(path)
        if path.is_dir():
            files.extend(sorted(path.glob("run_L*_p*.json")))
        elif path.suffix == ".json":
            files.append(path)
        elif path.suffix == ".csv" and path.with_suffix(".json").exists():
            files.append(path.with_suffix(".json"))
        else:
            raise ExperimentError(f"{path}: not a run result")
    if not files:
        raise ExperimentError("no data: no run results found")
    return [load_point(f) for f in sorted(set(files))]


def fit_point(point: PointResult, window=None, n_boot=analysis.N_BOOT, seed=0) -> dict:
    cs = point.correlators
    window = window or analysis.default_window(point.L)
    x = np.arange(point.L // 2 + 1)
    cz_fit, sign = analysis.fit_correlator(x[1:], cs.cz[1:], window, cs.cz_err[1:],
                                           cs.batches["cz"][:, 1:] if cs.batches else None, n_boot, seed)
    from_vq, from_cw = analysis.stiffness(cs, window, n_boot, seed)
    comb = analysis.combine(from_vq, from_cw)
    return {
        "L": point.L, "p": point.p, "n_samples": cs.n_samples, "window": list(window),
        "alpha": -cz_fit.slope, "alpha_err": cz_fit.slope_err, "cz_sign": sign, "cz_fit": cz_fit.to_dict(),
        "rho_varq": from_vq.value, "rho_varq_err": from_vq.stderr, "varq_fit": from_vq.fit.to_dict(),
        "rho_cw": from_cw.value, "rho_cw_err": from_cw.stderr, "cw_fit": from_cw.fit.to_dict(),
        "rho": comb.value, "rho_err": comb.stderr,
        "methods_agree_2sigma": analysis.agree(from_vq, from_cw),
    }


def window_report(point: PointResult, windows) -> list[dict]:
    out = []
    for w in windows:
        try:
            f = fit_point(point, w, n_boot=200)
        except analysis.WindowError:
            continue
        out.append({k: f[k] for k in ("window", "alpha", "alpha_err", "rho_varq", "rho_cw")})
    return out


def fit_sweep(points: list[PointResult], window=None, n_boot=analysis.N_BOOT, seed=0) -> dict:
    """rho_s(p) per system size and the 1/pi crossing."""
    if not points:
        raise ExperimentError("no data")
    report = {"points": [], "thresholds": {}}
    by_L: dict[int, list] = {}
    for pt in sorted(points, key=lambda q: (q.L, q.p)):
        f = fit_point(pt, window, n_boot, seed)
        f["window_sensitivity"] = window_report(pt, [(2, pt.L // 4), (2, pt.L // 4 + 1), (1, pt.L // 4),
                                                     (2, pt.L // 2)])
        report["points"].append(f)
        by_L.setdefault(pt.L, []).append(f)
    for L, rows in by_L.items():
        ps = [r["p"] for r in rows]
        entry = {"p": ps, "rho": [r["rho"] for r in rows]}
        try:
            th = analysis.locate_threshold(ps, entry["rho"], [r["rho_err"] for r in rows], n_boot=n_boot, seed=seed)
            slope_vq = [8 * r["rho_varq"] / math.pi for r in rows]
            entry.update(p_sharp=th.p, p_sharp_err=th.stderr,
                         varq_log_slope_at_p_sharp=analysis.interpolate_at(ps, slope_vq, th.p))
        except analysis.ThresholdError as exc:
            entry["error"] = str(exc)
        report["thresholds"][str(L)] = entry
    return report


# --------------------------------------------------------------------------
# percolation sweeps

@dataclass(frozen=True)
class PercolationPoint:
    rule: str
    L: int
    p: float
    depth: int
    realizations: int
    seed: int

    def stem(self) -> str:
        return f"wrap_{self.rule}_L{self.L}_p{self.p:.4f}"


def _perc_chunk(args):
    pt, (start, stop) = args
    spec = CircuitSpec(L=pt.L, depth=pt.depth, p=pt.p, seed=pt.seed)
    return sum(percolation.realization_wraps(spec, k, pt.rule) for k in range(start, stop))


def percolation_point(pt: PercolationPoint, out_dir: Path, workers: int = 1) -> dict:
    points_dir = Path(out_dir) / "points"
    points_dir.mkdir(parents=True, exist_ok=True)
    path = points_dir / f"{pt.stem()}.json"
    config = dict(asdict(pt), schema_version=SCHEMA_VERSION)
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
        body = {k: rec[k] for k in ("config", "hits")}
        if rec["config"] == config and rec["sha256"] == _sha(json.dumps(body, sort_keys=True)):
            return rec
    except (OSError, ValueError, KeyError):
        pass
    n_chunks = 4 * workers if workers > 1 else 1
    hits = int(sum(_map(_perc_chunk, [(pt, c) for c in _chunks(pt.realizations, n_chunks)], workers)))
    body = {"config": config, "hits": hits}
    rec = dict(body, sha256=_sha(json.dumps(body, sort_keys=True)))
    _write_atomic(path, json.dumps(rec, sort_keys=True) + "\n")
    return rec


def _binomial_err(P, n):
    # a floor of one count keeps saturated points (P = 0 or 1) from claiming zero error
    return np.sqrt(np.maximum(P * (1 - P), 1.0 / n) / n)


def percolation_sweep(Ls, ps, out_dir, realizations=2000, seed=1, rules=("outcome", "measured"),
                      depth=None, workers=1, collapse_grid=None) -> dict:
    """Wrapping curves per rule, a CSV per rule and a collapse report per rule."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for rule in rules:
        rows, curves, errs = [], {}, {}
        for L in Ls:
            d = depth if depth is not None else 2 * L
            Ps = []
            for p in ps:
                rec = percolation_point(PercolationPoint(rule, L, float(p), d, realizations, seed), out_dir, workers)
                P = rec["hits"] / realizations
                err = math.sqrt(P * (1 - P) / realizations)
                rows.append((p, L, d, P, err, realizations))
                Ps.append(P)
            curves[L] = (np.asarray(ps, float), np.asarray(Ps))
            errs[L] = _binomial_err(np.asarray(Ps), realizations)
        header = [f"schema_version = {SCHEMA_VERSION}", "command = percolation", f"rule = {rule}",
                  f"seed = {seed}", f"realizations = {realizations}",
                  f"depth = {'2L' if depth is None else depth}"]
        _write_atomic(out_dir / f"wrap_{rule}.csv",
                      _csv(header, ["p", "L", "depth", "P_wrap", "stderr", "nRealizations"], rows))
        report = {"rule": rule, "crossings": {}, "half_height": {}}
        Ls_sorted = sorted(curves)
        for a, b in zip(Ls_sorted[:-1], Ls_sorted[1:]):
            try:
                report["crossings"][f"{a}-{b}"] = percolation.curve_crossing(
                    curves[a][0], curves[a][1], curves[b][1], np.hypot(errs[a], errs[b]))
            except ValueError as exc:
                report["crossings"][f"{a}-{b}"] = None
                log.warning("no crossing for L=%s,%s: %s", a, b, exc)
        valid = [v for v in report["crossings"].values() if v is not None]
        report["crossing_mean"] = float(np.mean(valid)) if valid else None
        for L in Ls_sorted:
            try:
                report["half_height"][str(L)] = percolation.level_crossing(*curves[L], 0.5)
            except ValueError:
                report["half_height"][str(L)] = None
        if len(curves) >= 3:
            grid = collapse_grid or {}
            col = percolation.scaling_collapse(curves, grid.get("p"), grid.get("nu"))
            report.update(col.to_dict())
        _write_atomic(out_dir / f"collapse_{rule}.json", json.dumps(report, sort_keys=True, indent=1) + "\n")
        results[rule] = {"curves": curves, "report": report}
    return results


# --------------------------------------------------------------------------
# hydro

def hydro_table(ps, k, B=1.0, D=1.0, kappa=1.0, C0=0.0) -> list[tuple]:
    rows = []
    for p in ps:
        params = hydro.HydroParams(B=B, D=D, kappa=kappa, p=float(p), k=tuple(k))
        Cs = hydro.steady_state(params)
        Ce, _, _ = hydro.converge(params, C0)
        for kk, a, b in zip(params.k, Cs, Ce):
            rows.append((kk, float(p), a, b, abs(b - a) / a))
    return rows


def write_hydro(out_dir, ps, k, **kw) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = hydro_table(ps, k, **kw)
    header = [f"schema_version = {SCHEMA_VERSION}", "command = hydro"] + [f"{a} = {b}" for a, b in sorted(kw.items())]
    path = out_dir / "hydro.csv"
    _write_atomic(path, _csv(header, ["k", "p", "C_steady", "C_evolved", "relErr"], rows))
    return path


# --------------------------------------------------------------------------
# oracle comparison

def _oracle_chunk(args):
    spec, (start, stop) = args
    r = realize(spec)
    s0 = sigma_values(spec.L, 0)
    s1 = sigma_values(spec.L, 1)
    s01 = sigma_values(spec.L, 0, 1)
    vals = np.empty((stop - start, 3))
    for n, k in enumerate(range(start, stop)):
        w = run_trajectory(spec, k, realization=r).dist.weights
        a, b, c = w @ s0, w @ s1, w @ s01
        vals[n] = (a, c, c - a * b)
    return vals


ROUNDOFF = 1e-12


def oracle_compare(L: int, depth: int, p: float, trajectories: int, seed: int = 1, workers: int = 1) -> dict:
    """Monte Carlo vs exact enumeration for E<s0>, E<s0 s1>, E[<s0 s1> - <s0><s1>]
    on one fixed circuit realization."""
    spec = CircuitSpec(L=L, depth=depth, p=p, seed=seed)
    ens = enumerate_trajectories(spec)
    z0, z1, z01 = ens.sigma(0), ens.sigma(1), ens.sigma(0, 1)
    exact = [ens.mean(z0), ens.mean(z01), ens.mean(z01 - z0 * z1)]
    n_chunks = 4 * workers if workers > 1 else 1
    vals = np.vstack(_map(_oracle_chunk, [(spec, c) for c in _chunks(trajectories, n_chunks)], workers))
    mean = vals.mean(axis=0)
    err = vals.std(axis=0, ddof=1) / math.sqrt(len(vals))
    rows = []
    for name, e, m, s in zip(("E<s0>", "E<s0 s1>", "E<s0 s1>_c"), exact, mean, err):
        # observables that are deterministic across branches have roundoff-sized spread,
        # so sigma gets a floating-point floor
        z = (m - e) / math.hypot(s, ROUNDOFF)
        rows.append({"observable": name, "exact": float(e), "monte_carlo": float(m), "stderr": float(s),
                     "z": float(z), "within_3sigma": bool(abs(z) <= 3)})
    return {"spec": spec.to_config(), "trajectories": trajectories, "branches": ens.n_branches,
            "rows": rows}
