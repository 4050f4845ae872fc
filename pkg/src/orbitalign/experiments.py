"""Experiment drivers: build system pairs, train, and tabulate similarities."""
from __future__ import annotations

import json
import logging
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dynsys, sampling
from .errors import ContractError, NumericalError
from .iresnet import IResNet
from .similarity import cosines
from .svcca import compare_fields, simulate_ensemble
from .trainer import BATCH_CONVENTION, TrainConfig, train

log = logging.getLogger(__name__)

CSV_COLUMNS = ("experiment", "i", "j", "seed", "sim_forward", "sim_backward", "similarity",
               "batches", "restarts", "wall_ms")
J_SCALING_NOTE = "low-rank RNN J entries drawn with std j_std/sqrt(n)"

PAPER_SCALE = {
    "conjugate-pair": {"replicates": 30, "dim": 64},
    "linear-equivalence-class": {"replicates": 30, "dim": 32},
    "sign-grid": {"dim": 32, "pairs": 15},
}

LINEAR_CASES = ("orthogonal", "invertible", "same-sign-type", "same-sign")


def build_id():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# -- pair construction ---------------------------------------------------------

def conjugate_pair(system, seed, *, dim=16, k=2, identity=False):
    """Sample a system and a linearly conjugate partner.

    Returns ``(f, g, p, q, info)``.  The partner's sampler is the image of
    ``p`` under the conjugating matrix.
    """
    rng = np.random.default_rng(seed)
    if system == "VanDerPol":
        mu = rng.uniform(1.5, 3.5)
        f = dynsys.VanDerPol(mu)
        p = sampling.vdp_box()
        Q = np.eye(2) if identity else dynsys.random_invertible(2, rng)
        info = {"mu": mu}
    elif system == "Pitchfork":
        mu = rng.uniform(2.0, 4.0)
        f = dynsys.Pitchfork(mu)
        p = sampling.pitchfork_box(mu)
        Q = np.eye(2) if identity else dynsys.random_invertible(2, rng)
        info = {"mu": mu}
    elif system == "LowRankRNN":
        f = dynsys.random_lowrank_rnn(dim, k, rng=rng)
        p = sampling.Gaussian.standard(dim)
        Q = np.eye(dim) if identity else dynsys.random_orthogonal(dim, rng)
        info = {"n": dim, "k": k}
    else:
        raise ContractError(f"unknown conjugate system {system!r}")
    g = dynsys.make_conjugate(f, Q)
    q = p if system == "LowRankRNN" else sampling.linear_image(p, Q)
    info["Q"] = Q.tolist()
    return f, g, p, q, info


def linear_pair(case, n, seed):
    """Two topologically equivalent linear systems of one of four kinds.

    ``orthogonal``: ``A2 = Q A Q^T``; ``invertible``: ``A2 = P A P^-1``;
    ``same-sign-type``: independent draws sharing the counts of positive /
    negative real and complex eigenvalues; ``same-sign``: sharing only the
    number of eigenvalues in each half plane.
    """
    rng = np.random.default_rng(seed)
    n_pos = int(rng.integers(0, n + 1))
    n_neg = n - n_pos
    cp = int(rng.integers(0, n_pos // 2 + 1))
    cn = int(rng.integers(0, n_neg // 2 + 1))
    f = dynsys.random_linear_with_signs(n, n_pos, complex_pos=cp, complex_neg=cn, rng=rng)
    if case == "orthogonal":
        Q = dynsys.random_orthogonal(n, rng)
        g = dynsys.Linear(Q @ f.A @ Q.T)
    elif case == "invertible":
        P = dynsys.random_invertible(n, rng)
        g = dynsys.Linear(P @ f.A @ np.linalg.inv(P))
    elif case == "same-sign-type":
        g = dynsys.random_linear_with_signs(n, n_pos, complex_pos=cp, complex_neg=cn, rng=rng)
    elif case == "same-sign":
        cp2 = int(rng.integers(0, n_pos // 2 + 1))
        cn2 = int(rng.integers(0, n_neg // 2 + 1))
        g = dynsys.random_linear_with_signs(n, n_pos, complex_pos=cp2, complex_neg=cn2, rng=rng)
    else:
        raise ContractError(f"unknown linear case {case!r}")
    p = sampling.Gaussian.standard(n)
    return f, g, p, p, {"n_pos": n_pos, "complex_pos": cp, "complex_neg": cn}


# -- job execution ------------------------------------------------------------

def _row(experiment, i, j, seed, run, config, wall):
    fin = run.final
    return {
        "experiment": experiment, "i": i, "j": j, "seed": seed,
        "sim_forward": fin["sim_forward"], "sim_backward": fin["sim_backward"],
        "similarity": fin["similarity"], "batches": config.batches,
        "restarts": config.restarts, "wall_ms": int(round(wall * 1000)),
    }


def _failed_row(experiment, i, j, seed, config, error):
    return {"experiment": experiment, "i": i, "j": j, "seed": seed,
            "sim_forward": float("nan"), "sim_backward": float("nan"),
            "similarity": float("nan"), "batches": config.batches,
            "restarts": config.restarts, "wall_ms": 0, "error": str(error)}


def _align_job(job):
    experiment, i, j, seed, builder, args, config = job
    start = time.perf_counter()
    try:
        f, g, p, q, info = builder(*args)
        _, _, run = train(f, g, p, q, replace(config, seed=seed))
    except (NumericalError, ContractError, ValueError) as exc:
        log.warning("%s pair (%s, %s) failed: %s", experiment, i, j, exc)
        return _failed_row(experiment, i, j, seed, config, exc), None
    row = _row(experiment, i, j, seed, run, config, time.perf_counter() - start)
    return row, {"info": info, "run": run.as_dict()}


def run_jobs(jobs, workers=1):
    """Run alignment jobs, preserving submission order in the output."""
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_align_job, jobs))
    return [_align_job(j) for j in jobs]


def _seeds(seed, count):
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31, size=count)]


def _summary(values):
    v = np.asarray([x for x in values if np.isfinite(x)])
    if v.size == 0:
        return {"count": 0}
    return {"count": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)),
            "sem": float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0,
            "iqr": float(np.subtract(*np.percentile(v, [75, 25]))),
            "min": float(v.min()), "max": float(v.max())}


def run_conjugate_suite(system, replicates=5, config=None, seed=0, *, dim=16, k=2,
                        identity=False, workers=1):
    config = config or TrainConfig()
    seeds = _seeds(seed, replicates)
    jobs = [("conjugate-pair", r, r, s, _conjugate_builder, (system, s, dim, k, identity), config)
            for r, s in enumerate(seeds)]
    results = run_jobs(jobs, workers)
    rows = [r for r, _ in results]
    return {"rows": rows, "details": [d for _, d in results],
            "summary": _summary([r["similarity"] for r in rows])}


def _conjugate_builder(system, seed, dim, k, identity):
    return conjugate_pair(system, seed, dim=dim, k=k, identity=identity)


def run_linear_class(case, replicates=5, dim=8, config=None, seed=0, workers=1):
    config = config or TrainConfig(batches=3000)
    seeds = _seeds(seed, replicates)
    jobs = [("linear-equivalence-class", r, r, s, linear_pair, (case, dim, s), config)
            for r, s in enumerate(seeds)]
    results = run_jobs(jobs, workers)
    rows = [r for r, _ in results]
    return {"rows": rows, "details": [d for _, d in results],
            "summary": _summary([r["similarity"] for r in rows])}


def sign_groups(dim, groups=5):
    return [int(round(dim * i / (groups - 1))) for i in range(groups)]


def _sign_pair(dim, pos_i, pos_j, seed):
    rng = np.random.default_rng(seed)
    f = dynsys.random_linear_with_signs(dim, pos_i, "real", rng=rng)
    g = dynsys.random_linear_with_signs(dim, pos_j, "real", rng=rng)
    p = sampling.Gaussian.standard(dim)
    return f, g, p, p, {"n_pos": [pos_i, pos_j]}


def run_sign_grid(dim=8, groups=5, pairs=3, config=None, seed=0, workers=1):
    """Pairwise similarity between groups of real-spectrum linear systems.

    Group ``i`` has ``dim * i / (groups - 1)`` positive eigenvalues.  Each
    unordered cell is trained once and mirrored.
    """
    config = config or TrainConfig(batches=3000)
    pos = sign_groups(dim, groups)
    cells = [(i, j) for i in range(groups) for j in range(i, groups)]
    seeds = _seeds(seed, len(cells) * pairs)
    jobs = []
    for c, (i, j) in enumerate(cells):
        for r in range(pairs):
            s = seeds[c * pairs + r]
            jobs.append(("sign-grid", i, j, s, _sign_pair, (dim, pos[i], pos[j], s), config))
    results = run_jobs(jobs, workers)
    rows = [r for r, _ in results]
    matrix = np.full((groups, groups), np.nan)
    for i, j in cells:
        vals = [r["similarity"] for r in rows if r["i"] == i and r["j"] == j]
        matrix[i, j] = matrix[j, i] = float(np.nanmean(vals))
    by_prop = {}
    for r in rows:
        same = 1.0 - abs(pos[r["i"]] - pos[r["j"]]) / dim
        by_prop.setdefault(round(same, 6), []).append(r["similarity"])
    proportions = {f"{int(round(100 * k))}%": _summary(v) for k, v in sorted(by_prop.items(), reverse=True)}
    return {"rows": rows, "details": [d for _, d in results], "matrix": matrix.tolist(),
            "positive_counts": pos, "by_proportion": proportions}


# -- pairwise model comparison ---------------------------------------------------

def run_pairwise_matrix(models, config=None, seed=0, *, sampler=None, svcca_opts=None,
                        workers=1):
    """DFORM and SVCCA similarity matrices over a list of fields.

    ``sampler`` configures the per-model asymptotic sampler; ``svcca_opts``
    the trajectory ensembles (shared initial states and noise across models).
    """
    config = config or TrainConfig(batches=6000)
    sampler = {"sigma": 1.5, "dt": 0.01, "t_burn": 50.0, "t_end": 100.0, "trials": 1000,
               **(sampler or {})}
    svcca_opts = {"trials": 100, "dt": 0.05, "horizon": 10.0, "sigma": 0.0, **(svcca_opts or {})}
    m = len(models)
    pools = []
    for idx, f in enumerate(models):
        pools.append(sampling.Asymptotic.from_field(f, seed=seed + idx, **sampler))
    seeds = _seeds(seed, m * (m + 1) // 2)
    jobs, c = [], 0
    for i in range(m):
        for j in range(i, m):
            jobs.append(("pairwise-matrix", i, j, seeds[c], _given_pair,
                         (models[i], models[j], pools[i], pools[j]), config))
            c += 1
    results = run_jobs(jobs, workers)
    dform = np.full((m, m), np.nan)
    for row, _ in results:
        dform[row["i"], row["j"]] = dform[row["j"], row["i"]] = row["similarity"]
    rng = np.random.default_rng(seed)
    dim = models[0].dim
    init = rng.standard_normal((svcca_opts["trials"], dim))
    cca = np.full((m, m), np.nan)
    for i in range(m):
        for j in range(i, m):
            val, _, _ = compare_fields(models[i], models[j], init, svcca_opts["dt"],
                                       svcca_opts["horizon"], svcca_opts["sigma"], seed)
            cca[i, j] = cca[j, i] = val
    return {"rows": [r for r, _ in results], "details": [d for _, d in results],
            "dform": dform.tolist(), "svcca": cca.tolist()}


def _given_pair(f, g, p, q):
    return f, g, p, q, {}


# -- vector-field grids ------------------------------------------------------------

GRID_FORMAT_VERSION = 1


def dump_field_grid(field, grid, net=None, target=None, trajectories=None):
    """Tabulate a planar field (and optionally its push-forward) on a grid.

    ``grid`` is ``{"low": [a, b], "high": [c, d], "num": [nx, ny]}``.  With a
    network the output also holds the mapped grid points, the push-forward
    vectors there and, given ``target``, the target field at those points.
    ``trajectories`` (``{"initial": [[..]], "dt": .., "horizon": ..}``) adds
    integrated orbits of ``field`` and, with a network, their images.
    """
    if field.dim != 2 or (net is not None and net.dim != 2):
        raise ContractError("grid dumps need a two-dimensional field and network")
    xs = np.linspace(grid["low"][0], grid["high"][0], grid["num"][0])
    ys = np.linspace(grid["low"][1], grid["high"][1], grid["num"][1])
    pts = np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1).reshape(-1, 2)
    out = {"format_version": GRID_FORMAT_VERSION, "grid": grid, "points": pts.tolist(),
           "field": np.asarray(ad.value_of(field(pts))).tolist()}
    if net is not None:
        d = net.forward(ad.Dual(pts, field(pts)))
        out["mapped_points"] = np.asarray(d.primal).tolist()
        out["pushforward"] = np.asarray(d.tangent).tolist()
        if target is not None:
            out["target"] = np.asarray(ad.value_of(target(d.primal))).tolist()
            out["cosine"] = [None if not np.isfinite(c) else float(c)
                             for c in cosines(field, target, net, pts)]
    if trajectories:
        init = np.asarray(trajectories["initial"], dtype=np.float64)
        ens = simulate_ensemble(field, init, trajectories.get("dt", 0.02),
                                trajectories.get("horizon", 10.0))
        trajs = [ens.trial(i) for i in range(ens.trials)]
        out["trajectories"] = [t.tolist() for t in trajs]
        if net is not None:
            out["mapped_trajectories"] = [np.asarray(net(t)).tolist() for t in trajs]
    return out


def load_field_grid(data):
    """Validate a grid dump (dict or JSON path) and return it with numpy arrays."""
    if isinstance(data, (str, Path)):
        data = json.loads(Path(data).read_text())
    if data.get("format_version") != GRID_FORMAT_VERSION:
        raise ContractError(f"unsupported grid format {data.get('format_version')!r}")
    for key in ("grid", "points", "field"):
        if key not in data:
            raise ContractError(f"grid dump missing {key!r}")
    out = dict(data)
    n = len(data["points"])
    for key in ("points", "field", "mapped_points", "pushforward", "target"):
        if key in data:
            arr = np.asarray(data[key], dtype=np.float64)
            if arr.shape != (n, 2):
                raise ContractError(f"{key!r} has shape {arr.shape}, expected ({n}, 2)")
            out[key] = arr
    if n != int(np.prod(data["grid"]["num"])):
        raise ContractError("point count does not match grid size")
    return out


# -- inversion check ----------------------------------------------------------------

def invert_check(net, count=100, seed=0, tol=1e-10, max_iter=100, scale=1.0):
    rng = np.random.default_rng(seed)
    x = scale * rng.standard_normal((count, net.dim))
    x_rec = net.inverse(net.forward(x), tol=tol, max_iter=max_iter)
    err = np.linalg.norm(x_rec - x, axis=1)
    return {"count": count, "max_error": float(err.max()), "mean_error": float(err.mean())}


def random_warp(dim, layers=10, cap=0.9, seed=0, scale=1.0):
    """Frozen i-ResNet with random nonzero residual branches (a nonlinear warp)."""
    rng = np.random.default_rng(seed)
    n = dim
    params = {
        "W1": rng.normal(0, 1 / np.sqrt(n), size=(layers, 2 * n, n)),
        "b1": rng.normal(0, scale, size=(layers, 2 * n)),
        "W2": rng.normal(0, 1 / np.sqrt(2 * n), size=(layers, n, 2 * n)),
        "b2": np.zeros((layers, n)),
    }
    return IResNet(dim, layers, cap, seed=seed, params=params)


def conventions():
    return {"batch": BATCH_CONVENTION, "j_scaling": J_SCALING_NOTE}
