"""Trajectory-based baseline: PCA to 95% variance, then canonical correlation."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericalError
from .sampling import DIVERGENCE_NORM


@dataclass
class TrajectoryEnsemble:
    states: np.ndarray          # (sum of trial lengths, n)
    lengths: list
    dt: float
    horizon: float
    integrator: str

    @property
    def trials(self):
        return len(self.lengths)

    def trial(self, i):
        start = int(np.sum(self.lengths[:i]))
        return self.states[start:start + self.lengths[i]]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            n = self.states.shape[1]
            w.writerow(["trial", "time"] + [f"x{i}" for i in range(n)])
            row = 0
            for t, length in enumerate(self.lengths):
                for k in range(length):
                    w.writerow([t, repr(k * self.dt)] + [repr(float(v)) for v in self.states[row]])
                    row += 1


def _rk4(field, x, dt):
    k1 = field(x)
    k2 = field(x + 0.5 * dt * k1)
    k3 = field(x + 0.5 * dt * k2)
    k4 = field(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_ensemble(field, initial, dt=0.05, horizon=10.0, sigma=0.0, seed=None):
    """Integrate every row of ``initial`` for ``horizon`` time units.

    Euler-Maruyama when ``sigma > 0``, classical RK4 otherwise.  Each trial
    contributes ``steps + 1`` rows (its initial state included).
    """
    if horizon <= 0:
        raise ContractError(f"horizon must be positive, got {horizon}")
    x = np.array(initial, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != field.dim:
        raise ContractError(f"initial states must be (trials, {field.dim})")
    rng = np.random.default_rng(seed)
    steps = int(round(horizon / dt))
    trials = len(x)
    out = np.empty((steps + 1, trials, field.dim))
    out[0] = x
    f = lambda z: ad.value_of(field(z))
    scale = sigma * np.sqrt(dt)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, steps + 1):
            if sigma > 0:
                x = x + f(x) * dt + scale * rng.standard_normal(x.shape)
            else:
                x = _rk4(f, x, dt)
            out[k] = x
    finite = np.all(np.isfinite(out), axis=(0, 2)) & np.all(
        np.linalg.norm(np.nan_to_num(out, nan=np.inf), axis=2) <= DIVERGENCE_NORM, axis=0)
    if not finite.all():
        raise NumericalError(f"{int((~finite).sum())} of {trials} trajectories diverged")
    states = np.swapaxes(out, 0, 1).reshape(trials * (steps + 1), field.dim)
    return TrajectoryEnsemble(states, [steps + 1] * trials, dt, horizon,
                              "euler-maruyama" if sigma > 0 else "rk4")


@dataclass
class PCAResult:
    basis: np.ndarray       # (n, k) orthonormal columns
    mean: np.ndarray
    variances: np.ndarray   # all eigenvalues, descending
    k: int
    retained: float
    projected: np.ndarray   # reduced states mapped back into R^n


def pca_95(states, threshold=0.95):
    """Keep the fewest principal axes explaining ``threshold`` of the variance.

    ``states`` may be an array or a :class:`TrajectoryEnsemble`.
    """
    X = states.states if isinstance(states, TrajectoryEnsemble) else np.asarray(states, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ContractError("PCA needs at least two rows")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (len(X) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0:
        raise NumericalError("data has zero variance")
    ratio = np.cumsum(evals) / total
    k = int(np.searchsorted(ratio, threshold - 1e-12) + 1)
    k = min(k, len(evals))
    basis = evecs[:, :k]
    projected = Xc @ basis @ basis.T + mean
    return PCAResult(basis, mean, evals, k, float(ratio[k - 1]), projected)


def _orthonormal_columns(X, rtol):
    Xc = X - X.mean(axis=0)
    U, s, _ = np.linalg.svd(Xc, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise NumericalError("data has zero variance")
    keep = s ** 2 > rtol * s[0] ** 2
    return U[:, keep]


def canonical_correlations(A, B, ridge=1e-8):
    """All canonical correlations between the row-paired data sets ``A`` and ``B``.

    Each side is whitened (directions whose variance is below ``ridge`` times
    the largest are treated as null) and the singular values of the whitened
    cross-covariance are returned, largest first.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[0] != B.shape[0]:
        raise ContractError(f"row counts differ ({A.shape[0]} vs {B.shape[0]})")
    Ua = _orthonormal_columns(A, ridge)
    Ub = _orthonormal_columns(B, ridge)
    rho = np.linalg.svd(Ua.T @ Ub, compute_uv=False)
    return np.clip(rho[:min(Ua.shape[1], Ub.shape[1])], 0.0, 1.0)


def cca_similarity(a, b, ridge=1e-8):
    """Mean canonical correlation over the shared rank."""
    A = a.states if isinstance(a, TrajectoryEnsemble) else a
    B = b.states if isinstance(b, TrajectoryEnsemble) else b
    return float(np.mean(canonical_correlations(A, B, ridge)))


def svcca(a, b, threshold=0.95):
    """PCA-reduce both ensembles, map back to phase space, correlate."""
    pa = pca_95(a, threshold)
    pb = pca_95(b, threshold)
    return cca_similarity(pa.projected, pb.projected)


def compare_fields(f, g, initial, dt=0.05, horizon=10.0, sigma=0.0, seed=None):
    """SVCCA between two fields simulated from the same initial states and noise."""
    ea = simulate_ensemble(f, initial, dt, horizon, sigma, seed)
    eb = simulate_ensemble(g, initial, dt, horizon, sigma, seed)
    return svcca(ea, eb), ea, eb
