"""Orbital similarity loss and the bidirectional similarity score.

For a map ``H`` between the phase spaces of ``x' = f(x)`` and ``y' = g(y)``,
the push-forward velocity at ``x`` is ``u = dH/dx f(x)`` and the target
velocity is ``v = g(H(x))``.  The per-point loss is the squared distance
between the unit vectors ``u/|u|`` and ``v/|v|``, which equals
``2 - 2 cos(u, v)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DegenerateBatchError

DEGENERATE_EPS = 1e-8
EVAL_CHUNK = 4096


@dataclass
class LossBreakdown:
    forward: float
    backward: float
    inverse: float
    total: float
    weights: tuple = (1.0, 1.0, 1.0)
    excluded: int = 0

    def as_dict(self):
        return asdict(self)


@dataclass
class SimilarityReport:
    sim_forward: float
    sim_backward: float
    similarity: float
    sample_count: int
    excluded: int = 0
    cosine_summary: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def pushforward_pair(f, g, H, x, bound=None):
    """Return ``(u, v, H(x))``: push-forward of ``f`` by ``H`` and ``g`` at ``H(x)``."""
    out = H.forward(ad.Dual(x, f(x)), bound)
    return out.tangent, g(out.primal), out.primal


def _valid_rows(u, v, eps=DEGENERATE_EPS):
    nu = np.linalg.norm(ad.value_of(u), axis=-1)
    nv = np.linalg.norm(ad.value_of(v), axis=-1)
    return (nu > eps) & (nv > eps)


def _per_point_loss(u, v):
    du = ad.div(u, ad.norm(u, axis=-1, keepdims=True))
    dv = ad.div(v, ad.norm(v, axis=-1, keepdims=True))
    d = ad.sub(du, dv)
    return ad.sum(ad.mul(d, d), axis=-1)


def loss_from_velocities(u, v, eps=DEGENERATE_EPS):
    """Mean normalized-velocity mismatch over non-degenerate rows.

    Returns ``(loss, excluded_count)``.
    """
    ok = _valid_rows(u, v, eps)
    if not ok.any():
        raise DegenerateBatchError("every point of the batch has a vanishing velocity")
    excluded = int(ok.size - ok.sum())
    if excluded:
        idx = np.flatnonzero(ok)
        u, v = ad.take(u, idx), ad.take(v, idx)
    return ad.mean(_per_point_loss(u, v)), excluded


def orbital_loss(f, g, H, batch, bound=None):
    """Orbital similarity loss of ``H`` mapping ``f`` onto ``g`` over ``batch``.

    With ``bound`` (leaves from :meth:`IResNet.bind`) the result is a tape
    scalar ready for :meth:`Tape.backward`; otherwise a float.
    """
    u, v, _ = pushforward_pair(f, g, H, batch, bound)
    loss, _ = loss_from_velocities(u, v)
    return loss


def batch_losses(f, g, phi, psi, x, phi_bound=None, psi_bound=None, weights=(1.0, 1.0, 1.0)):
    """Forward, backward and inverse-consistency losses on a sample ``x``.

    Returns ``(total, breakdown)`` where ``total`` is a tape scalar when the
    networks are bound to a tape.
    """
    w_f, w_b, w_i = weights
    u, v, y_hat = pushforward_pair(f, g, phi, x, phi_bound)
    j_f, ex_f = loss_from_velocities(u, v)
    # backward loss at the images of x; psi(phi(x)) comes out as its primal
    u_b, v_b, x_back = pushforward_pair(g, f, psi, y_hat, psi_bound)
    j_b, ex_b = loss_from_velocities(u_b, v_b)
    diff = ad.sub(x, x_back)
    j_i = ad.mean(ad.sum(ad.mul(diff, diff), axis=-1))
    total = ad.add(ad.add(ad.mul(j_f, w_f), ad.mul(j_b, w_b)), ad.mul(j_i, w_i))
    breakdown = LossBreakdown(
        forward=float(ad.value_of(j_f)),
        backward=float(ad.value_of(j_b)),
        inverse=float(ad.value_of(j_i)),
        total=float(ad.value_of(total)),
        weights=tuple(float(w) for w in weights),
        excluded=ex_f + ex_b,
    )
    return total, breakdown


def cosines(f, g, H, x, eps=DEGENERATE_EPS):
    """Per-point cosine between push-forward and target velocities.

    Degenerate points come back as NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(len(x))
    for start in range(0, len(x), EVAL_CHUNK):
        chunk = x[start:start + EVAL_CHUNK]
        u, v, _ = pushforward_pair(f, g, H, chunk)
        nu = np.linalg.norm(u, axis=-1)
        nv = np.linalg.norm(v, axis=-1)
        ok = (nu > eps) & (nv > eps)
        c = np.full(len(chunk), np.nan)
        c[ok] = np.sum(u[ok] * v[ok], axis=-1) / (nu[ok] * nv[ok])
        out[start:start + EVAL_CHUNK] = c
    return out


def directional_similarity(f, g, H, x):
    c = cosines(f, g, H, x)
    ok = np.isfinite(c)
    if not ok.any():
        raise DegenerateBatchError("no non-degenerate evaluation points")
    return float(np.mean(c[ok])), c


def similarity(f, g, phi, psi, p, q, count=10_000, rng=None, seed=0):
    """Bidirectional orbital similarity; the lower direction is reported."""
    if count < 1:
        raise ContractError(f"sample count must be >= 1, got {count}")
    rng = np.random.default_rng(seed) if rng is None else rng
    x = p.draw(count, rng)
    y = q.draw(count, rng)
    s_f, c_f = directional_similarity(f, g, phi, x)
    s_b, c_b = directional_similarity(g, f, psi, y)
    both = np.concatenate([c_f, c_b])
    ok = both[np.isfinite(both)]
    summary = {"min": float(ok.min()), "median": float(np.median(ok)), "max": float(ok.max())}
    sampler = {}
    for name, s in (("p", p), ("q", q)):
        try:
            sampler[name] = s.to_spec()
        except NotImplementedError:
            sampler[name] = {"kind": s.kind}
    return SimilarityReport(
        sim_forward=s_f,
        sim_backward=s_b,
        similarity=min(s_f, s_b),
        sample_count=2 * count,
        excluded=int(both.size - ok.size),
        cosine_summary=summary,
        sampler=sampler,
    )
