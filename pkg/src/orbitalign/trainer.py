"""Bidirectional training of the two alignment networks.

One *batch* is one pass of the symmetric schedule: a step driven by samples
of ``p`` (mapping ``f`` onto ``g`` through ``phi``) followed by the mirrored
step driven by samples of ``q``.  Every step updates both networks and then
re-applies the spectral-norm cap.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NumericalError
from .iresnet import IResNet
from .similarity import batch_losses, similarity

log = logging.getLogger(__name__)

BATCH_CONVENTION = "one batch = one symmetric pair of updates (phi-step then psi-step)"


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    weights: tuple = (1.0, 1.0, 1.0)
    cap: float = 0.99
    batches: int = 2000
    restarts: int = 3
    layers: int = 10
    seed: int = 0
    eval_every: int = 200
    eval_samples: int = 10_000
    trace_samples: int = 2000
    divergence_factor: float = 10.0
    divergence_patience: int = 200
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.cap < 1.0:
            raise ContractError(f"cap must lie in (0, 1), got {self.cap}")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.batches < 0 or self.restarts < 1:
            raise ContractError("batches must be >= 0 and restarts >= 1")
        if self.checkpoint_every and not self.checkpoint_dir:
            raise ContractError("checkpoint_every needs a checkpoint_dir")
        if len(self.weights) != 3:
            raise ContractError("weights must be (w_f, w_b, w_i)")

    def as_dict(self):
        return asdict(self)


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params, grads, lr=None):
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {k!r}; step aborted")
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params, grads, state, lr):
    state.step(params, grads, lr)
    return params, state


def train_batch(f, g, p, phi, psi, config, rng, opt_phi, opt_psi):
    """One update driven by ``x ~ p``: losses, one reverse sweep, Adam, cap."""
    x = p.draw(config.batch_size, rng)
    tape = ad.Tape()
    phi_bound = phi.bind(tape, "phi")
    psi_bound = psi.bind(tape, "psi")
    total, breakdown = batch_losses(f, g, phi, psi, x, phi_bound, psi_bound, config.weights)
    if not math.isfinite(breakdown.total):
        raise NumericalError(f"non-finite loss {breakdown.total}")
    grads = tape.backward(total)
    opt_phi.step(phi.params, phi.gather_grads(grads, "phi"))
    opt_psi.step(psi.params, psi.gather_grads(grads, "psi"))
    phi.project_spectral_norms(config.cap)
    psi.project_spectral_norms(config.cap)
    return breakdown


@dataclass
class RestartRecord:
    seed: int
    eval_seed: int = 0
    trace: list = field(default_factory=list)
    final: dict | None = None
    failed: str | None = None
    losses: list = field(default_factory=list)


@dataclass
class RunRecord:
    config: dict
    restarts: list
    best_restart: int
    final: dict
    wall_seconds: float
    convention: str = BATCH_CONVENTION
    notes: list = field(default_factory=list)

    def as_dict(self):
        return asdict(self)

    @property
    def similarity(self):
        return self.final["similarity"]


def _checkpoint(directory, seed, batch, phi, psi):
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    phi.save(out / f"restart{seed}_batch{batch}_phi.json")
    psi.save(out / f"restart{seed}_batch{batch}_psi.json")


def train_once(f, g, p, q, config, seed, loss_log=None):
    """Single restart; returns ``(phi, psi, RestartRecord)``."""
    rng = np.random.default_rng(seed)
    init_seeds = rng.integers(0, 2**31, size=2)
    phi = IResNet(f.dim, config.layers, config.cap, seed=int(init_seeds[0]))
    psi = IResNet(g.dim, config.layers, config.cap, seed=int(init_seeds[1]))
    opt_phi = Adam(config.lr)
    opt_psi = Adam(config.lr)
    eval_seed = int(rng.integers(0, 2**31))
    record = RestartRecord(seed=int(seed), eval_seed=eval_seed)
    initial = None
    over = 0
    for batch in range(1, config.batches + 1):
        try:
            a = train_batch(f, g, p, phi, psi, config, rng, opt_phi, opt_psi)
            b = train_batch(g, f, q, psi, phi, config, rng, opt_psi, opt_phi)
        except NumericalError as exc:
            record.failed = f"batch {batch}: {exc}"
            log.warning("restart %d failed: %s", seed, exc)
            break
        total = a.total + b.total
        record.losses.append(total)
        if loss_log is not None:
            loss_log.append({"batch": batch, "J_f": a.forward + b.forward,
                             "J_b": a.backward + b.backward, "J_i": a.inverse + b.inverse,
                             "total": total})
        if initial is None:
            initial = max(total, 1e-12)
        over = over + 1 if total > config.divergence_factor * initial else 0
        if over >= config.divergence_patience:
            record.failed = f"batch {batch}: loss above {config.divergence_factor}x initial " \
                            f"for {config.divergence_patience} batches"
            break
        if config.checkpoint_every and batch % config.checkpoint_every == 0:
            _checkpoint(config.checkpoint_dir, seed, batch, phi, psi)
        if config.eval_every and batch % config.eval_every == 0:
            rep = similarity(f, g, phi, psi, p, q, config.trace_samples, seed=eval_seed)
            record.trace.append({"batch": batch, "similarity": rep.similarity,
                                 "sim_forward": rep.sim_forward, "sim_backward": rep.sim_backward})
    if record.failed is None:
        record.final = similarity(f, g, phi, psi, p, q, config.eval_samples, seed=eval_seed).as_dict()
    return phi, psi, record


def train(f, g, p, q, config=None, loss_log=None):
    """Train with restarts and keep the restart with the highest similarity.

    Returns ``(phi, psi, RunRecord)``.
    """
    config = config or TrainConfig()
    if f.dim != g.dim:
        raise ContractError(f"fields have different dimensions ({f.dim} vs {g.dim})")
    start = time.perf_counter()
    seeds = np.random.default_rng(config.seed).integers(0, 2**31, size=config.restarts)
    best = None
    records = []
    for i, s in enumerate(seeds):
        phi, psi, rec = train_once(f, g, p, q, config, int(s), loss_log)
        records.append(rec)
        if rec.final is None:
            continue
        if best is None or rec.final["similarity"] > best[0]:
            best = (rec.final["similarity"], i, phi, psi)
    if best is None:
        raise NumericalError("every restart failed")
    _, idx, phi, psi = best
    run = RunRecord(
        config=config.as_dict(),
        restarts=[asdict(r) for r in records],
        best_restart=idx,
        final=records[idx].final,
        wall_seconds=time.perf_counter() - start,
    )
    return phi, psi, run
