"""Invertible residual network with spectrally capped blocks.

Each block computes ``x + W2 relu(W1 x + b1) + b2``.  Keeping the spectral
norm of ``W1`` and ``W2`` below a cap ``c < 1`` makes every residual branch a
contraction, so each block is a bijection whose inverse is found by the
fixed-point iteration ``x <- y - g(x)``.

Weights are stored stacked over blocks (``W1`` has shape ``(L, 2n, n)``) so
that the optimizer and the spectral projection act on a handful of arrays.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    CheckpointError,
    ContractError,
    DimensionError,
    IterationLimitError,
    UnsupportedVersionError,
)

FORMAT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2")

# power iteration
SIGMA_TOL = 1e-6
SIGMA_MAX_ITER = 50
CAP_RTOL = 1e-12


def _top_singular_values(W):
    """Largest singular value of each matrix in a stack, via the Gram matrix."""
    G = W @ W.transpose(0, 2, 1) if W.shape[1] < W.shape[2] else W.transpose(0, 2, 1) @ W
    return np.sqrt(np.maximum(np.linalg.eigvalsh(G)[:, -1], 0.0))


class IResNet:
    def __init__(self, dim, layers=10, cap=0.99, seed=None, params=None):
        if dim < 1 or layers < 1:
            raise ContractError(f"need dim >= 1 and layers >= 1, got {dim}, {layers}")
        if not 0.0 < cap < 1.0:
            raise ContractError(f"Lipschitz cap must lie in (0, 1), got {cap}")
        self.dim = int(dim)
        self.layers = int(layers)
        self.cap = float(cap)
        rng = np.random.default_rng(seed)
        n, L = self.dim, self.layers
        if params is None:
            params = {
                "W1": rng.normal(0.0, 1.0 / np.sqrt(n), size=(L, 2 * n, n)),
                "b1": np.zeros((L, 2 * n)),
                "W2": np.zeros((L, n, 2 * n)),
                "b2": np.zeros((L, n)),
            }
        self.params = {k: np.array(params[k], dtype=np.float64) for k in PARAM_NAMES}
        self._check_shapes()
        # persistent right singular vector estimates, one per block
        self._power_vectors = {
            "W1": _unit_rows(rng.normal(size=(L, n))),
            "W2": _unit_rows(rng.normal(size=(L, 2 * n))),
        }
        self.project_spectral_norms()

    def _check_shapes(self):
        n, L = self.dim, self.layers
        expected = {"W1": (L, 2 * n, n), "b1": (L, 2 * n), "W2": (L, n, 2 * n), "b2": (L, n)}
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise DimensionError(f"{k} has shape {self.params[k].shape}, expected {shape}")

    def copy(self):
        other = IResNet.__new__(IResNet)
        other.dim, other.layers, other.cap = self.dim, self.layers, self.cap
        other.params = {k: v.copy() for k, v in self.params.items()}
        other._power_vectors = {k: v.copy() for k, v in self._power_vectors.items()}
        return other

    # -- evaluation -------------------------------------------------------

    def bind(self, tape, prefix):
        """Register every block weight on ``tape``; returns per-block leaves."""
        blocks = []
        for l in range(self.layers):
            blocks.append(tuple(
                tape.param((prefix, k, l), self.params[k][l]) for k in PARAM_NAMES
            ))
        return blocks

    def gather_grads(self, grads, prefix):
        """Stack per-block gradients produced by :meth:`Tape.backward`."""
        return {
            k: np.stack([grads[(prefix, k, l)] for l in range(self.layers)])
            for k in PARAM_NAMES
        }

    def _blocks(self, bound):
        if bound is not None:
            return bound
        p = self.params
        return [tuple(p[k][l] for k in PARAM_NAMES) for l in range(self.layers)]

    def forward(self, x, bound=None):
        """Apply the network to a point or a batch of points (rows).

        ``x`` may be a numpy array, a tape tensor or a :class:`~.autodiff.Dual`;
        a dual input carries its tangent through every block, which yields the
        Jacobian-vector product alongside the output.
        """
        if ad._shape(x)[-1] != self.dim:
            raise DimensionError(f"input dimension {ad._shape(x)[-1]} != {self.dim}")
        for W1, b1, W2, b2 in self._blocks(bound):
            x = ad.add(x, residual(x, W1, b1, W2, b2))
        return x

    __call__ = forward

    def block_forward(self, l, x):
        p = self.params
        return x + residual(x, p["W1"][l], p["b1"][l], p["W2"][l], p["b2"][l])

    def jvp(self, x, v):
        return ad.jvp(self.forward, x, v)

    def jacobian(self, x):
        """Dense Jacobian at a single point, built column by column from JVPs."""
        x = np.asarray(x, dtype=np.float64)
        eye = np.eye(self.dim)
        xs = np.broadcast_to(x, (self.dim, self.dim))
        return self.jvp(xs, eye).T

    def inverse(self, y, tol=1e-10, max_iter=100, return_history=False):
        """Invert block by block (last to first) with ``x <- y - g(x)``.

        Raises :class:`IterationLimitError` if some block has not reached
        ``max|dx| < tol`` after ``max_iter`` iterations.
        """
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.dim:
            raise DimensionError(f"input dimension {y.shape[-1]} != {self.dim}")
        p = self.params
        history = []
        x = y
        for l in range(self.layers - 1, -1, -1):
            target = x
            W1, b1, W2, b2 = (p[k][l] for k in PARAM_NAMES)
            xk = target
            steps = []
            for it in range(1, max_iter + 1):
                nxt = target - residual(xk, W1, b1, W2, b2)
                delta = np.max(np.abs(nxt - xk)) if nxt.size else 0.0
                steps.append(delta)
                xk = nxt
                if delta < tol:
                    break
            else:
                raise IterationLimitError(
                    f"block {l} did not converge in {max_iter} iterations "
                    f"(last step {steps[-1]:.3e}); Lipschitz cap violated?"
                )
            history.append(steps)
            x = xk
        if return_history:
            return x, history[::-1]
        return x

    # -- Lipschitz control ---------------------------------------------------

    def spectral_norms(self, max_iter=SIGMA_MAX_ITER, tol=SIGMA_TOL):
        """Power-iteration estimates of ``||W||_2`` per block, per weight."""
        return {k: self._power_iterate(k, max_iter, tol) for k in ("W1", "W2")}

    def _power_iterate(self, key, max_iter, tol):
        W = self.params[key]
        v = self._power_vectors[key]
        sigma = np.zeros(W.shape[0])
        for _ in range(max_iter):
            u = np.einsum("lij,lj->li", W, v)
            w = np.einsum("lij,li->lj", W, u)
            new_sigma = np.sqrt(np.linalg.norm(w, axis=1))
            wn = np.linalg.norm(w, axis=1, keepdims=True)
            v = np.where(wn > 0, w / np.where(wn > 0, wn, 1.0), v)
            done = np.max(np.abs(new_sigma - sigma)) < tol
            sigma = new_sigma
            if done:
                break
        self._power_vectors[key] = v
        return sigma

    def project_spectral_norms(self, cap=None):
        """Rescale every weight matrix whose spectral norm exceeds ``cap``."""
        cap = self.cap if cap is None else cap
        for key in ("W1", "W2"):
            sigma = self._power_iterate(key, SIGMA_MAX_ITER, SIGMA_TOL)
            # the power estimate is a lower bound; certify it against the
            # exact top singular value so the cap holds to rounding error
            sigma = np.maximum(sigma, _top_singular_values(self.params[key]))
            # matrices already at the cap (to rounding) are left alone, which
            # keeps the projection idempotent
            over = sigma > cap * (1.0 + CAP_RTOL)
            scale = np.where(over, cap / np.where(over, sigma, 1.0), 1.0)
            if np.any(scale < 1.0):
                self.params[key] *= scale[:, None, None]
        return self

    # -- persistence -----------------------------------------------------------

    def to_dict(self):
        blocks = []
        for l in range(self.layers):
            blocks.append({k: self.params[k][l].tolist() for k in PARAM_NAMES})
        return {"format_version": FORMAT_VERSION, "dim": self.dim, "cap": self.cap, "blocks": blocks}

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise CheckpointError("checkpoint must be a JSON object")
        if "format_version" not in data:
            raise CheckpointError("missing field", "format_version")
        if data["format_version"] != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"unsupported checkpoint version {data['format_version']!r} "
                f"(expected {FORMAT_VERSION})", "format_version")
        for field in ("dim", "cap", "blocks"):
            if field not in data:
                raise CheckpointError("missing field", field)
        n = data["dim"]
        if not isinstance(n, int) or n < 1:
            raise CheckpointError(f"invalid dimension {n!r}", "dim")
        blocks = data["blocks"]
        if not isinstance(blocks, list) or not blocks:
            raise CheckpointError("expected a non-empty list", "blocks")
        shapes = {"W1": (2 * n, n), "b1": (2 * n,), "W2": (n, 2 * n), "b2": (n,)}
        stacked = {k: [] for k in PARAM_NAMES}
        for i, block in enumerate(blocks):
            if not isinstance(block, dict):
                raise CheckpointError("expected an object", f"blocks[{i}]")
            for k in PARAM_NAMES:
                path = f"blocks[{i}].{k}"
                if k not in block:
                    raise CheckpointError("missing field", path)
                try:
                    arr = np.array(block[k], dtype=np.float64)
                except (TypeError, ValueError) as exc:
                    raise CheckpointError(f"not a numeric array ({exc})", path) from None
                if arr.shape != shapes[k]:
                    raise CheckpointError(f"shape {arr.shape}, expected {shapes[k]}", path)
                stacked[k].append(arr)
        try:
            cap = float(data["cap"])
        except (TypeError, ValueError):
            raise CheckpointError("not a number", "cap") from None
        net = cls.__new__(cls)
        net.dim, net.layers, net.cap = n, len(blocks), cap
        net.params = {k: np.stack(v) for k, v in stacked.items()}
        rng = np.random.default_rng(0)
        net._power_vectors = {
            "W1": _unit_rows(rng.normal(size=(net.layers, n))),
            "W2": _unit_rows(rng.normal(size=(net.layers, 2 * n))),
        }
        return net

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint ({exc.strerror})", str(path)) from None
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"invalid JSON: {exc}", str(path)) from None
        return cls.from_dict(data)


def residual(x, W1, b1, W2, b2):
    """Residual branch ``W2 relu(W1 x + b1) + b2``."""
    return ad.linear(ad.relu(ad.linear(x, W1, b1)), W2, b2)


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


class LinearMap:
    """Exact linear transformation ``x -> Q x + shift`` with the same call
    surface as :class:`IResNet`.

    Used to inject a known ground-truth alignment in place of a trained
    network.
    """

    def __init__(self, Q, shift=None):
        self.Q = np.asarray(Q, dtype=np.float64)
        self.dim = self.Q.shape[0]
        self.shift = np.zeros(self.dim) if shift is None else np.asarray(shift, dtype=np.float64)
        self._Qinv = np.linalg.inv(self.Q)

    def forward(self, x, bound=None):
        return ad.linear(x, self.Q, self.shift)

    __call__ = forward

    def jvp(self, x, v):
        return ad.jvp(self.forward, x, v)

    def inverse(self, y, **_):
        return (np.asarray(y) - self.shift) @ self._Qinv.T

    def inverted(self):
        return LinearMap(self._Qinv, -self._Qinv @ self.shift)
