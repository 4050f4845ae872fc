"""Autonomous vector fields used as alignment subjects.

Every field is a callable ``f(x)`` mapping a point (or a batch of points as
rows) to velocities.  Fields are written with :mod:`orbitalign.autodiff`
operations, so they evaluate numpy arrays directly and also accept tape
tensors and dual values when they appear inside a loss.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ContractError, DimensionError, UnsupportedVersionError

WEIGHTS_FORMAT_VERSION = 1


class VectorField:
    kind = "Custom"
    dim: int

    def __call__(self, x):
        if ad._shape(x)[-1] != self.dim:
            raise DimensionError(f"{self.kind} field has dimension {self.dim}, got {ad._shape(x)}")
        return self.evaluate(x)

    def evaluate(self, x):
        raise NotImplementedError

    def jacobian(self, x):
        """Dense Jacobian at one point (columns from forward-mode passes)."""
        x = np.asarray(x, dtype=np.float64)
        xs = np.broadcast_to(x, (self.dim, self.dim))
        return np.asarray(ad.jvp(self, xs, np.eye(self.dim))).T

    def to_spec(self):
        raise NotImplementedError(f"{self.kind} fields are not serializable")


class Custom(VectorField):
    def __init__(self, fn, dim, name="Custom"):
        self.fn = fn
        self.dim = int(dim)
        self.kind = name

    def evaluate(self, x):
        return self.fn(x)


class VanDerPol(VectorField):
    """``x1' = x2``, ``x2' = mu (1 - x1^2) x2 - x1``."""

    kind = "VanDerPol"
    dim = 2

    def __init__(self, mu=1.0):
        self.mu = float(mu)

    def evaluate(self, x):
        x1, x2 = x[..., 0], x[..., 1]
        dx2 = self.mu * (1.0 - x1 * x1) * x2 - x1
        return ad.stack([x2, dx2], axis=-1)

    def to_spec(self):
        return {"kind": self.kind, "mu": self.mu}


class Pitchfork(VectorField):
    """Supercritical pitchfork normal form ``x1' = mu x1 - x1^3``, ``x2' = -x2``.

    For ``mu > 0`` the origin is a saddle and ``(+-sqrt(mu), 0)`` are stable
    nodes.
    """

    kind = "Pitchfork"
    dim = 2

    def __init__(self, mu=1.0):
        self.mu = float(mu)

    def evaluate(self, x):
        x1, x2 = x[..., 0], x[..., 1]
        return ad.stack([self.mu * x1 - x1 * x1 * x1, -x2], axis=-1)

    def to_spec(self):
        return {"kind": self.kind, "mu": self.mu}


class Linear(VectorField):
    kind = "Linear"

    def __init__(self, A, bias=None):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        self.A = A
        self.dim = A.shape[0]
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        if self.bias is not None and self.bias.shape != (self.dim,):
            raise DimensionError(f"bias shape {self.bias.shape} for A{A.shape}")

    def evaluate(self, x):
        return ad.linear(x, self.A, self.bias)

    def to_spec(self):
        return {
            "kind": self.kind,
            "A": self.A.tolist(),
            "bias": None if self.bias is None else self.bias.tolist(),
        }


class LowRankRNN(VectorField):
    """Rate network ``x' = -x + W tanh(x)`` with ``W = J + m nvec^T``."""

    kind = "LowRankRNN"

    def __init__(self, J, m, nvec):
        self.J = np.asarray(J, dtype=np.float64)
        n = self.J.shape[0]
        if self.J.shape != (n, n):
            raise DimensionError(f"J must be square, got {self.J.shape}")
        self.m = np.asarray(m, dtype=np.float64).reshape(n, -1)
        self.nvec = np.asarray(nvec, dtype=np.float64).reshape(n, -1)
        if self.m.shape != self.nvec.shape:
            raise DimensionError(f"m {self.m.shape} and nvec {self.nvec.shape} differ")
        self.dim = n
        self.W = self.J + self.m @ self.nvec.T

    def evaluate(self, x):
        return ad.linear(ad.tanh(x), self.W) - x

    def to_spec(self):
        return {"kind": self.kind, "J": self.J.tolist(), "m": self.m.tolist(), "nvec": self.nvec.tolist()}


class ContextRNN(VectorField):
    """``tau x' = -x + (W + Gamma) tanh(x) + B1 u`` with the input held fixed."""

    kind = "ContextRNN"

    def __init__(self, tau, W, B1, u, Gamma=None):
        self.tau = float(tau)
        self.W = np.asarray(W, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise DimensionError(f"W must be square, got {self.W.shape}")
        n = self.W.shape[0]
        self.B1 = np.asarray(B1, dtype=np.float64).reshape(n, -1)
        self.u = np.asarray(u, dtype=np.float64).reshape(-1)
        if self.B1.shape[1] != self.u.shape[0]:
            raise DimensionError(f"B1 {self.B1.shape} does not accept u of length {self.u.shape[0]}")
        self.Gamma = None if Gamma is None else np.asarray(Gamma, dtype=np.float64)
        if self.Gamma is not None and self.Gamma.shape != self.W.shape:
            raise DimensionError(f"Gamma {self.Gamma.shape} does not match W {self.W.shape}")
        if self.tau <= 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        self.dim = n
        self.W_eff = self.W if self.Gamma is None else self.W + self.Gamma
        self.drive = self.B1 @ self.u

    def evaluate(self, x):
        return (ad.linear(ad.tanh(x), self.W_eff, self.drive) - x) / self.tau

    def to_spec(self):
        return {
            "format_version": WEIGHTS_FORMAT_VERSION,
            "tau": self.tau,
            "W": self.W.tolist(),
            "B1": self.B1.tolist(),
            "u": self.u.tolist(),
            "Gamma": None if self.Gamma is None else self.Gamma.tolist(),
        }


class LinearConjugate(VectorField):
    """``y -> Q f(Q^-1 y)``: the image of ``f`` under ``y = Q x``."""

    kind = "LinearConjugate"

    def __init__(self, base, Q):
        Q = np.asarray(Q, dtype=np.float64)
        if Q.shape != (base.dim, base.dim):
            raise DimensionError(f"Q {Q.shape} does not match field dimension {base.dim}")
        det = np.linalg.det(Q)
        if abs(det) <= 1e-9:
            raise ContractError(f"Q is numerically singular (det={det:.3e})")
        self.base = base
        self.Q = Q
        self.Qinv = np.linalg.inv(Q)
        self.dim = base.dim

    def evaluate(self, y):
        return ad.linear(self.base(ad.linear(y, self.Qinv)), self.Q)

    def to_spec(self):
        return {"kind": self.kind, "base": self.base.to_spec(), "Q": self.Q.tolist()}


class PushForward(VectorField):
    """Image of ``base`` under an invertible network ``warp``.

    ``g(y) = dwarp/dx|_x base(x)`` at ``x = warp^-1(y)``.  The inverse is found
    numerically; gradients through it use the implicit-function rule, so the
    field can sit inside a recorded loss.  Dual inputs are not supported
    (that would need second derivatives of the warp).
    """

    kind = "PushForward"

    def __init__(self, base, warp):
        if warp.dim != base.dim:
            raise DimensionError(f"warp dim {warp.dim} != field dim {base.dim}")
        self.base = base
        self.warp = warp
        self.dim = base.dim

    def evaluate(self, y):
        if isinstance(y, ad.Dual):
            raise NotImplementedError("PushForward does not propagate tangents")
        x = _implicit_inverse(self.warp, y)
        return self.warp.forward(ad.Dual(x, self.base(x))).tangent


def _implicit_inverse(warp, y):
    yv = ad.value_of(y)
    # absolute steps below the rounding floor of |y| never register
    scale = max(1.0, float(np.max(np.abs(yv)))) if np.size(yv) else 1.0
    x = warp.inverse(yv, tol=1e-12 * scale, max_iter=1000)
    if not isinstance(y, ad.Tensor):
        return x
    # dx = J(x)^-1 dy, so the cotangent is J(x)^-T g.
    n = warp.dim
    xs = np.repeat(x[..., None, :], n, axis=-2)
    eye = np.broadcast_to(np.eye(n), xs.shape)
    cols = ad.value_of(warp.jvp(xs.reshape(-1, n), eye.reshape(-1, n))).reshape(xs.shape)
    jac = np.swapaxes(cols, -1, -2)

    def vjp(g):
        return (np.linalg.solve(np.swapaxes(jac, -1, -2), g[..., None])[..., 0],)

    return y.tape._record(x, (y,), vjp)


def make_conjugate(field, Q):
    """Field topologically conjugate to ``field`` through ``y = Q x``."""
    return LinearConjugate(field, Q)


# -- random constructions ------------------------------------------------------

def random_orthogonal(n, rng, proper=True):
    """Haar orthogonal matrix from the QR of a Gaussian; ``det = +1`` if proper."""
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    q = q * np.sign(np.diag(r))
    if proper and np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_invertible(n, rng, positive_det=True):
    """Standard-normal matrix, redrawn until usable; column flip fixes the sign."""
    while True:
        Q = rng.normal(size=(n, n))
        det = np.linalg.det(Q)
        if abs(det) > 1e-3 and np.linalg.cond(Q) < 1e3:
            break
    if positive_det and det < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def _well_conditioned(n, rng):
    U = random_orthogonal(n, rng)
    V = random_orthogonal(n, rng)
    return U @ np.diag(rng.uniform(0.5, 2.0, size=n)) @ V.T


def random_linear_with_signs(n, n_pos, pairing="real", seed=None, *, complex_pos=None,
                             complex_neg=None, rng=None):
    """Linear system ``A = P D P^-1`` with ``n_pos`` eigenvalues in the right half plane.

    ``pairing`` controls how many eigenvalues are complex: ``"real"`` (none),
    ``"complex"`` (all; needs even counts on both sides) or ``"mixed"``
    (a random feasible number of pairs per side).  ``complex_pos`` /
    ``complex_neg`` set the number of complex pairs on each side explicitly.
    Real parts have magnitude in [0.5, 2]; imaginary parts lie in [0.5, 2].
    """
    if not 0 <= n_pos <= n:
        raise ContractError(f"n_pos must be within [0, {n}], got {n_pos}")
    rng = np.random.default_rng(seed) if rng is None else rng
    n_neg = n - n_pos
    if complex_pos is None or complex_neg is None:
        if pairing == "real":
            cp, cn = 0, 0
        elif pairing == "complex":
            if n_pos % 2 or n_neg % 2:
                raise ContractError(
                    f"all-complex spectrum needs even counts, got {n_pos} positive / {n_neg} negative")
            cp, cn = n_pos // 2, n_neg // 2
        elif pairing == "mixed":
            cp = int(rng.integers(0, n_pos // 2 + 1))
            cn = int(rng.integers(0, n_neg // 2 + 1))
        else:
            raise ContractError(f"unknown pairing {pairing!r}")
        complex_pos = cp if complex_pos is None else complex_pos
        complex_neg = cn if complex_neg is None else complex_neg
    if 2 * complex_pos > n_pos or 2 * complex_neg > n_neg:
        raise ContractError("more complex pairs requested than eigenvalues available")
    blocks = []
    for sign, count, pairs in ((1.0, n_pos, complex_pos), (-1.0, n_neg, complex_neg)):
        for _ in range(pairs):
            a = sign * rng.uniform(0.5, 2.0)
            b = rng.uniform(0.5, 2.0)
            blocks.append(np.array([[a, -b], [b, a]]))
        for _ in range(count - 2 * pairs):
            blocks.append(np.array([[sign * rng.uniform(0.5, 2.0)]]))
    D = np.zeros((n, n))
    i = 0
    for blk in blocks:
        k = blk.shape[0]
        D[i:i + k, i:i + k] = blk
        i += k
    P = _well_conditioned(n, rng)
    A = P @ D @ np.linalg.inv(P)
    return Linear(A)


def random_lowrank_rnn(n, k=2, seed=None, *, j_std=0.5, scale_j_by_sqrt_n=True, rng=None):
    """Random-plus-low-rank rate network.

    ``J`` has entries with standard deviation ``j_std / sqrt(n)`` (spectral
    radius near ``j_std``) unless ``scale_j_by_sqrt_n`` is false, ``m`` is
    standard normal and ``nvec`` has standard deviation ``1 / sqrt(n)``.
    """
    if n < 1 or k < 0:
        raise ContractError(f"need n >= 1 and k >= 0, got n={n}, k={k}")
    rng = np.random.default_rng(seed) if rng is None else rng
    std = j_std / np.sqrt(n) if scale_j_by_sqrt_n else j_std
    J = rng.normal(0.0, std, size=(n, n))
    m = rng.normal(0.0, 1.0, size=(n, k))
    nvec = rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, k))
    return LowRankRNN(J, m, nvec)


# -- persistence -----------------------------------------------------------

def _matrix(data, path, ndim=2):
    try:
        arr = np.array(data, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"not a numeric array ({exc})", path) from None
    if arr.ndim != ndim:
        raise CheckpointError(f"expected a rank-{ndim} array, got rank {arr.ndim}", path)
    if not np.all(np.isfinite(arr)):
        raise CheckpointError("non-finite entries", path)
    return arr


def rnn_from_dict(data):
    if not isinstance(data, dict):
        raise CheckpointError("weights file must hold a JSON object")
    for field in ("format_version", "tau", "W", "B1", "u"):
        if field not in data:
            raise CheckpointError("missing field", field)
    if data["format_version"] != WEIGHTS_FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported weights version {data['format_version']!r}", "format_version")
    try:
        tau = float(data["tau"])
    except (TypeError, ValueError):
        raise CheckpointError("not a number", "tau") from None
    W = _matrix(data["W"], "W")
    if W.shape[0] != W.shape[1]:
        raise DimensionError(f"W must be square, got {W.shape}")
    B1 = _matrix(data["B1"], "B1")
    u = _matrix(data["u"], "u", ndim=1)
    gamma = data.get("Gamma")
    Gamma = None if gamma is None else _matrix(gamma, "Gamma")
    return ContextRNN(tau, W, B1, u, Gamma)


def load_rnn_weights(path):
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read weights file ({exc.strerror})", str(path)) from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"invalid JSON: {exc}", str(path)) from None
    return rnn_from_dict(data)


def save_rnn_weights(field, path):
    Path(path).write_text(json.dumps(field.to_spec()))


def field_from_spec(spec):
    """Build a field from its JSON description (tagged on ``"kind"``).

    Random kinds (``random_linear``, ``random_lowrank_rnn``) take a ``seed``.
    """
    kind = spec.get("kind")
    if kind == "VanDerPol":
        return VanDerPol(spec.get("mu", 1.0))
    if kind == "Pitchfork":
        return Pitchfork(spec.get("mu", 1.0))
    if kind == "Linear":
        return Linear(spec["A"], spec.get("bias"))
    if kind == "LowRankRNN":
        return LowRankRNN(spec["J"], spec["m"], spec["nvec"])
    if kind == "ContextRNN":
        return rnn_from_dict({"format_version": WEIGHTS_FORMAT_VERSION, **spec})
    if kind == "LinearConjugate":
        return LinearConjugate(field_from_spec(spec["base"]), spec["Q"])
    if kind == "random_linear":
        return random_linear_with_signs(spec["n"], spec["n_pos"], spec.get("pairing", "real"),
                                        seed=spec.get("seed"))
    if kind == "random_lowrank_rnn":
        return random_lowrank_rnn(spec["n"], spec.get("k", 2), seed=spec.get("seed"),
                                  scale_j_by_sqrt_n=spec.get("scale_j_by_sqrt_n", True))
    if kind == "rnn_file":
        return load_rnn_weights(spec["path"])
    raise ContractError(f"unknown field kind {kind!r}")
