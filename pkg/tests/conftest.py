import numpy as np
import pytest


def central_difference(fn, x, direction, eps=1e-5):
    """Directional derivative of a numpy function by central differences."""
    return (fn(x + eps * direction) - fn(x - eps * direction)) / (2 * eps)


def jacobi_singular_values(A, sweeps=60):
    """One-sided Jacobi SVD: orthogonalize columns pairwise, return sorted norms."""
    U = np.array(A, dtype=np.float64)
    n = U.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                a = U[:, i] @ U[:, i]
                b = U[:, j] @ U[:, j]
                c = U[:, i] @ U[:, j]
                if a * b == 0.0 or abs(c) <= 1e-15 * np.sqrt(a * b):
                    continue
                off = max(off, abs(c) / np.sqrt(a * b))
                zeta = (b - a) / (2 * c)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta)) if zeta != 0 else 1.0
                cs = 1 / np.sqrt(1 + t * t)
                sn = cs * t
                ui, uj = U[:, i].copy(), U[:, j].copy()
                U[:, i] = cs * ui - sn * uj
                U[:, j] = sn * ui + cs * uj
        if off < 1e-15:
            break
    return np.sort(np.linalg.norm(U, axis=0))[::-1]


def net_loss_fn(net, loss):
    """Wrap ``loss(net)`` as a function of the flattened parameter vector."""
    keys = list(net.params)
    shapes = [net.params[k].shape for k in keys]
    sizes = [int(np.prod(s)) for s in shapes]

    def unflatten(theta):
        out, i = {}, 0
        for k, s, n in zip(keys, shapes, sizes):
            out[k] = theta[i:i + n].reshape(s)
            i += n
        return out

    def flat(params):
        return np.concatenate([params[k].ravel() for k in keys])

    def fn(theta):
        saved = net.params
        net.params = unflatten(theta)
        try:
            return float(loss())
        finally:
            net.params = saved

    return fn, flat, unflatten


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


VERDICTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
