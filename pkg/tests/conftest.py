import numpy as np
import pytest

from dh_lyapunov.dist_models import ref1, BiweightBump, DistributionModel, Mixture


def biweight_pdf(t, a, b):
    """Independent closed form of the normalized biweight bump."""
    t = np.asarray(t, dtype=float)
    w = b - a
    return np.where((t > a) & (t < b), 30.0 / w**5 * (t - a) ** 2 * (b - t) ** 2, 0.0)


def ref1_pdf(t):
    return 0.6 * biweight_pdf(t, 0.2, 0.6) + 0.4 * biweight_pdf(t, 2.0, 3.0)


def trapezoid_moment(fun, lo, hi, n=1_000_001):
    t = np.linspace(lo, hi, n)
    return np.trapezoid(fun(t), t) if hasattr(np, "trapezoid") else np.trapz(fun(t), t)


@pytest.fixture(scope="session")
def model():
    return ref1()


@pytest.fixture(scope="session")
def alpha(model):
    from dh_lyapunov.alpha_delta import solve_alpha

    return solve_alpha(model)[0]


@pytest.fixture(scope="session")
def zero(model, alpha):
    """nu_0, omega_0 and their fits at default resolution."""
    from dh_lyapunov.dh_asymptotics import eps_zero_objects

    return eps_zero_objects(model, alpha)


def mixture(weights, bumps):
    return DistributionModel(Mixture(tuple(weights), tuple(BiweightBump(a, b) for a, b in bumps)))


def random_probability_grid(rng, nodes, atom=0.0, eps=0.0):
    """Random non-increasing tail on ``nodes`` with G = 1 - atom at the first node and 0 at the last."""
    from dh_lyapunov.transfer_grid import TailGrid

    w = rng.dirichlet(np.full(nodes.size - 1, 0.3))
    vals = (1.0 - atom) * np.concatenate([[1.0], 1.0 - np.cumsum(w)])
    vals[-1] = 0.0
    vals = np.maximum(vals, 0.0)
    return TailGrid(nodes, vals, 1.0, epsilon=eps)


# acceptance report: one line per criterion, printed after the run
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
