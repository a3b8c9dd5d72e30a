"""Monte Carlo estimates of the Lyapunov exponent L(eps).

Three estimators share one Z stream per seed: the projective sigma-chain, the
blown-up s-chain, and the renormalized 2x2 matrix product.  Error bars come
from batch means over a single long chain.
"""

from __future__ import annotations

import math
import warnings as _warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .dist_models import make_rng, mellin, sample_array
from .errors import InvalidParameter, OutOfRange

CHUNK = 1 << 20
SIGMA0 = 1.0


# elementary maps ----------------------------------------------------------------


def g_map(eps, s):
    """(1 + s) / (1 + eps^2 s)."""
    return (1.0 + s) / (1.0 + eps * eps * s)


def h_map(eps, sigma):
    """(eps^2 + sigma) / (1 + sigma)."""
    return (eps * eps + sigma) / (1.0 + sigma)


def g_inv(eps, y):
    y = np.asarray(y, dtype=float)
    e2 = eps * eps
    upper = math.inf if e2 == 0 else 1.0 / e2
    if np.any(y < 1.0) or np.any(y >= upper):
        raise OutOfRange(f"g_inv needs y in [1, {upper:g})")
    out = (y - 1.0) / (1.0 - e2 * y)
    return float(out) if out.ndim == 0 else out


def h_inv(eps, y):
    y = np.asarray(y, dtype=float)
    e2 = eps * eps
    if np.any(y < e2) or np.any(y >= 1.0):
        raise OutOfRange(f"h_inv needs y in [{e2:g}, 1)")
    out = (y - e2) / (1.0 - y)
    return float(out) if out.ndim == 0 else out


def step_sigma(sigma, z, eps):
    return z * h_map(eps, sigma)


def step_s(s, z, eps):
    return z * g_map(eps, s)


# configuration and results ------------------------------------------------------


def default_burn_in(model):
    return max(10_000, math.ceil(10.0 / abs(mellin(model, 0.0, deriv=1))))


@dataclass(frozen=True)
class ChainConfig:
    epsilon: float
    n_steps: int
    burn_in: int
    seed: int
    n_batches: int = 32

    def __post_init__(self):
        if not (-1.0 < self.epsilon < 1.0):
            raise InvalidParameter(f"epsilon must lie in (-1, 1), got {self.epsilon}")
        if self.n_batches < 8:
            raise InvalidParameter("n_batches must be at least 8")
        if not (0 <= self.burn_in < self.n_steps):
            raise InvalidParameter("need 0 <= burn_in < n_steps")
        if (self.n_steps - self.burn_in) % self.n_batches:
            raise InvalidParameter("n_steps - burn_in must split into equal batches")

    @classmethod
    def create(cls, epsilon, n_steps, seed, model=None, burn_in=None, n_batches=32):
        """Build a config, growing burn_in just enough for equal batches."""
        if burn_in is None:
            burn_in = default_burn_in(model) if model is not None else 10_000
        kept = (int(n_steps) - int(burn_in)) // n_batches * n_batches
        if kept <= 0:
            raise InvalidParameter(f"n_steps={n_steps} too short for burn_in={burn_in}")
        return cls(float(epsilon), int(n_steps), int(n_steps) - kept, int(seed), int(n_batches))

    @property
    def batch_len(self):
        return (self.n_steps - self.burn_in) // self.n_batches


@dataclass
class LyapunovEstimate:
    epsilon: float
    mean: float
    std_error: float
    n_effective: int
    method: str
    seed: int
    rho1: float = 0.0
    warnings: list = field(default_factory=list)

    CSV_COLUMNS = ("epsilon", "method", "mean", "std_error", "n_effective", "seed")

    def csv_row(self):
        return [repr(float(self.epsilon)), self.method, repr(float(self.mean)),
                repr(float(self.std_error)), str(int(self.n_effective)), str(int(self.seed))]

    def to_dict(self):
        return {"epsilon": self.epsilon, "method": self.method, "mean": self.mean,
                "std_error": self.std_error, "n_effective": self.n_effective, "seed": self.seed,
                "rho1": self.rho1, "warnings": list(self.warnings)}


# numba kernels --------------------------------------------------------------------


@numba.njit(cache=True)
def _sigma_kernel(z, eps2, sigma, out):
    for n in range(z.shape[0]):
        sigma = z[n] * (eps2 + sigma) / (1.0 + sigma)
        out[n] = math.log1p(sigma)
    return sigma


@numba.njit(cache=True)
def _s_kernel(z, eps2, s, out):
    for n in range(z.shape[0]):
        s = z[n] * (1.0 + s) / (1.0 + eps2 * s)
        out[n] = math.log1p(eps2 * s)
    return s


@numba.njit(cache=True)
def _matrix_kernel(z, eps, p, out):
    p00, p01, p10, p11 = p[0], p[1], p[2], p[3]
    for n in range(z.shape[0]):
        zn = z[n]
        q00 = p00 + eps * p10
        q01 = p01 + eps * p11
        q10 = eps * zn * p00 + zn * p10
        q11 = eps * zn * p01 + zn * p11
        m = max(max(abs(q00), abs(q01)), max(abs(q10), abs(q11)))
        p00, p01, p10, p11 = q00 / m, q01 / m, q10 / m, q11 / m
        out[n] = math.log(m)
    p[0], p[1], p[2], p[3] = p00, p01, p10, p11


# driver ---------------------------------------------------------------------------


def z_stream(model, seed, n, chunk=CHUNK):
    """Yield the Z sequence for ``seed`` in chunks; identical across estimators."""
    rng = make_rng(seed, 0)
    done = 0
    while done < n:
        k = min(chunk, n - done)
        yield sample_array(model, rng, k)
        done += k


def _run(model, config, kernel_step, method, check=None):
    sums = np.zeros(config.n_batches)
    sumsq = [0.0]
    blen = config.batch_len
    pos = 0
    out = np.empty(CHUNK)
    for z in z_stream(model, config.seed, config.n_steps):
        buf = out[: z.size]
        kernel_step(z, buf)
        if check is not None:
            check(pos, buf)
        idx = np.arange(pos, pos + z.size) - config.burn_in
        keep = idx >= 0
        if keep.any():
            sums += np.bincount(idx[keep] // blen, weights=buf[keep], minlength=config.n_batches)
            sumsq[0] += float(np.dot(buf[keep], buf[keep]))
        pos += z.size
    batch_means = sums / blen
    mean = float(batch_means.mean())
    se = float(batch_means.std(ddof=1) / math.sqrt(config.n_batches))
    n_post = config.n_steps - config.burn_in
    est = LyapunovEstimate(config.epsilon, mean, se, n_post, method, config.seed)
    centered = batch_means - mean
    denom = float(np.dot(centered, centered))
    est.rho1 = float(np.dot(centered[1:], centered[:-1]) / denom) if denom > 0 else 0.0
    if abs(est.rho1) >= 0.3:
        msg = f"{method} eps={config.epsilon}: lag-1 autocorrelation of batch means {est.rho1:.2f}; burn-in or batches too short"
        est.warnings.append(msg)
        _warnings.warn(msg, RuntimeWarning, stacklevel=3)
    if se > 0:
        # summand variance over squared standard error, capped at the raw count
        var = sumsq[0] / n_post - mean * mean
        est.n_effective = int(min(n_post, max(var, 0.0) / (se * se)))
    return est


def lyapunov_mc(model, config, sigma0=SIGMA0, debug=False):
    """Sigma-chain estimate: batch-mean average of log(1 + sigma_n)."""
    eps2 = config.epsilon**2
    state = [float(sigma0)]

    def step(z, buf):
        state[0] = _sigma_kernel(z, eps2, state[0], buf)

    check = None
    if debug:
        lo, hi = model.support.c_minus * eps2, model.support.c_plus

        def check(pos, buf):
            sig = np.expm1(buf[max(0, 2 - pos):])
            if sig.size and (sig.min() < lo * (1 - 1e-12) or sig.max() > hi * (1 + 1e-12)):
                raise AssertionError("sigma left the absorbing interval [c_minus eps^2, c_plus]")

    return _run(model, config, step, "sigma_chain", check)


def lyapunov_s_chain(model, config, sigma0=SIGMA0):
    """s-chain estimate: average of log(1 + eps^2 s_n), started at s_0 = sigma0 / eps^2."""
    if config.epsilon == 0:
        raise InvalidParameter("the s-chain does not estimate L(0)")
    eps2 = config.epsilon**2
    state = [float(sigma0) / eps2]

    def step(z, buf):
        state[0] = _s_kernel(z, eps2, state[0], buf)

    return _run(model, config, step, "s_chain")


def lyapunov_matrix(model, config, debug=False):
    """Renormalized product of [[1, eps], [eps Z, Z]]; summands are the logs of the normalizers."""
    p = np.array([1.0, 0.0, 0.0, 1.0])
    eps = float(config.epsilon)

    def step(z, buf):
        _matrix_kernel(z, eps, p, buf)
        if debug and eps > 0 and not np.all(p > 0):
            raise AssertionError("running product lost strict positivity")

    return _run(model, config, step, "matrix_product")


def sigma_trajectory(model, seed, n, eps, sigma0=SIGMA0):
    """Raw sigma_1..sigma_n for diagnostics and tests."""
    out = np.empty(n)
    sigma = float(sigma0)
    pos = 0
    for z in z_stream(model, seed, n):
        buf = np.empty(z.size)
        sigma = _sigma_kernel(z, eps * eps, sigma, buf)
        out[pos : pos + z.size] = np.expm1(buf)
        pos += z.size
    return out


def summands(model, seed, n, eps, method, sigma0=SIGMA0):
    """Per-step summands of one estimator (used to compare charts step by step)."""
    out = np.empty(n)
    pos = 0
    eps2 = eps * eps
    state = float(sigma0) if method == "sigma_chain" else float(sigma0) / eps2
    p = np.array([1.0, 0.0, 0.0, 1.0])
    for z in z_stream(model, seed, n):
        buf = out[pos : pos + z.size]
        if method == "sigma_chain":
            state = _sigma_kernel(z, eps2, state, buf)
        elif method == "s_chain":
            state = _s_kernel(z, eps2, state, buf)
        else:
            _matrix_kernel(z, eps, p, buf)
        pos += z.size
    return out
