"""Tail constants, the pasted measure gamma_hat, C_mu, and the scaling sweep.

The small-eps law L(eps) ~ C_mu eps^{2 alpha} is assembled from two eps = 0
objects: the tail C_nu t^{-alpha} of nu_0 (s chart) and the head
C_omega sigma^{-alpha} of omega_0 (sigma chart).  gamma_hat glues them at
s = 1/eps; its one-step defect under T_eps bounds how far L_eps[gamma_hat]
is from L(eps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from .alpha_delta import c_beta, find_delta, solve_alpha
from .chain_sim import ChainConfig, lyapunov_mc
from .errors import DegenerateRemainder, DomainTooNarrow, FitRejected, InvalidParameter, NoConvergence
from .transfer_grid import (
    OperatorConfig,
    TailGrid,
    TransferOperator,
    L_functional,
    default_y,
    eps_grid_nodes,
    fixed_point_nu,
    fixed_point_omega0,
    triple_norm,
)

FIT_RMS_MAX = 0.05
ALPHA_CONSISTENCY = 0.05


@dataclass
class TailFit:
    C: float
    alpha_fit: float
    window: tuple
    remainder_exponent: float = float("nan")
    rms_residual: float = 0.0
    alpha_ref: float | None = None
    C_ref: float | None = None
    K: float = 0.0
    direction: str = "tail"
    warnings: list = field(default_factory=list)

    @property
    def amplitude(self):
        """Amplitude at the reference exponent when one was given, else the free-fit C."""
        return self.C_ref if self.C_ref is not None else self.C

    def to_dict(self):
        return {"C": self.C, "alpha_fit": self.alpha_fit, "window": list(self.window),
                "remainder_exponent": self.remainder_exponent, "rms_residual": self.rms_residual,
                "alpha_ref": self.alpha_ref, "C_ref": self.C_ref, "K": self.K,
                "direction": self.direction, "warnings": list(self.warnings)}


def _window_nodes(G, window):
    lo, hi = window
    if not (0 < lo < hi):
        raise InvalidParameter(f"bad fit window {window}")
    sel = (G.nodes >= lo) & (G.nodes <= hi) & (G.values > 0)
    if np.count_nonzero(sel) < 5:
        raise FitRejected(f"fewer than 5 positive nodes in window {window}")
    return G.nodes[sel], G.values[sel]


def fit_tail_nu0(G, window=None, alpha_ref=None, max_rms=FIT_RMS_MAX, c_plus=None):
    """Least-squares line through (log t, log G) on the window: G ~ C t^{-alpha_fit}.

    Default window: [10 c_plus, t_max / 10] (c_plus falls back to 15 times the first node).
    """
    if window is None:
        c_plus = 15.0 * G.nodes[0] if c_plus is None else c_plus
        window = (10.0 * c_plus, G.nodes[-1] / 10.0)
    x, v = _window_nodes(G, window)
    lx, lv = np.log(x), np.log(v)
    slope, icpt = np.polyfit(lx, lv, 1)
    rms = float(np.sqrt(np.mean((lv - (slope * lx + icpt)) ** 2)))
    fit = TailFit(C=float(np.exp(icpt)), alpha_fit=float(-slope), window=tuple(map(float, window)),
                  rms_residual=rms, alpha_ref=alpha_ref, direction="tail")
    if rms > max_rms:
        raise FitRejected(f"log-log rms residual {rms:.3g} > {max_rms}", fit=fit)
    if alpha_ref is not None:
        fit.C_ref = float(np.exp(np.mean(lv + alpha_ref * lx)))
        if abs(fit.alpha_fit - alpha_ref) > ALPHA_CONSISTENCY:
            fit.warnings.append(f"tail exponent {fit.alpha_fit:.4f} differs from alpha {alpha_ref:.4f} by > {ALPHA_CONSISTENCY}")
    return fit


def fit_head_omega0(G, window=None, alpha_ref=None, max_rms=FIT_RMS_MAX):
    """Fit G ~ C sigma^{-alpha_fit} + K on a small-sigma window (least squares in log G)."""
    if window is None:
        y = G.meta.get("y", G.nodes[-1] / 4)
        window = (10.0 * G.nodes[0], y / 10.0)
    x, v = _window_nodes(G, window)
    lx, lv = np.log(x), np.log(v)
    slope, icpt = np.polyfit(lx, lv, 1)

    def resid(p):
        c, a, k = p
        model = c * x**-a + k
        return np.log(np.maximum(model, 1e-300)) - lv

    sol = least_squares(resid, [np.exp(icpt), -slope, 0.0], x_scale=[np.exp(icpt), 0.1, 1.0],
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    c, a, k = map(float, sol.x)
    rms = float(np.sqrt(np.mean(sol.fun**2)))
    fit = TailFit(C=c, alpha_fit=a, window=tuple(map(float, window)), rms_residual=rms,
                  alpha_ref=alpha_ref, K=k, direction="head")
    if rms > max_rms or c <= 0:
        raise FitRejected(f"head fit rms residual {rms:.3g} (C = {c:.3g})", fit=fit)
    sg = x * v
    if not np.all(np.diff(sg) >= -1e-12 * sg.max()):
        fit.warnings.append("sigma G(sigma) is not increasing in sigma on the window (o(1/sigma) check)")
    if alpha_ref is not None:
        A = np.column_stack([x**-alpha_ref, np.ones_like(x)])
        (c_ref, k_ref), *_ = np.linalg.lstsq(A, v, rcond=None)
        fit.C_ref, fit.K = float(c_ref), float(k_ref)
        if abs(fit.alpha_fit - alpha_ref) > ALPHA_CONSISTENCY:
            fit.warnings.append(f"head exponent {fit.alpha_fit:.4f} differs from alpha {alpha_ref:.4f} by > {ALPHA_CONSISTENCY}")
    return fit


def remainder_exponent(G, fit, direction=None, window=None, period=1.0, noise=None):
    """delta' from the decay of |G / (C x^{-alpha}) - 1| along the window.

    C comes from a least-squares fit of C (1 + B x^{-d}) to G x^alpha.  The
    relative remainder may oscillate log-periodically, so the slope is taken
    through the per-bin maxima of |rel| over bins of ``period`` in log x.
    Returns delta' > 0 when the remainder decays away from the singular end.
    """
    direction = direction or fit.direction
    alpha = fit.alpha_ref if fit.alpha_ref is not None else fit.alpha_fit
    window = window or fit.window
    x, v = _window_nodes(G, window)
    scaled = v * x**alpha
    lx = np.log(x)
    sgn = 1.0 if direction == "tail" else -1.0
    # x^{-d} decays toward the far end in either direction
    z = sgn * (lx - (lx[0] if direction == "tail" else lx[-1]))
    n_far = max(5, x.size // 10)
    far = slice(-n_far, None) if direction == "tail" else slice(None, n_far)
    c0 = float(np.median(scaled[far]))
    sol = least_squares(lambda p: scaled / (p[0] * (1 + p[1] * np.exp(-p[2] * z))) - 1.0,
                        [c0, scaled[0 if direction == "tail" else -1] / c0 - 1.0, 0.5],
                        bounds=([0.0, -np.inf, 0.0], [np.inf, np.inf, 10.0]))
    C, B, d_fit = map(float, sol.x)
    rel = scaled / C - 1.0
    if noise is None:
        model_far = 1.0 + B * np.exp(-d_fit * z[far])
        noise = float(np.ptp(scaled[far] / C - model_far)) + 1e-13
    keep = np.abs(rel) > 10 * noise
    if np.count_nonzero(keep) < 5:
        fit.remainder_exponent = float("nan")
        raise DegenerateRemainder(f"relative remainder below 10x grid noise ({noise:.2g}): unresolved")
    lx_k, r_k = lx[keep], np.abs(rel[keep])
    edges = np.arange(lx_k.min(), lx_k.max() + period, period)
    bx, by = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        m = (lx_k >= a) & (lx_k < b)
        if np.any(m):
            i = np.argmax(r_k[m])
            bx.append(lx_k[m][i])
            by.append(np.log(r_k[m][i]))
    if len(bx) < 3:
        lx_b, ly_b = lx_k, np.log(r_k)
    else:
        lx_b, ly_b = np.array(bx), np.array(by)
    slope = float(np.polyfit(lx_b, ly_b, 1)[0])
    d = -slope if direction == "tail" else slope
    fit.remainder_exponent = d
    return d


# pasted measure --------------------------------------------------------------------


@dataclass
class GammaHat:
    grid: TailGrid
    a_eps: float
    mass0: float
    epsilon: float
    pasting_ratio: float = float("nan")

    def normalized(self):
        return self.grid.scaled(1.0 / self.mass0)

    def to_dict(self):
        return {"a_eps": self.a_eps, "mass0": self.mass0, "epsilon": self.epsilon,
                "pasting_ratio": self.pasting_ratio, "n_nodes": int(self.grid.nodes.size)}


def _alpha_of(fits):
    fn, fo = fits
    a = fn.alpha_ref if fn.alpha_ref is not None else fo.alpha_ref
    if a is None:
        raise InvalidParameter("fits need a reference alpha")
    return a


def build_gamma_hat(model, eps, fits, G_nu0, G_omega0, nodes=None, grid_size=2048):
    """Glue nu_0 (below s = 1/eps) to a(eps) omega_0(eps^2 .) (above), a = (C_nu/C_omega) eps^{2 alpha}."""
    if not (0 < eps < 1):
        raise InvalidParameter("eps must lie in (0, 1)")
    fn, fo = fits
    alpha = _alpha_of(fits)
    x_p = 1.0 / eps
    if not (G_nu0.nodes[0] < x_p <= fn.window[1]):
        raise DomainTooNarrow(f"1/eps = {x_p:g} outside the resolved nu_0 range")
    if not (G_omega0.nodes[0] <= eps < G_omega0.nodes[-1]):
        raise DomainTooNarrow(f"eps = {eps:g} outside the omega_0 grid")
    a = fn.amplitude / fo.amplitude * eps ** (2 * alpha)
    if nodes is None:
        nodes = eps_grid_nodes(model, eps, OperatorConfig(epsilon=eps, grid_size=grid_size))
    nodes = np.asarray(nodes, dtype=float)
    w_eps = float(G_omega0(eps))
    nu_p = float(G_nu0(x_p))
    left = nodes < x_p
    vals = np.empty_like(nodes)
    vals[left] = a * w_eps + np.asarray(G_nu0(nodes[left])) - nu_p
    vals[~left] = a * np.asarray(G_omega0(eps * eps * nodes[~left]))
    mass0 = a * w_eps + 1.0 - nu_p
    grid = TailGrid(nodes, vals, mass0, role="gamma_hat", epsilon=eps)
    return GammaHat(grid=grid, a_eps=a, mass0=mass0, epsilon=eps, pasting_ratio=a * w_eps / nu_p)


def compute_C_mu(G_omega0, fits):
    """(C_nu / C_omega) int_0^inf G_omega0(sigma) / (1 + sigma) dsigma."""
    fn, fo = fits
    return fn.amplitude / fo.amplitude * L_functional(G_omega0, 1.0)


def defect_norm(gamma, model, beta, normalized=True, quad_points=3):
    """||T_eps gamma - gamma||_beta for the (by default normalized) pasted measure."""
    if not (0 < beta < 1):
        raise InvalidParameter("beta must lie in (0, 1)")
    if isinstance(gamma, TailGrid):
        g = gamma
    else:
        g = gamma.normalized() if normalized else gamma.grid
    op = TransferOperator(model, g.epsilon, "T", g.nodes, quad_points=quad_points)
    return triple_norm(op.apply(g), beta, g)


# diagnostics --------------------------------------------------------------------------


def powergrowth_diagnostic(G_omega0, y, k, model):
    """Check G(x) <= m (x/y)^{-log m / log a} at nodes x < y, m = 1/G_mu(k), a = k - y."""
    cp = model.support.c_plus
    lo = max(y + 1.0, y / 2.0)
    if not (0 < y < min(cp - 1.0, cp / 2.0)):
        raise InvalidParameter(f"inadmissible y = {y}")
    if not (lo < k < cp):
        raise InvalidParameter(f"k must lie in ({lo:g}, {cp:g}), got {k}")
    gmu = float(model.tail(k))
    m = 1.0 / gmu
    a = k - y
    p = math.log(m) / math.log(a)
    x = G_omega0.nodes[G_omega0.nodes < y]
    with np.errstate(over="ignore"):
        # an infinite bound near c_plus is a vacuous check, not an error
        bound = m * (x / y) ** (-p)
    ratio = np.asarray(G_omega0(x)) / bound
    return {"y": y, "k": k, "m": m, "a": a, "exponent": p, "n_checked": int(x.size),
            "max_ratio": float(ratio.max()) if x.size else 0.0,
            "violations": int(np.count_nonzero(ratio > 1.0))}


def moment_integral(G, U, extend=True):
    """int x^{U-1} G(x) dx; with extend=False only from the first node on."""
    if extend:
        return triple_norm(G, U)
    flat = replace(G, head_exponent=None, lower_limit=float(G.values[0]))
    return triple_norm(flat, U) - float(G.values[0]) * G.nodes[0] ** U / U


def moment_bound_U(G_omega0, fit):
    """(smallest certified U, int_0^inf x^{U-1} G dx at U = alpha_fit + 0.1)."""
    U = fit.alpha_fit + 0.1
    return fit.alpha_fit, moment_integral(G_omega0, U)


# sweep ----------------------------------------------------------------------------------


@dataclass
class SweepRow:
    epsilon: float
    L_transfer: float
    L_transfer_err: float
    prediction: float
    defect_norm: float
    budget: float
    L_gamma: float
    mass0: float
    pasting_ratio: float
    L_mc: float = float("nan")
    L_mc_err: float = float("nan")
    iterations: int = 0
    budget_ok: bool = True
    literal_ok: bool = True
    failed: str = ""

    CSV_COLUMNS = ("epsilon", "L_mc", "L_mc_err", "L_transfer", "L_transfer_err", "prediction",
                   "defect_norm", "budget", "L_gamma", "mass0", "pasting_ratio", "iterations",
                   "budget_ok", "literal_ok", "failed")

    def csv_row(self):
        out = []
        for c in self.CSV_COLUMNS:
            v = getattr(self, c)
            out.append(repr(float(v)) if isinstance(v, float) else str(v))
        return out

    def to_dict(self):
        return {c: getattr(self, c) for c in self.CSV_COLUMNS}


@dataclass
class PredictionReport:
    alpha: float
    delta: float
    beta_used: float
    kappa: float
    C_nu: float
    C_omega: float
    C_mu: float
    c_beta: float
    rows: list
    fitted_global_exponent: float
    nu_fit: TailFit | None = None
    omega_fit: TailFit | None = None
    delta_prime: float = float("nan")
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {"alpha": self.alpha, "delta": self.delta, "beta_used": self.beta_used, "kappa": self.kappa,
                "C_nu": self.C_nu, "C_omega": self.C_omega, "C_mu": self.C_mu, "c_beta": self.c_beta,
                "fitted_global_exponent": self.fitted_global_exponent, "delta_prime": self.delta_prime,
                "nu_fit": self.nu_fit.to_dict() if self.nu_fit else None,
                "omega_fit": self.omega_fit.to_dict() if self.omega_fit else None,
                "rows": [r.to_dict() for r in self.rows], "warnings": list(self.warnings)}


def default_beta(alpha, delta):
    return max(alpha / 2.0, alpha - delta / 2.0)


def kappa_of(alpha, delta, beta):
    return min(beta, beta + delta - alpha, 1.0 - alpha)


def check_beta(alpha, delta, beta):
    lo = max(alpha - delta, 0.0)
    if not (lo < beta < alpha):
        raise InvalidParameter(f"beta must lie in ({lo:g}, {alpha:g}), got {beta}")


@dataclass
class EpsZeroObjects:
    """nu_0 and omega_0 with their fits: shared by every row of a sweep."""
    nu0: TailGrid
    omega0: TailGrid
    nu_fit: TailFit
    omega_fit: TailFit
    C_mu: float


def eps_zero_objects(model, alpha, op_cfg=None, y=None, nu0=None, omega0=None):
    """Solve (unless given) nu_0 and omega_0, fit both, and evaluate C_mu."""
    op_cfg = op_cfg or OperatorConfig()
    nu0 = nu0 if nu0 is not None else fixed_point_nu(model, 0.0, op_cfg, alpha=alpha)
    om = omega0 if omega0 is not None else fixed_point_omega0(model, y=y, config=op_cfg, alpha=alpha)
    fn = fit_tail_nu0(nu0, alpha_ref=alpha, c_plus=model.support.c_plus)
    fo = fit_head_omega0(om, alpha_ref=alpha)
    return EpsZeroObjects(nu0, om, fn, fo, compute_C_mu(om, (fn, fo)))


def transfer_L(model, eps, op_cfg, alpha, nu_solver=None):
    """L_eps[nu_eps] on the configured grid, with |L(N) - L(N/2)| as error estimate."""
    nu_solver = nu_solver or (lambda e, cfg: fixed_point_nu(model, e, cfg, alpha=alpha))
    cfg = OperatorConfig(epsilon=eps, grid_size=op_cfg.grid_size, quad_points=op_cfg.quad_points,
                         tol=op_cfg.tol, max_iter=op_cfg.max_iter)
    nu = nu_solver(eps, cfg)
    half = OperatorConfig(epsilon=eps, grid_size=max(16, op_cfg.grid_size // 2), quad_points=op_cfg.quad_points,
                          tol=op_cfg.tol, max_iter=op_cfg.max_iter)
    coarse = nu_solver(eps, half)
    L = L_functional(nu, eps)
    return nu, L, abs(L - L_functional(coarse, eps))


def scaling_sweep(model, eps_list, beta=None, chain_cfg=None, op_cfg=None, alpha=None, delta=None,
                  zero=None, slack_rel=1e-3, nu_solver=None):
    """Transfer (and optionally Monte Carlo) L(eps) against C_mu eps^{2 alpha} with the error budget.

    chain_cfg: None to skip Monte Carlo, else a dict with n_steps and seed.
    nu_solver(eps, OperatorConfig) -> TailGrid replaces fixed_point_nu (used for caching).
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise InvalidParameter("eps_list must be strictly decreasing")
    op_cfg = op_cfg or OperatorConfig()
    warnings = []
    if alpha is None:
        alpha, _ = solve_alpha(model)
    if delta is None:
        delta = find_delta(model, alpha, warnings=warnings)
    beta = default_beta(alpha, delta) if beta is None else float(beta)
    check_beta(alpha, delta, beta)
    kappa = kappa_of(alpha, delta, beta)
    cb = c_beta(model, beta, alpha)
    zero = zero or eps_zero_objects(model, alpha, op_cfg)
    fn, fo = zero.nu_fit, zero.omega_fit
    warnings += fn.warnings + fo.warnings
    rows = []
    for eps in eps_list:
        try:
            nu, L, Lerr = transfer_L(model, eps, op_cfg, alpha, nu_solver)
            gam = build_gamma_hat(model, eps, (fn, fo), zero.nu0, zero.omega0, nodes=nu.nodes)
            gn = gam.normalized()
            dn = defect_norm(gn, model, beta, quad_points=op_cfg.quad_points)
            pred = zero.C_mu * eps ** (2 * alpha)
            budget = cb * eps ** (2 * beta) * dn
            L_gamma = L_functional(gn, eps)
            slack = abs(L_gamma - pred) + Lerr + slack_rel * L
            row = SweepRow(epsilon=eps, L_transfer=L, L_transfer_err=Lerr, prediction=pred, defect_norm=dn,
                           budget=budget, L_gamma=L_gamma, mass0=gam.mass0, pasting_ratio=gam.pasting_ratio,
                           iterations=int(nu.meta["iterations"]))
            row.budget_ok = bool(abs(L - pred) <= budget + slack)
            row.literal_ok = bool(abs(L - L_gamma) <= budget + Lerr + slack_rel * L)
            if chain_cfg is not None:
                cc = ChainConfig.create(eps, chain_cfg["n_steps"], chain_cfg["seed"], model=model)
                est = lyapunov_mc(model, cc)
                row.L_mc, row.L_mc_err = est.mean, est.std_error
                warnings += est.warnings
        except (NoConvergence, DomainTooNarrow, InvalidParameter) as exc:
            row = SweepRow(eps, *([float("nan")] * 8), failed=f"{type(exc).__name__}: {exc}")
            row.budget_ok = row.literal_ok = False
            warnings.append(f"eps={eps}: {row.failed}")
        rows.append(row)
    good = [r for r in rows if not r.failed and r.L_transfer > 0]
    slope = float("nan")
    if len(good) >= 2:
        slope = float(np.polyfit(np.log([r.epsilon for r in good]), np.log([r.L_transfer for r in good]), 1)[0])
    rep = PredictionReport(alpha=alpha, delta=delta, beta_used=beta, kappa=kappa, C_nu=fn.amplitude,
                           C_omega=fo.amplitude, C_mu=zero.C_mu, c_beta=cb, rows=rows,
                           fitted_global_exponent=slope, nu_fit=fn, omega_fit=fo, warnings=warnings)
    try:
        rep.delta_prime = remainder_exponent(zero.nu0, fn, "tail")
    except DegenerateRemainder as exc:
        warnings.append(str(exc))
    return rep
