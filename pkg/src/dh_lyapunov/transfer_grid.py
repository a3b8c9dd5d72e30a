"""Finite measures as tail functions on log-spaced grids, and the transfer operators.

A :class:`TailGrid` stores G(t) = nu((t, inf)) at strictly increasing nodes and
interpolates linearly in (log t, G).  Between nodes the measure is therefore
uniform in log t, which is exactly what the operators below push forward:

    G_{T nu}(tau) = int G_mu(tau / g_eps(s)) nu(ds)      (s chart)
    G_{S om}(sig) = int G_mu(sig / h_eps(s)) om(ds)      (sigma chart)

Each segment's mass is carried through a few Gauss-Legendre points in log s and
G_mu is evaluated in closed form, so mass and monotonicity are preserved
exactly and the operator is a fixed matrix for a fixed pair of grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import hyp2f1

from .alpha_delta import solve_alpha
from .chain_sim import g_map, h_map
from .dist_models import mellin
from .errors import Divergent, InvalidParameter, NoConvergence

ROLES = ("nu_eps", "nu0", "omega0", "gamma_hat", "generic")
_ROW_CHUNK = 128


@dataclass(frozen=True, eq=False)
class TailGrid:
    nodes: np.ndarray
    values: np.ndarray
    lower_limit: float
    role: str = "generic"
    epsilon: float = 0.0
    head_exponent: float | None = None
    tail_exponent: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "values", values)
        if nodes.ndim != 1 or nodes.shape != values.shape or nodes.size < 2:
            raise InvalidParameter("nodes and values must be matching 1-d arrays of length >= 2")
        if nodes[0] <= 0 or np.any(np.diff(nodes) <= 0):
            raise InvalidParameter("nodes must be positive and strictly increasing")
        if self.role not in ROLES:
            raise InvalidParameter(f"unknown role {self.role!r}")

    # evaluation ---------------------------------------------------------------

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        lx = np.log(np.maximum(x, 1e-300))
        out = np.interp(lx, np.log(self.nodes), self.values)
        below = x < self.nodes[0]
        above = x > self.nodes[-1]
        if self.head_exponent is None:
            out = np.where(below, self.lower_limit, out)
        else:
            head = self.values[0] * (np.maximum(x, 1e-300) / self.nodes[0]) ** (-self.head_exponent)
            out = np.where(below, head, out)
        if self.tail_exponent is None:
            out = np.where(above, 0.0, out)
        else:
            out = np.where(above, self.values[-1] * (x / self.nodes[-1]) ** (-self.tail_exponent), out)
        return float(out) if out.ndim == 0 else out

    @property
    def mass(self):
        return math.inf if self.head_exponent is not None else float(self.lower_limit)

    def scaled(self, c):
        return replace(self, values=self.values * c, lower_limit=self.lower_limit * c, meta=dict(self.meta))

    def resampled(self, nodes):
        """Same measure read off at new nodes (extensions are kept)."""
        nodes = np.asarray(nodes, dtype=float)
        return replace(self, nodes=nodes, values=np.asarray(self(nodes), dtype=float), meta=dict(self.meta))

    def is_monotone(self, rtol=1e-12):
        scale = max(float(np.max(np.abs(self.values))), 1e-300)
        return bool(np.all(np.diff(self.values) <= rtol * scale)) and bool(np.all(self.values >= -rtol * scale))


def point_mass(s0, weight=1.0, nodes=None, role="generic"):
    """Tail grid of weight * delta_{s0}: G = weight below s0, 0 from s0 on."""
    if nodes is None:
        nodes = np.array([s0, s0 * (1 + 1e-13)])
    nodes = np.asarray(nodes, dtype=float)
    values = np.where(nodes < s0, weight, 0.0)
    return TailGrid(nodes, values, float(weight), role=role)


def zero_grid(nodes, role="generic"):
    nodes = np.asarray(nodes, dtype=float)
    return TailGrid(nodes, np.zeros_like(nodes), 0.0, role=role)


def log_nodes(lo, hi, n, extra=()):
    nodes = np.geomspace(lo, hi, int(n))
    if extra:
        nodes = np.unique(np.concatenate([nodes, [float(e) for e in extra if lo < e < hi]]))
        keep = np.concatenate([[True], np.diff(np.log(nodes)) > 1e-9])
        nodes = nodes[keep]
    return nodes


# norm and functional ------------------------------------------------------------


def _phi1(r):
    return np.where(np.abs(r) < 1e-4, 1 + r / 2 + r * r / 6, np.expm1(r) / np.where(r == 0, 1, r))


def _phi2(r):
    small = np.abs(r) < 1e-3
    rr = np.where(small, 1.0, r)
    big = (rr * np.exp(rr) - np.expm1(rr)) / (rr * rr)
    return np.where(small, 0.5 + r / 3 + r * r / 8, big)


def _segment_integrals(u0, u1, l0, l1, beta):
    """int_{u0}^{u1} e^{beta u} l(u) du for l linear with l(u0)=l0, l(u1)=l1."""
    d = u1 - u0
    r = beta * d
    return np.exp(beta * u0) * d * (l0 * _phi1(r) + (l1 - l0) * _phi2(r))


def _extension_parts(grid):
    """(head_kind, head_coef, head_exp, tail_kind, tail_coef, tail_exp) of G outside the nodes."""
    if grid.head_exponent is None:
        head = ("const", float(grid.lower_limit), 0.0)
    else:
        head = ("power", float(grid.values[0]) * grid.nodes[0] ** grid.head_exponent, float(grid.head_exponent))
    if grid.tail_exponent is None:
        tail = ("zero", 0.0, 0.0)
    else:
        tail = ("power", float(grid.values[-1]) * grid.nodes[-1] ** grid.tail_exponent, float(grid.tail_exponent))
    return head, tail


def triple_norm(grid, beta, other=None):
    """int_0^inf tau^{beta-1} |G(tau) - G_other(tau)| dtau, exact for log-linear segments."""
    if not (0 < beta < 1):
        raise InvalidParameter(f"beta must lie in (0, 1), got {beta}")
    if other is None:
        nodes = grid.nodes
        diff = grid.values.copy()
    else:
        nodes = np.union1d(grid.nodes, other.nodes)
        diff = np.asarray(grid(nodes)) - np.asarray(other(nodes))
    u = np.log(nodes)
    l0, l1 = diff[:-1], diff[1:]
    same = l0 * l1 >= 0
    total = float(np.sum(np.abs(_segment_integrals(u[:-1], u[1:], l0, l1, beta))[same]))
    if np.any(~same):
        i = np.flatnonzero(~same)
        ur = u[i] + (u[i + 1] - u[i]) * l0[i] / (l0[i] - l1[i])
        total += float(np.sum(np.abs(_segment_integrals(u[i], ur, l0[i], 0.0 * l0[i], beta))))
        total += float(np.sum(np.abs(_segment_integrals(ur, u[i + 1], 0.0 * l1[i], l1[i], beta))))
    total += _outside_norm(grid, other, nodes[0], nodes[-1], beta)
    return total


def _outside_norm(grid, other, x0, xn, beta):
    total = 0.0
    grids = [(grid, 1.0)] + ([(other, -1.0)] if other is not None else [])
    # below x0: sum of c * tau^{-a} terms (a = 0 for constant heads)
    terms = {}
    for g, sign in grids:
        (kind, coef, a), _ = _extension_parts(g)
        if kind == "power" and g.nodes[0] > x0 * (1 + 1e-12):
            raise InvalidParameter("head-extended grids must share their first node")
        terms[a] = terms.get(a, 0.0) + sign * coef
    for a, c in terms.items():
        if abs(c) <= 1e-15 * max(1.0, max(abs(v) for v in terms.values())):
            continue
        if beta - a <= 0:
            raise Divergent(f"norm diverges at 0: tau^{{beta-1-{a:g}}} with beta={beta:g}")
        total += abs(c) * x0 ** (beta - a) / (beta - a)
    if len(terms) > 1 and sum(1 for c in terms.values() if c != 0) > 1:
        raise InvalidParameter("mixed head extensions are not supported")
    terms = {}
    for g, sign in grids:
        _, (kind, coef, a) = _extension_parts(g)
        if kind == "power" and g.nodes[-1] < xn * (1 - 1e-12):
            raise InvalidParameter("tail-extended grids must share their last node")
        if kind == "power":
            terms[a] = terms.get(a, 0.0) + sign * coef
    for a, c in terms.items():
        if c == 0:
            continue
        if beta - a >= 0:
            raise Divergent(f"norm diverges at infinity: tau^{{beta-1-{a:g}}} with beta={beta:g}")
        total += abs(c) * xn ** (beta - a) / (a - beta)
    return total


_GL4 = np.polynomial.legendre.leggauss(4)


def L_functional(grid, eps):
    """eps^2 int_0^inf G(x) / (1 + eps^2 x) dx, i.e. int log(1 + eps^2 s) nu(ds)."""
    k = float(eps) ** 2
    if k == 0:
        return 0.0
    u = np.log(grid.nodes)
    gx, gw = _GL4
    mid = 0.5 * (u[:-1] + u[1:])
    half = 0.5 * (u[1:] - u[:-1])
    uq = mid[:, None] + half[:, None] * gx[None, :]
    lq = np.interp(uq, u, grid.values)
    xq = np.exp(uq)
    inner = float(np.sum(half[:, None] * gw[None, :] * lq * k * xq / (1 + k * xq)))
    (hk, hc, ha), (tk, tc, ta) = _extension_parts(grid)
    x0, xn = grid.nodes[0], grid.nodes[-1]
    if hk == "const":
        head = hc * math.log1p(k * x0)
    else:
        if ha >= 1:
            raise Divergent("head exponent >= 1 gives an infinite functional")
        head = hc * k * x0 ** (1 - ha) / (1 - ha) * float(hyp2f1(1.0, 1 - ha, 2 - ha, -k * x0))
    tail = 0.0
    if tk == "power" and tc != 0:
        w = 1.0 / xn
        tail = tc * w**ta / ta * float(hyp2f1(1.0, ta, ta + 1, -w / k))
    return inner + head + tail


# operators ----------------------------------------------------------------------


def support_bound(model, eps):
    """Upper end b_eps of the support of nu_eps: positive root of b = c_plus g_eps(b)."""
    if eps == 0:
        raise InvalidParameter("nu_0 has unbounded support")
    cp = model.support.c_plus
    e2 = eps * eps
    return (cp - 1 + math.sqrt((cp - 1) ** 2 + 4 * e2 * cp)) / (2 * e2)


class TransferOperator:
    """Matrix form of T_eps ("T") or S_eps ("S") between two fixed grids.

    ``apply`` maps input values (plus lower_limit) to output values via
    segment masses; extensions beyond the input nodes are carried by virtual
    geometric nodes.
    """

    def __init__(self, model, eps, kind, in_nodes, out_nodes=None, head_exponent=None,
                 tail_exponent=None, quad_points=3):
        if kind not in ("T", "S"):
            raise InvalidParameter(f"kind must be 'T' or 'S', got {kind!r}")
        self.model = model
        self.eps = float(eps)
        self.kind = kind
        self.in_nodes = np.asarray(in_nodes, dtype=float)
        self.out_nodes = self.in_nodes if out_nodes is None else np.asarray(out_nodes, dtype=float)
        self.head_exponent = head_exponent
        self.tail_exponent = tail_exponent
        self._phi = (lambda s: g_map(self.eps, s)) if kind == "T" else (lambda s: h_map(self.eps, s))
        self._build(quad_points)

    def _inverse_phi(self, y):
        e2 = self.eps**2
        if self.kind == "T":
            return (y - 1) / (1 - e2 * y) if e2 * y < 1 else math.inf
        return (y - e2) / (1 - y) if y < 1 else math.inf

    def _build(self, q):
        cm, cp = self.model.support.c_minus, self.model.support.c_plus
        x = self.in_nodes
        ratio = min(1.02, float(np.exp(np.max(np.diff(np.log(x))))))
        ratio = max(ratio, 1.001)
        # head extension nodes (power-law head only)
        head_nodes = np.empty(0)
        if self.head_exponent is not None:
            s_min = self._inverse_phi(float(self.out_nodes[0]) / cp)
            if not (s_min > 0):
                raise Divergent("infinite mass near 0 reaches the output grid")
            if s_min < x[0]:
                k = math.ceil(math.log(x[0] / s_min) / math.log(ratio)) + 1
                head_nodes = x[0] * ratio ** -np.arange(k, 0, -1)
        tail_nodes = np.empty(0)
        if self.tail_exponent is not None:
            s_max = self._inverse_phi(float(self.out_nodes[-1]) / cm)
            s_max = min(s_max, x[-1] * 1e12) if math.isfinite(s_max) else x[-1] * 1e12
            if s_max > x[-1]:
                k = math.ceil(math.log(s_max / x[-1]) / math.log(ratio)) + 1
                tail_nodes = x[-1] * ratio ** np.arange(1, k + 1)
        self.head_nodes, self.tail_nodes = head_nodes, tail_nodes
        all_nodes = np.concatenate([head_nodes, x, tail_nodes])
        u = np.log(all_nodes)
        gx, gw = np.polynomial.legendre.leggauss(q)
        mid = 0.5 * (u[:-1] + u[1:])
        half = 0.5 * (u[1:] - u[:-1])
        seg_pts = np.exp(mid[:, None] + half[:, None] * gx[None, :])
        seg_w = np.broadcast_to(0.5 * gw, seg_pts.shape)
        # mass slots: [atom at first node] + segments + [last node: atom or remainder of tail]
        first = np.full((1, q), all_nodes[0])
        last = np.full((1, q), all_nodes[-1])
        pts = np.concatenate([first, seg_pts, last])
        wts = np.concatenate([np.full((1, q), 1.0 / q), seg_w, np.full((1, q), 1.0 / q)])
        phi = self._phi(pts)
        out = self.out_nodes
        K = np.empty((out.size, pts.shape[0]))
        for i0 in range(0, out.size, _ROW_CHUNK):
            tau = out[i0 : i0 + _ROW_CHUNK]
            arg = tau[:, None, None] / phi[None, :, :]
            K[i0 : i0 + _ROW_CHUNK] = np.sum(self.model.tail(arg) * wts[None], axis=2)
        self.K = K
        self.n_slots = pts.shape[0]

    def masses(self, values, lower_limit):
        values = np.asarray(values, dtype=float)
        x = self.in_nodes
        parts = []
        if self.head_exponent is not None:
            a = self.head_exponent
            hv = values[0] * (self.head_nodes / x[0]) ** (-a) if self.head_nodes.size else np.empty(0)
            full = np.concatenate([hv, values])
            parts.append([0.0])
        else:
            full = values
            parts.append([max(float(lower_limit) - values[0], 0.0)])
        if self.tail_exponent is not None and self.tail_nodes.size:
            tv = values[-1] * (self.tail_nodes / x[-1]) ** (-self.tail_exponent)
            full = np.concatenate([full, tv])
        parts.append(full[:-1] - full[1:])
        parts.append([full[-1]])
        return np.concatenate(parts)

    def apply_values(self, values, lower_limit):
        return self.K @ self.masses(values, lower_limit)

    def apply(self, grid, debug=False):
        if grid.nodes.shape != self.in_nodes.shape or not np.array_equal(grid.nodes, self.in_nodes):
            raise InvalidParameter("grid nodes do not match the operator's input nodes")
        vals = self.apply_values(grid.values, grid.lower_limit)
        lower = vals[0] if grid.head_exponent is not None else float(grid.lower_limit)
        res = replace(grid, nodes=self.out_nodes, values=vals, lower_limit=lower, meta={})
        if debug and not res.is_monotone(1e-10):
            raise AssertionError("transfer operator broke monotonicity")
        return res


def apply_T(grid, model, eps, out_nodes=None, quad_points=3, debug=False):
    op = TransferOperator(model, eps, "T", grid.nodes, out_nodes, grid.head_exponent, grid.tail_exponent, quad_points)
    return op.apply(grid, debug=debug)


def apply_S(grid, model, eps, out_nodes=None, quad_points=3, debug=False):
    op = TransferOperator(model, eps, "S", grid.nodes, out_nodes, grid.head_exponent, grid.tail_exponent, quad_points)
    return op.apply(grid, debug=debug)


# fixed points -------------------------------------------------------------------


@dataclass(frozen=True)
class OperatorConfig:
    epsilon: float = 0.0
    grid_size: int = 2048
    domain: tuple | None = None
    quad_points: int = 3
    tol: float = 1e-9
    max_iter: int = 20000
    nu0_t_max: float = 1e8
    sigma_floor: float = 1e-8

    def __post_init__(self):
        if self.grid_size < 16:
            raise InvalidParameter("grid_size must be at least 16")
        if self.domain is not None and not (0 < self.domain[0] < self.domain[1]):
            raise InvalidParameter("domain must satisfy 0 < t_min < t_max")
        if self.tol <= 0 or self.max_iter < 1:
            raise InvalidParameter("tol must be positive and max_iter >= 1")


def eps_grid_nodes(model, eps, config):
    """Nodes of the s chart at eps > 0: [c_minus, c_plus / eps^2] with 1/eps inserted."""
    if config.domain is not None:
        lo, hi = config.domain
    else:
        lo, hi = model.support.c_minus, model.support.c_plus / eps**2
    if hi <= support_bound(model, eps):
        raise InvalidParameter("t_max must lie beyond the support bound b_eps")
    return log_nodes(lo, hi, config.grid_size, extra=(1.0 / eps,))


def _picard(op, start, beta, tol, max_iter, normalize_at=None):
    g = start
    history = []
    for it in range(1, max_iter + 1):
        new = op.apply(g)
        if normalize_at is not None:
            new = new.scaled(1.0 / float(new(normalize_at)))
        r = triple_norm(new, beta, g)
        history.append(r)
        g = new
        if r <= tol:
            return g, it, history
    raise NoConvergence(f"no convergence after {max_iter} iterations (residual {history[-1]:.3g})",
                        residual=history[-1], iterations=max_iter)


def fixed_point_nu(model, eps, config=None, alpha=None, start=None):
    """Stationary law nu_eps of the s-chain (eps > 0) or nu_0 (eps = 0) as a probability TailGrid."""
    config = config or OperatorConfig(epsilon=eps)
    if alpha is None:
        alpha, _ = solve_alpha(model)
    beta = alpha / 2
    cm = model.support.c_minus
    if eps > 0:
        nodes = eps_grid_nodes(model, eps, config)
        tail_exp, role = None, "nu_eps"
    else:
        lo, hi = config.domain if config.domain is not None else (cm, config.nu0_t_max)
        nodes = log_nodes(lo, hi, config.grid_size, extra=(100.0, 50.0, 20.0, 10.0))
        tail_exp, role = alpha, "nu0"
    op = TransferOperator(model, eps, "T", nodes, tail_exponent=tail_exp, quad_points=config.quad_points)
    if start is None:
        start = TailGrid(nodes, model.tail(nodes), 1.0, role=role, epsilon=eps, tail_exponent=tail_exp)
    g, it, hist = _picard(op, start, beta, config.tol, config.max_iter)
    meta = {"iterations": it, "residual": hist[-1], "beta_ref": beta,
            "rate": _geometric_rate(hist), "history": hist}
    return replace(g, role=role, epsilon=eps, meta=meta)


def _geometric_rate(hist):
    h = np.asarray(hist[len(hist) // 2 :])
    h = h[h > 0]
    if h.size < 3:
        return float("nan")
    return float(np.exp(np.polyfit(np.arange(h.size), np.log(h), 1)[0]))


def admissible_y_range(model):
    cp = model.support.c_plus
    return 0.0, min(cp - 1.0, cp / 2.0)


def default_y(model):
    return admissible_y_range(model)[1] / 2


def fixed_point_omega0(model, y=None, config=None, alpha=None):
    """Infinite stationary measure omega_0 of sigma -> Z sigma / (1 + sigma), with G(y) = 1.

    Below the grid floor G continues as the power sigma^{-alpha}.
    """
    config = config or OperatorConfig()
    lo_y, hi_y = admissible_y_range(model)
    y = default_y(model) if y is None else float(y)
    if not (lo_y < y < hi_y):
        raise InvalidParameter(f"y must lie in ({lo_y:g}, {hi_y:g}), got {y}")
    if alpha is None:
        alpha, _ = solve_alpha(model)
    cp = model.support.c_plus
    lo, hi = config.domain if config.domain is not None else (config.sigma_floor, cp)
    nodes = log_nodes(lo, hi, config.grid_size, extra=(y,))
    op = TransferOperator(model, 0.0, "S", nodes, head_exponent=alpha, quad_points=config.quad_points)
    v0 = np.clip((nodes / y) ** -alpha - (cp / y) ** -alpha, 0.0, None)
    start = TailGrid(nodes, v0, float(v0[0]), role="omega0", head_exponent=alpha)
    start = start.scaled(1.0 / float(start(y)))
    beta = 0.5 * (1.0 + alpha)
    g, it, hist = _picard(op, start, beta, config.tol, config.max_iter, normalize_at=y)
    meta = {"iterations": it, "residual": hist[-1], "beta_ref": beta, "y": y,
            "rate": _geometric_rate(hist), "history": hist}
    return replace(g, role="omega0", epsilon=0.0, meta=meta)


# serialization ------------------------------------------------------------------

_META_KEYS = ("iterations", "residual", "beta_ref", "rate", "y")


def grid_to_csv(grid):
    lines = ["node,value"]
    lines += [f"{float(x)!r},{float(v)!r}" for x, v in zip(grid.nodes, grid.values)]
    return "\n".join(lines) + "\n"


def grid_sidecar(grid, config_hash=""):
    return {"role_tag": grid.role, "epsilon": grid.epsilon, "lower_limit": float(grid.lower_limit),
            "head_exponent": grid.head_exponent, "tail_exponent": grid.tail_exponent,
            "config_hash": config_hash, "n_nodes": int(grid.nodes.size),
            "meta": {k: grid.meta[k] for k in _META_KEYS if k in grid.meta}}


def grid_from_csv(text, sidecar):
    rows = [line.split(",") for line in text.strip().splitlines()[1:]]
    arr = np.array([[float(a), float(b)] for a, b in rows])
    return TailGrid(arr[:, 0], arr[:, 1], float(sidecar["lower_limit"]), role=sidecar["role_tag"],
                    epsilon=float(sidecar["epsilon"]), head_exponent=sidecar.get("head_exponent"),
                    tail_exponent=sidecar.get("tail_exponent"), meta=dict(sidecar.get("meta", {})))
