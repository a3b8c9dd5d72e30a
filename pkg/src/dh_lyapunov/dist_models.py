"""Laws of the random factor Z: compactly supported C^1 densities.

Every admissible density is reduced to a list of polynomial pieces on
consecutive intervals (local coefficients in ``t - left_edge``).  Density and
CDF are then evaluated in closed form, complex moments by composite
Gauss-Legendre quadrature in ``log t``, and samples by inverse CDF tables.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import PchipInterpolator

from .errors import ValidationError

QUAD_ORDER = 64
TABLE_SIZE = 4096
# max phase of t^{i y} swept by one Gauss-Legendre panel
_PANEL_PHASE = 12.0


@dataclass(frozen=True)
class BiweightBump:
    """Density proportional to ((t - a)(b - t))^2 on [a, b]."""

    a: float
    b: float


@dataclass(frozen=True)
class Mixture:
    weights: tuple
    components: tuple


@dataclass(frozen=True)
class PiecewisePolynomialC1:
    """Polynomial pieces on ``breakpoints``; piece i has ascending coefficients in (t - x_i)."""

    breakpoints: tuple
    coefficients: tuple


@dataclass(frozen=True)
class SupportInterval:
    c_minus: float
    c_plus: float

    def __post_init__(self):
        if not (0 < self.c_minus < self.c_plus < math.inf):
            raise ValidationError(
                f"support must satisfy 0 < c_minus < c_plus < inf, got [{self.c_minus}, {self.c_plus}]"
            )

    def straddles_one(self):
        return self.c_minus < 1 < self.c_plus


@dataclass(frozen=True)
class RegimeReport:
    e_z: float
    e_log_z: float
    dh_ok: bool
    gapped_support: bool
    messages: list = field(default_factory=list)

    def to_dict(self):
        return {
            "e_z": self.e_z,
            "e_log_z": self.e_log_z,
            "dh_ok": self.dh_ok,
            "gapped_support": self.gapped_support,
            "messages": list(self.messages),
        }


def _shift(coef, h):
    """Coefficients of x -> p(x + h) given ascending coefficients of p."""
    if h == 0:
        return np.asarray(coef, dtype=float)
    return Polynomial(coef)(Polynomial([h, 1.0])).coef


def _spec_pieces(spec):
    """Flatten a DensitySpec into (lo, hi, local ascending coefficients, weight) pieces."""
    if isinstance(spec, BiweightBump):
        a, b = float(spec.a), float(spec.b)
        if not (0 < a < b < math.inf):
            raise ValidationError(f"BiweightBump needs 0 < a < b, got ({a}, {b})")
        w = b - a
        k = 30.0 / w**5
        return [(a, b, k * np.array([0.0, 0.0, w * w, -2.0 * w, 1.0]))]
    if isinstance(spec, Mixture):
        weights = np.asarray(spec.weights, dtype=float)
        if len(weights) != len(spec.components) or len(weights) == 0:
            raise ValidationError("mixture needs one weight per component")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValidationError(f"mixture weights must be positive and sum to 1, got {weights.tolist()}")
        pieces = []
        for wgt, comp in zip(weights, spec.components):
            pieces.extend((lo, hi, wgt * c) for lo, hi, c in _spec_pieces(comp))
        return pieces
    if isinstance(spec, PiecewisePolynomialC1):
        return _piecewise_pieces(spec)
    raise ValidationError(f"unknown density spec {spec!r}")


def _piecewise_pieces(spec, rtol=1e-9):
    x = np.asarray(spec.breakpoints, dtype=float)
    coefs = [np.asarray(c, dtype=float) for c in spec.coefficients]
    if len(x) < 2 or len(coefs) != len(x) - 1:
        raise ValidationError("piecewise_c1 needs n+1 breakpoints for n coefficient lists")
    if np.any(np.diff(x) <= 0) or x[0] <= 0:
        raise ValidationError("breakpoints must be positive and strictly increasing")
    polys = [Polynomial(c) for c in coefs]
    scale = max(np.max(np.abs(p(np.linspace(0, x[i + 1] - x[i], 33)))) for i, p in enumerate(polys))
    if scale <= 0:
        raise ValidationError("piecewise_c1 density is identically zero")
    tol = rtol * max(scale, 1.0)
    dtol = rtol * max(scale / np.min(np.diff(x)), 1.0)

    def value_and_slope(i, at_right):
        p = polys[i]
        h = x[i + 1] - x[i] if at_right else 0.0
        return p(h), p.deriv()(h)

    v, d = value_and_slope(0, False)
    if abs(v) > tol or abs(d) > dtol:
        raise ValidationError("density must vanish to first order at the lower support edge")
    v, d = value_and_slope(len(polys) - 1, True)
    if abs(v) > tol or abs(d) > dtol:
        raise ValidationError("density must vanish to first order at the upper support edge")
    for i in range(1, len(polys)):
        vl, dl = value_and_slope(i - 1, True)
        vr, dr = value_and_slope(i, False)
        if abs(vl - vr) > tol or abs(dl - dr) > dtol:
            raise ValidationError(f"density is not C^1 at breakpoint {x[i]}")
    for i, p in enumerate(polys):
        if np.min(p(np.linspace(0, x[i + 1] - x[i], 513))) < -tol:
            raise ValidationError(f"density is negative on [{x[i]}, {x[i + 1]}]")
    return [(x[i], x[i + 1], coefs[i]) for i in range(len(polys))]


def _horner(coef_rows, x):
    out = np.zeros_like(x)
    for k in range(coef_rows.shape[1] - 1, -1, -1):
        out = out * x + coef_rows[:, k]
    return out


class DistributionModel:
    """The law mu of Z.  Immutable after construction."""

    def __init__(self, spec, quad_order=QUAD_ORDER, table_size=TABLE_SIZE):
        self.spec = spec
        self.quad_order = int(quad_order)
        pieces = _spec_pieces(spec)
        edges = np.unique(np.array([p[0] for p in pieces] + [p[1] for p in pieces]))
        deg = max(len(p[2]) for p in pieces)
        coef = np.zeros((len(edges) - 1, deg))
        active = np.zeros(len(edges) - 1, dtype=bool)
        for lo, hi, c in pieces:
            for j in range(len(edges) - 1):
                if edges[j] >= lo and edges[j + 1] <= hi:
                    shifted = _shift(c, edges[j] - lo)
                    coef[j, : len(shifted)] += shifted
                    active[j] = True
        anti = np.zeros((len(edges) - 1, deg + 1))
        anti[:, 1:] = coef / np.arange(1, deg + 1)
        widths = np.diff(edges)
        masses = _horner(anti, widths)
        cum = np.concatenate([[0.0], np.cumsum(masses)])
        # mirrored pieces in r = right edge - t, so upper tails keep relative precision
        anti_r = np.zeros_like(anti)
        for j in range(len(widths)):
            right = _shift(coef[j], widths[j])
            right = np.pad(right, (0, deg - right.size))
            anti_r[j, 1:] = right * (-1.0) ** np.arange(deg) / np.arange(1, deg + 1)
        upper = np.concatenate([np.cumsum(masses[::-1])[::-1], [0.0]])

        self.edges = edges
        self.coef = coef
        self.anti = anti
        self.active = active
        self.cum = cum
        self.anti_r = anti_r
        self.upper = upper
        self.support = SupportInterval(float(edges[0]), float(edges[-1]))
        self.gapped = not bool(np.all(active))
        self.total_mass = float(cum[-1])
        self._quad_cache = {}
        self._blocks = self._build_tables(int(table_size))

    # construction helpers -------------------------------------------------

    def _build_tables(self, size):
        blocks = []
        j = 0
        n = len(self.active)
        while j < n:
            if not self.active[j]:
                j += 1
                continue
            k = j
            while k + 1 < n and self.active[k + 1]:
                k += 1
            lo, hi = self.edges[j], self.edges[k + 1]
            f_lo, f_hi = self.cum[j], self.cum[k + 1]
            levels = np.linspace(f_lo, f_hi, size)
            a = np.full(size, lo)
            b = np.full(size, hi)
            for _ in range(64):
                mid = 0.5 * (a + b)
                below = self.cdf(mid) < levels
                a = np.where(below, mid, a)
                b = np.where(below, b, mid)
            q = 0.5 * (a + b)
            q[0], q[-1] = lo, hi
            q = np.maximum.accumulate(q)
            blocks.append((f_lo, f_hi, lo, hi, PchipInterpolator(levels, q)))
            j = k + 1
        return blocks

    @classmethod
    def from_dict(cls, doc, **kwargs):
        return cls(spec_from_dict(doc), **kwargs)

    @property
    def hash(self):
        payload = json.dumps(spec_to_dict(self.spec), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    # pointwise evaluation ---------------------------------------------------

    def _locate(self, t):
        j = np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, len(self.edges) - 2)
        return j

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        j = self._locate(t)
        inside = (t >= self.edges[0]) & (t <= self.edges[-1])
        val = _horner(self.coef[j.ravel()], (t - self.edges[j]).ravel()).reshape(t.shape)
        return np.where(inside, np.maximum(val, 0.0), 0.0)

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        tc = np.clip(t, self.edges[0], self.edges[-1])
        j = self._locate(tc)
        val = self.cum[j] + _horner(self.anti[j.ravel()], (tc - self.edges[j]).ravel()).reshape(t.shape)
        val = np.clip(val / self.total_mass, 0.0, 1.0)
        return np.where(t >= self.edges[-1], 1.0, np.where(t <= self.edges[0], 0.0, val))

    def tail(self, t):
        """G_mu(t) = P(Z > t), accumulated from the upper edge."""
        t = np.asarray(t, dtype=float)
        tc = np.clip(t, self.edges[0], self.edges[-1])
        j = self._locate(tc)
        r = (self.edges[j + 1] - tc).ravel()
        val = self.upper[j + 1] + _horner(self.anti_r[j.ravel()], r).reshape(t.shape)
        val = np.clip(val / self.total_mass, 0.0, 1.0)
        return np.where(t >= self.edges[-1], 0.0, np.where(t <= self.edges[0], 1.0, val))

    # moments -----------------------------------------------------------------

    def quadrature(self, panels_per_unit_phase=0.0, order=None):
        """Nodes x = log t and weights w * t * density for the active intervals."""
        order = self.quad_order if order is None else int(order)
        key = (order, panels_per_unit_phase)
        hit = self._quad_cache.get(key)
        if hit is not None:
            return hit
        gx, gw = np.polynomial.legendre.leggauss(order)
        xs, ws = [], []
        for j in np.flatnonzero(self.active):
            lo, hi = math.log(self.edges[j]), math.log(self.edges[j + 1])
            npan = max(1, math.ceil(panels_per_unit_phase * (hi - lo) / _PANEL_PHASE))
            cuts = np.linspace(lo, hi, npan + 1)
            for a, b in zip(cuts[:-1], cuts[1:]):
                x = 0.5 * (b - a) * gx + 0.5 * (a + b)
                t = np.exp(x)
                xs.append(x)
                ws.append(0.5 * (b - a) * gw * t * self.pdf(t))
        out = (np.concatenate(xs), np.concatenate(ws))
        self._quad_cache[key] = out
        return out

    def __repr__(self):
        return f"DistributionModel({self.spec!r})"


# public operations ------------------------------------------------------------


def density(model, t):
    out = model.pdf(t)
    return float(out) if np.ndim(out) == 0 else out


def tail_cdf(model, t):
    """Return (F_mu(t), G_mu(t)); F + G = 1 exactly."""
    g = model.tail(t)
    f = 1.0 - g
    if np.ndim(g) == 0:
        return float(f), float(g)
    return f, g


def mellin(model, u, deriv=0, order=None):
    """M(u) = E[Z^u]; ``deriv`` > 0 returns the derivative E[Z^u (log Z)^deriv]."""
    u_arr = np.asarray(u)
    is_complex = np.iscomplexobj(u_arr)
    uc = u_arr.astype(complex)
    phase = float(np.max(np.abs(uc.imag))) if uc.size else 0.0
    # bucket the panel count so the quadrature cache stays small
    phase = float(2 ** math.ceil(math.log2(phase))) if phase > 1 else 0.0
    x, w = model.quadrature(phase, order)
    flat = uc.ravel()
    kernel = np.exp(np.outer(flat, x))
    if deriv:
        kernel = kernel * x**deriv
    vals = (kernel @ w).reshape(uc.shape)
    if not is_complex:
        vals = vals.real
    return vals.item() if vals.ndim == 0 else vals


def make_rng(seed, stream=0):
    """Counter-based generator for (seed, stream); disjoint streams for distinct ids."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def sample_array(model, rng, n):
    u = rng.random(n)
    out = np.empty(n)
    done = np.zeros(n, dtype=bool)
    for i, (f_lo, f_hi, lo, hi, table) in enumerate(model._blocks):
        last = i == len(model._blocks) - 1
        mask = (~done) & ((u < f_hi) | last)
        out[mask] = np.clip(table(np.clip(u[mask], f_lo, f_hi)), lo, hi)
        done |= mask
    return out


def sample(model, rng):
    return float(sample_array(model, rng, 1)[0])


CRITICAL_MARGIN = 1e-12


def validate_regime(model, tol=1e-10):
    mass = float(mellin(model, 0.0))
    if abs(mass - 1.0) > tol:
        raise ValidationError(f"density integrates to {mass!r}, not 1", mass=mass)
    e_z = float(mellin(model, 1.0))
    e_log_z = float(mellin(model, 0.0, deriv=1))
    msgs = []
    if not e_z > 1:
        msgs.append(f"E[Z] = {e_z:.6g} <= 1")
    # the critical case E[log Z] = 0 is excluded with a rounding margin
    if not e_log_z < -CRITICAL_MARGIN:
        msgs.append(f"E[log Z] = {e_log_z:.6g} is not negative")
    if not model.support.straddles_one():
        msgs.append("support does not straddle 1")
    if model.gapped:
        msgs.append("support is not an interval (gapped mixture); accepted, only the hull is used")
    dh_ok = e_z > 1 and e_log_z < -CRITICAL_MARGIN and model.support.straddles_one()
    return RegimeReport(e_z=e_z, e_log_z=e_log_z, dh_ok=dh_ok, gapped_support=model.gapped, messages=msgs)


# JSON specs ---------------------------------------------------------------------


def spec_from_dict(doc):
    if "biweight" in doc:
        a, b = doc["biweight"]
        return BiweightBump(float(a), float(b))
    if "mixture" in doc:
        comps, weights = [], []
        for item in doc["mixture"]:
            weights.append(float(item["weight"]))
            comps.append(spec_from_dict({k: v for k, v in item.items() if k != "weight"}))
        return Mixture(tuple(weights), tuple(comps))
    if "piecewise_c1" in doc:
        body = doc["piecewise_c1"]
        return PiecewisePolynomialC1(
            tuple(float(x) for x in body["breakpoints"]),
            tuple(tuple(float(c) for c in row) for row in body["coefficients"]),
        )
    raise ValidationError(f"unrecognised distribution spec keys: {sorted(doc)}")


def spec_to_dict(spec):
    if isinstance(spec, BiweightBump):
        return {"biweight": [spec.a, spec.b]}
    if isinstance(spec, Mixture):
        items = []
        for w, c in zip(spec.weights, spec.components):
            d = spec_to_dict(c)
            d["weight"] = w
            items.append(d)
        return {"mixture": items}
    if isinstance(spec, PiecewisePolynomialC1):
        return {
            "piecewise_c1": {
                "breakpoints": list(spec.breakpoints),
                "coefficients": [list(c) for c in spec.coefficients],
            }
        }
    raise ValidationError(f"unknown density spec {spec!r}")


REF1_SPEC = Mixture((0.6, 0.4), (BiweightBump(0.2, 0.6), BiweightBump(2.0, 3.0)))


def ref1(**kwargs):
    """Reference two-bump law used throughout the tests."""
    return DistributionModel(REF1_SPEC, **kwargs)
