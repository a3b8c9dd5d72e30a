"""Tail exponent alpha (E[Z^alpha] = 1) and the root-free strip width delta.

Zeros of 1 - M(u) are counted inside rectangles by tracking the argument of
1 - M along the boundary, refining each edge until no segment turns by more
than pi/4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dist_models import mellin, validate_regime
from .errors import BoundaryRoot, InvalidParameter, OutOfRange, RegimeViolation, ScanInconclusive

BOUNDARY_THRESHOLD = 1e-9
MAX_PERTURB = 5
PERTURB_REL = 1e-6
MAX_ARG_STEP = math.pi / 4


@dataclass
class AlphaReport:
    alpha: float
    residual: float
    delta: float
    roots: list
    scan_strip: tuple
    im_max: float
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "residual": self.residual,
            "delta": self.delta,
            "roots": [[z.real, z.imag] for z in self.roots],
            "scan_strip": list(self.scan_strip),
            "im_max": self.im_max,
            "warnings": list(self.warnings),
        }


def solve_alpha(model, tol=1e-13, max_iter=200):
    """Unique root of M(beta) = 1 in (0, 1): bisection to width 1e-3, then safeguarded Newton."""
    report = validate_regime(model)
    if not report.dh_ok:
        raise RegimeViolation("no root of E[Z^a] = 1 in (0, 1): " + "; ".join(report.messages))
    lo, hi = 0.0, 1.0
    while hi - lo > 1e-3:
        mid = 0.5 * (lo + hi)
        if mellin(model, mid) < 1.0:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        f = mellin(model, x) - 1.0
        if abs(f) <= tol:
            break
        if f < 0:
            lo = x
        else:
            hi = x
        step = x - f / mellin(model, x, deriv=1)
        x = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo < 1e-16:
            break
    return x, abs(mellin(model, x) - 1.0)


def _edge_points(z0, z1, n):
    return z0 + (z1 - z0) * np.linspace(0.0, 1.0, n)


def _boundary_winding(model, corners, n0=64, max_rounds=40, order=None):
    """Winding number of 1 - M around the closed polygon; also returns min |1 - M|."""
    total = 0.0
    fmin = math.inf
    for z0, z1 in zip(corners, corners[1:] + corners[:1]):
        s = np.linspace(0.0, 1.0, max(n0, int(abs(z1 - z0) * 8) + 2))
        f = 1.0 - mellin(model, z0 + (z1 - z0) * s, order=order)
        for _ in range(max_rounds):
            dphi = np.angle(f[1:] / f[:-1])
            bad = np.flatnonzero(np.abs(dphi) > MAX_ARG_STEP)
            if bad.size == 0:
                break
            mids = 0.5 * (s[bad] + s[bad + 1])
            fm = 1.0 - mellin(model, z0 + (z1 - z0) * mids, order=order)
            s = np.insert(s, bad + 1, mids)
            f = np.insert(f, bad + 1, fm)
        else:
            raise BoundaryRoot("argument increments did not resolve on the boundary")
        fmin = min(fmin, float(np.min(np.abs(f))))
        total += float(np.sum(np.angle(f[1:] / f[:-1])))
    return total / (2 * math.pi), fmin


def winding_count(model, rectangle, threshold=BOUNDARY_THRESHOLD, order=None):
    """Number of zeros of 1 - M(u) strictly inside (re_lo, re_hi, im_lo, im_hi)."""
    re_lo, re_hi, im_lo, im_hi = map(float, rectangle)
    if not (re_lo < re_hi and im_lo < im_hi):
        raise InvalidParameter(f"degenerate rectangle {rectangle}")
    size = max(re_hi - re_lo, im_hi - im_lo)
    for attempt in range(MAX_PERTURB + 1):
        # deterministic outward nudges of growing size
        d = PERTURB_REL * size * attempt * np.array([-1.0, 1.3, -0.7, 1.1])
        a, b, c, e = re_lo + d[0], re_hi + d[1], im_lo + d[2], im_hi + d[3]
        corners = [complex(a, c), complex(b, c), complex(b, e), complex(a, e)]
        w, fmin = _boundary_winding(model, corners, order=order)
        if fmin >= threshold:
            n = int(round(w))
            if abs(w - n) > 1e-6:
                raise BoundaryRoot(f"non-integer winding {w}")
            return n
    raise BoundaryRoot(f"|1 - M| below {threshold} on the boundary of {rectangle}", min_modulus=fmin)


def locate_roots(model, rectangle, min_size=1e-6, depth=0, order=None):
    """Roots of M(u) = 1 inside the rectangle by subdivision plus Newton refinement."""
    count = winding_count(model, rectangle, order=order)
    if count == 0:
        return []
    re_lo, re_hi, im_lo, im_hi = rectangle
    if count == 1:
        z = complex(0.5 * (re_lo + re_hi), 0.5 * (im_lo + im_hi))
        for _ in range(60):
            dz = (mellin(model, z, order=order) - 1.0) / mellin(model, z, deriv=1, order=order)
            z -= dz
            if abs(dz) < 1e-14 * max(1.0, abs(z)):
                break
        if re_lo <= z.real <= re_hi and im_lo <= z.imag <= im_hi:
            return [z]
    if max(re_hi - re_lo, im_hi - im_lo) < min_size or depth > 40:
        z = complex(0.5 * (re_lo + re_hi), 0.5 * (im_lo + im_hi))
        return [z] * count
    rm, im = 0.5 * (re_lo + re_hi), 0.5 * (im_lo + im_hi)
    out = []
    for box in ((re_lo, rm, im_lo, im), (rm, re_hi, im_lo, im), (re_lo, rm, im, im_hi), (rm, re_hi, im, im_hi)):
        out.extend(locate_roots(model, box, min_size, depth + 1, order))
    return out


def find_delta(model, alpha, im_max=100.0, delta_cap=0.5, eta=1e-3, resolution=1e-4,
               warn_below=0.05, order=None, warnings=None):
    """Largest delta <= min(delta_cap, alpha, 1 - alpha) with alpha the only root in the strip.

    Rectangles span Re u in [alpha - eta, alpha + d]; the modulus bound rules out
    roots with Re u in (0, alpha), so a root-free strip means a count of exactly 1.
    """
    if delta_cap <= 0:
        raise InvalidParameter("delta_cap must be positive")
    if im_max <= 0:
        raise InvalidParameter("im_max must be positive")
    warnings = [] if warnings is None else warnings
    d_max = min(delta_cap, alpha, 1.0 - alpha)

    def extra_roots(d):
        return winding_count(model, (alpha - eta, alpha + d, -im_max, im_max), order=order) - 1

    top = 1.0 - mellin(model, alpha + np.linspace(0.0, d_max, 257) + 1j * im_max, order=order)
    if np.min(np.abs(top)) > 0.5:
        warnings.append(
            f"|1 - M| > 1/2 along Im u = {im_max:g}; strip above declared root-free heuristically (not certified)"
        )
    else:
        warnings.append(f"|1 - M| dips to {np.min(np.abs(top)):.3g} on the top edge Im u = {im_max:g}")

    if extra_roots(d_max) == 0:
        return d_max
    lo, hi = 0.0, d_max
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if extra_roots(mid) == 0:
            lo = mid
        else:
            hi = mid
    if lo < resolution:
        raise ScanInconclusive(
            "complex roots within resolution of Re u = alpha (log-periodic case)", delta_upper=hi
        )
    if lo < warn_below:
        warnings.append(f"small root gap delta = {lo:.4g}: complex roots approach Re u = alpha")
    return lo


def c_beta(model, beta, alpha=None):
    """Contraction constant 1 / (1 - E[Z^beta]) for 0 < beta < alpha."""
    if alpha is None:
        alpha, _ = solve_alpha(model)
    if not (0 < beta < alpha):
        raise OutOfRange(f"c_beta needs 0 < beta < alpha = {alpha:.6g}, got {beta!r}")
    m = mellin(model, float(beta))
    if m >= 1.0:
        raise OutOfRange(f"E[Z^beta] = {m!r} >= 1")
    return 1.0 / (1.0 - m)


def alpha_report(model, im_max=100.0, delta_cap=0.5, eta=1e-3, scan_width=1.0, tol=1e-13, order=None):
    alpha, residual = solve_alpha(model, tol=tol)
    warnings = []
    delta = find_delta(model, alpha, im_max=im_max, delta_cap=delta_cap, eta=eta, order=order, warnings=warnings)
    strip = (alpha - eta, alpha + scan_width, im_max)
    upper = locate_roots(model, (strip[0], strip[1], 1e-7 * math.pi, im_max), order=order)
    roots = [complex(alpha, 0.0)]
    for z in sorted(upper, key=lambda z: (z.real, z.imag)):
        roots.extend([z, z.conjugate()])
    return AlphaReport(alpha=alpha, residual=residual, delta=delta, roots=roots, scan_strip=strip,
                       im_max=im_max, warnings=warnings)
