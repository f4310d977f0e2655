"""FPU chain: interaction potentials, normalization, Hamiltonian, remainder, leapfrog."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .lattice_fourier import LatticeField, LatticeGrid, dft_forward, require_zero_mean

KINDS = ("cubic", "polynomial", "lennard_jones", "toda")


def _falling(p: float, j: int) -> float:
    out = 1.0
    for i in range(j):
        out *= p - i
    return out


@dataclass(frozen=True)
class Potential:
    """Nearest-neighbour interaction V with V(0) = V'(0) = 0.

    Parameters by kind: cubic (a, b); polynomial (c2, c3, ..., cN) with
    V = sum c_k r^k / k!; lennard_jones (e, d); toda (alpha, beta).
    """

    kind: str
    params: Tuple[float, ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        n = len(self.params)
        if self.kind in ("cubic", "lennard_jones", "toda") and n != 2:
            raise ValueError(f"{self.kind} takes two parameters")
        if self.kind == "polynomial" and n < 2:
            raise ValueError("polynomial needs at least c2 and c3")
        if self.kind == "lennard_jones" and (self.params[0] <= 0 or self.params[1] == 0):
            raise ValueError("lennard_jones needs e > 0 and d != 0")
        if self.kind == "toda" and (self.params[0] == 0 or self.params[1] == 0):
            raise ValueError("toda needs alpha, beta nonzero")
        if not self.a > 0:
            raise ValueError(f"V''(0) must be positive, got {self.a}")

    @classmethod
    def cubic(cls, a: float = 1.0, b: float = 1.0) -> "Potential":
        return cls("cubic", (a, b))

    @classmethod
    def polynomial(cls, *coeffs: float) -> "Potential":
        return cls("polynomial", tuple(coeffs))

    @classmethod
    def lennard_jones(cls, e: float, d: float) -> "Potential":
        return cls("lennard_jones", (e, d))

    @classmethod
    def toda(cls, alpha: float, beta: float) -> "Potential":
        return cls("toda", (alpha, beta))

    @classmethod
    def from_spec(cls, spec) -> "Potential":
        """Parse ``{"kind": ..., "params": [...]}`` or ``"kind:p1,p2"``."""
        if isinstance(spec, Potential):
            return spec
        if isinstance(spec, str):
            kind, _, rest = spec.partition(":")
            params = tuple(float(x) for x in rest.split(",")) if rest else ()
            if not params and kind == "cubic":
                params = (1.0, 1.0)
            return cls(kind, params)
        return cls(spec["kind"], tuple(spec.get("params", ())))

    def to_spec(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    @property
    def a(self) -> float:
        return float(self.derivative(2, 0.0))

    @property
    def b(self) -> float:
        return float(self.derivative(3, 0.0))

    def check_domain(self, r) -> None:
        if self.kind == "lennard_jones":
            d = self.params[1]
            if np.any(1.0 + np.asarray(r) / d <= 0):
                raise ValueError("lennard_jones evaluated outside its domain 1 + r/d > 0")

    def derivative(self, order: int, r):
        """V^(order)(r) for order 0..4."""
        if order not in range(5):
            raise ValueError("order must be in 0..4")
        r = np.asarray(r, dtype=float)
        self.check_domain(r)
        k, p = self.kind, self.params
        if k == "cubic":
            a, b = p
            return [a * r ** 2 / 2 + b * r ** 3 / 6, a * r + b * r ** 2 / 2, a + b * r,
                    b + 0 * r, 0 * r][order]
        if k == "polynomial":
            out = np.zeros_like(r)
            for i, c in enumerate(p):
                kk = i + 2
                if kk >= order:
                    out = out + c * r ** (kk - order) / math.factorial(kk - order)
            return out
        if k == "lennard_jones":
            e, d = p
            y = 1.0 + r / d
            if order == 0:
                return e * (y ** -12 - 2 * y ** -6 + 1)
            return e / d ** order * (_falling(-12, order) * y ** (-12 - order)
                                     - 2 * _falling(-6, order) * y ** (-6 - order))
        alpha, beta = p
        if order == 0:
            x = beta * r
            return alpha * (np.expm1(x) - x)
        if order == 1:
            return alpha * beta * np.expm1(beta * r)
        return alpha * beta ** order * np.exp(beta * r)

    def tail(self, r):
        """V'(r) - a r - b r^2/2 without cancellation at small r."""
        r = np.asarray(r, dtype=float)
        self.check_domain(r)
        k, p = self.kind, self.params
        if k == "cubic":
            return np.zeros_like(r)
        if k == "polynomial":
            out = np.zeros_like(r)
            for i, c in enumerate(p[2:]):
                kk = i + 4
                out = out + c * r ** (kk - 1) / math.factorial(kk - 1)
            return out
        if k == "toda":
            alpha, beta = p
            return alpha * beta * _exp_tail3(beta * r)
        e, d = p
        y = r / d
        out = np.empty_like(y)
        small = np.abs(y) < 0.05
        ys = y[small]
        # (1+y)^-7 - (1+y)^-13 from the binomial series, terms j >= 3
        acc = np.zeros_like(ys)
        for j in range(3, 40):
            cj = (_falling(-7, j) - _falling(-13, j)) / math.factorial(j)
            acc = acc + cj * ys ** j
        out[small] = 12 * e / d * acc
        yb = y[~small]
        full = 12 * e / d * ((1 + yb) ** -7 - (1 + yb) ** -13)
        out[~small] = full - self.a * r[~small] - self.b * r[~small] ** 2 / 2
        return out


def _exp_tail3(x):
    """exp(x) - 1 - x - x^2/2."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 0.1
    xs = x[small]
    term = xs ** 3 / 6
    acc = term.copy()
    for j in range(4, 16):
        term = term * xs / j
        acc = acc + term
    out[small] = acc
    xb = x[~small]
    out[~small] = np.expm1(xb) - xb - xb ** 2 / 2
    return out


def potential_eval(p: Potential, order: int, r):
    """Derivative of the requested order; rejects out-of-domain amplitudes."""
    return p.derivative(order, r)


@dataclass(frozen=True)
class Scaling:
    """Map normalized solutions back: r(t, x) = amplitude * rho(time * t, x)."""

    amplitude: float
    time: float

    def apply(self, rho_of_t, t):
        return self.amplitude * rho_of_t(self.time * t)


def normalize(p: Potential) -> Tuple[Potential, Scaling]:
    """Rescale to V''(0) = V'''(0) = 1.

    Returns (W, scaling) with W(y) = V(kappa y) / (kappa^2 nu^2), kappa = a/b,
    nu = sqrt(a); a solution rho of the W-chain gives the V-chain solution
    r(t) = kappa rho(nu t).
    """
    a, b = p.a, p.b
    if b == 0:
        raise ValueError("normalization needs V'''(0) != 0")
    kappa, nu = a / b, math.sqrt(a)
    k, prm = p.kind, p.params
    if k == "cubic":
        q = Potential.cubic(1.0, 1.0)
    elif k == "polynomial":
        q = Potential.polynomial(*[c * kappa ** (i + 2) / (kappa ** 2 * nu ** 2)
                                   for i, c in enumerate(prm)])
    elif k == "lennard_jones":
        e, d = prm
        q = Potential.lennard_jones(e / (kappa ** 2 * nu ** 2), d / kappa)
    else:
        alpha, beta = prm
        q = Potential.toda(alpha / (kappa ** 2 * nu ** 2), beta * kappa)
    return q, Scaling(amplitude=kappa, time=nu)


def denormalize(q: Potential, scaling: Scaling) -> Potential:
    """Potential V whose normalization by ``scaling`` gives ``q``."""
    kappa, nu = scaling.amplitude, scaling.time
    k = q.kind
    if k == "cubic":
        return Potential.cubic(nu ** 2, nu ** 2 / kappa)
    if k == "polynomial":
        return Potential.polynomial(*[c * kappa ** 2 * nu ** 2 / kappa ** (i + 2)
                                      for i, c in enumerate(q.params)])
    if k == "lennard_jones":
        e, d = q.params
        return Potential.lennard_jones(e * kappa ** 2 * nu ** 2, d * kappa)
    alpha, beta = q.params
    return Potential.toda(alpha * kappa ** 2 * nu ** 2, beta / kappa)


@dataclass(frozen=True)
class FpuState:
    """Relative displacement r, its time derivative rt, and the time."""

    r: LatticeField
    rt: LatticeField
    time: float = 0.0

    def __post_init__(self):
        if self.r.grid != self.rt.grid:
            raise ValueError("r and rt live on different grids")

    @property
    def grid(self) -> LatticeGrid:
        return self.r.grid


def kinetic_symbol(grid: LatticeGrid) -> np.ndarray:
    """h^2 / sqrt(-Delta_h) on the grid (zero on the zero mode)."""
    h = grid.h
    w = np.abs((2.0 / h) * np.sin(h * grid.frequencies / 2))
    out = np.zeros_like(w)
    nz = w > 0
    out[nz] = h ** 2 / w[nz]
    return out


def hamiltonian(state: FpuState, p: Potential) -> float:
    """H_h = h sum [ (1/2)((h^2/sqrt(-Delta_h)) r_t)^2 + V(h^2 r)/h^4 ]."""
    require_zero_mean(state.rt, "rt")
    g = state.grid
    h = g.h
    c = kinetic_symbol(g) * dft_forward(state.rt).coeffs
    kinetic = 0.5 * float(np.sum(np.abs(c) ** 2)) / g.L
    pot = h * float(np.sum(p.derivative(0, h ** 2 * state.r.values))) / h ** 4
    return kinetic + pot


def remainder_values(r: np.ndarray, p: Potential, h: float) -> np.ndarray:
    """R = (2/h^6)(V'(h^2 r) - a h^2 r) - r^2/h^2, evaluated without cancellation."""
    y = h ** 2 * np.asarray(r, dtype=float)
    out = (2.0 / h ** 6) * p.tail(y)
    if p.b != 1.0:
        out = out + (p.b - 1.0) * np.asarray(r) ** 2 / h ** 2
    return out


def remainder(r: LatticeField, p: Potential) -> LatticeField:
    """The remainder field R entering the nonlinearity as r^2 + h^2 R."""
    return LatticeField(r.grid, remainder_values(r.values, p, r.grid.h))


def _lap(v: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(v, -1) + np.roll(v, 1) - 2 * v) / h ** 2


def nonlinearity_defect(r: LatticeField, p: Potential) -> LatticeField:
    """(1/h^6) Delta_h {V'(h^2 r) - a h^2 r} - (1/(2h^2)) Delta_h (r^2).

    Evaluated through V' - a y = tail(y) + b y^2/2, so the O(h^-2) quadratic
    parts cancel exactly instead of in floating point.
    """
    h = r.grid.h
    y = h ** 2 * r.values
    out = _lap(p.tail(y), h) / h ** 6
    if p.b != 1.0:
        out = out + (p.b - 1.0) * _lap(r.values ** 2, h) / (2 * h ** 2)
    return LatticeField(r.grid, out)


def stable_dt(state: FpuState, p: Potential) -> float:
    """Leapfrog bound 0.5 h_eff / sqrt(max |V''|) on the current amplitudes."""
    h_eff = state.grid.h
    vpp = float(np.max(np.abs(p.derivative(2, state.r.values))))
    vpp = max(vpp, p.a)
    return 0.5 * h_eff / math.sqrt(vpp)


def _drop_nyquist(a: np.ndarray) -> np.ndarray:
    alt = (-1.0) ** np.arange(a.size)
    return a - np.mean(a * alt) * alt


def step_direct(state: FpuState, p: Potential, dt: float, drop_nyquist: bool = False) -> FpuState:
    """Velocity-Verlet step of r_tt = Delta V'(r) on the grid of ``state``.

    For the physical chain the grid has spacing 1; a general spacing h_eff
    integrates r_tt = (1/h_eff^2)(r(x+h)+r(x-h)-2r(x)) applied to V'(r).
    ``drop_nyquist`` removes the alternating mode from the acceleration,
    the one mode the split (u^+, u^-) formulation cannot carry.
    """
    if abs(dt) > stable_dt(state, p) * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the leapfrog bound {stable_dt(state, p):.3g}")
    h = state.grid.h
    r, v = state.r.values, state.rt.values

    def acc(x):
        a = _lap(p.derivative(1, x), h)
        return _drop_nyquist(a) if drop_nyquist else a

    v_half = v + 0.5 * dt * acc(r)
    r_new = r + dt * v_half
    v_new = v_half + 0.5 * dt * acc(r_new)
    g = state.grid
    return FpuState(LatticeField(g, r_new), LatticeField(g, v_new), state.time + dt)


def integrate_direct(state: FpuState, p: Potential, t_end: float, dt: float,
                     drop_nyquist: bool = False) -> FpuState:
    n = max(1, int(math.ceil(abs(t_end - state.time) / abs(dt) - 1e-12)))
    step = (t_end - state.time) / n
    for _ in range(n):
        state = step_direct(state, p, step, drop_nyquist)
    return state


def to_unscaled(r_scaled: LatticeField, rt_scaled: LatticeField, t_scaled: float) -> FpuState:
    """r(t, x) = h^2 r_h(h^3 t, h x) on the unit-spacing chain."""
    h = r_scaled.grid.h
    g1 = LatticeGrid(1.0, r_scaled.grid.n)
    return FpuState(LatticeField(g1, h ** 2 * r_scaled.values),
                    LatticeField(g1, h ** 5 * rt_scaled.values), t_scaled / h ** 3)


def to_scaled(state: FpuState, h: float) -> FpuState:
    """Inverse of to_unscaled: r_h(t, x) = h^-2 r(t/h^3, x/h)."""
    g = LatticeGrid(h, state.grid.n)
    return FpuState(LatticeField(g, state.r.values / h ** 2),
                    LatticeField(g, state.rt.values / h ** 5), state.time * h ** 3)
