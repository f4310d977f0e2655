"""Lattice-to-line bridge: piecewise-linear interpolation and the defects around it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .lattice_fourier import LatticeField, LatticeGrid, apply_to_field, symbol_table
from .propagators import TWO_PI_LD, phase_factor

MIN_S_SAMPLES = 64

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class LineField:
    """Samples on the fine grid (spacing h/rho) of the box carrying a lattice of spacing h."""

    field: LatticeField
    rho: int
    coarse_h: float

    def __post_init__(self):
        if self.rho < 2:
            raise ValueError("refinement factor must be at least 2")
        if abs(self.field.grid.h * self.rho - self.coarse_h) > 1e-12 * self.coarse_h:
            raise ValueError("fine spacing must equal coarse_h / rho")

    @property
    def grid(self) -> LatticeGrid:
        return self.field.grid

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    def norm(self) -> float:
        """Exact L2 norm of the piecewise-linear function through the samples."""
        v = self.values
        w = np.roll(v, -1)
        return float(np.sqrt(self.grid.h * np.sum((v * v + v * w + w * w) / 3)))

    def __sub__(self, other: "LineField") -> "LineField":
        _same_line(self, other)
        return LineField(self.field - other.field, self.rho, self.coarse_h)

    def __add__(self, other: "LineField") -> "LineField":
        _same_line(self, other)
        return LineField(self.field + other.field, self.rho, self.coarse_h)


def _same_line(a: LineField, b: LineField) -> None:
    if a.grid != b.grid or a.rho != b.rho:
        raise ValueError("line fields live on different grids")


def fine_grid(grid: LatticeGrid, rho: int) -> LatticeGrid:
    return LatticeGrid(grid.h / rho, grid.n * rho)


def interpolate(f: LatticeField, rho: int = 8) -> LineField:
    """(l_h f)(x) = f(x_m) + (d_h^+ f)(x_m)(x - x_m) sampled on the fine grid."""
    if int(rho) != rho or rho < 2:
        raise ValueError("refinement factor must be an integer >= 2")
    rho = int(rho)
    v = f.values
    d = np.roll(v, -1) - v
    frac = np.arange(rho) / rho
    fine = (v[:, None] + d[:, None] * frac[None, :]).ravel()
    return LineField(LatticeField(fine_grid(f.grid, rho), fine), rho, f.grid.h)


def interpolation_symbol(xi, h: float) -> np.ndarray:
    """L_h(xi) = 4 sin^2(h xi/2) / (h xi)^2, equal to 1 at xi = 0."""
    xi = np.asarray(xi, dtype=float)
    z = h * xi / 2
    out = np.ones_like(z)
    nz = z != 0
    out[nz] = (np.sin(z[nz]) / z[nz]) ** 2
    return out


def lattice_transform_at(f: LatticeField, xi) -> np.ndarray:
    """Periodized lattice transform h sum_m f(x_m) exp(-i x_m xi) at arbitrary xi."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    x = f.grid.nodes
    return f.grid.h * np.exp(-1j * np.outer(xi, x)) @ f.values


def interpolant_transform(f: LatticeField, xi) -> np.ndarray:
    """Transform of l_h f over one period, via the multiplier identity.

    Exact for xi in the dual lattice 2 pi Z / L, where the period wrap is invisible.
    """
    return interpolation_symbol(xi, f.grid.h) * lattice_transform_at(f, xi)


def _cell_l2_sq(a: np.ndarray, b: np.ndarray, h: float) -> float:
    """sum over cells of the integral of (a_m + (b_m - a_m) tau)^2, tau in [0, 1], times h."""
    return float(h * np.sum((a * a + a * b + b * b) / 3))


def commutator_defect(f: LatticeField) -> float:
    """|| l_h nabla_h f - d_x l_h f ||_{L2(box)}, integrated exactly cell by cell."""
    h = f.grid.h
    g = apply_to_field(f, symbol_table(h)["nabla"].on_grid(f.grid)).values
    dplus = (np.roll(f.values, -1) - f.values) / h
    a = g - dplus
    b = np.roll(g, -1) - dplus
    return float(np.sqrt(_cell_l2_sq(a, b, h)))


def product_defect(f: LatticeField) -> float:
    """|| d_x l_h(f^2) - d_x (l_h f)^2 ||_{L2(box)}.

    On the cell [x_m, x_m + h] the integrand is delta^2 (h - 2(x - x_m)) with
    delta = d_h^+ f(x_m), so each cell contributes delta^4 h^3 / 3.
    """
    h = f.grid.h
    delta = (np.roll(f.values, -1) - f.values) / h
    return float(np.sqrt(np.sum(delta ** 4) * h ** 3 / 3))


def product_identity_residual(f: LatticeField, rho: int = 8) -> float:
    """Max deviation, over fine points inside each cell, between the two sides of
    d_x l_h(f^2) - d_x (l_h f)^2 = h delta^2 - 2 delta^2 (x - x_m)."""
    h = f.grid.h
    v = f.values
    delta = (np.roll(v, -1) - v) / h
    tau = h * np.arange(rho) / rho
    lhs_sq = (np.roll(v, -1) ** 2 - v ** 2) / h  # d_x l_h(f^2) is cellwise constant
    lf = v[:, None] + delta[:, None] * tau[None, :]
    lhs = lhs_sq[:, None] - 2 * lf * delta[:, None]
    rhs = h * delta[:, None] ** 2 - 2 * delta[:, None] ** 2 * tau[None, :]
    scale = max(float(np.max(np.abs(rhs))), float(np.max(np.abs(lhs_sq))), 1e-300)
    return float(np.max(np.abs(lhs - rhs)) / scale)


def cell_derivative(values: np.ndarray, dx: float) -> np.ndarray:
    """Forward differences: the exact derivative of the piecewise-linear interpolant."""
    return (np.roll(values, -1, axis=-1) - values) / dx


def mixed_norm_S(samples: np.ndarray, times: np.ndarray, dx: float, T: Optional[float] = None) -> float:
    """||u||_S = max_t ||u(t)||_{L2} + max_x (int |d_x u|^2 dt)^{1/2}.

    ``samples`` is (n_t, n_x) node values of piecewise-linear-in-x fields on a
    uniform periodic grid; the time integral uses the trapezoid rule.
    """
    samples = np.asarray(samples, dtype=float)
    times = np.asarray(times, dtype=float)
    if samples.ndim != 2 or samples.shape[0] != times.size:
        raise ValueError("samples must be (n_times, n_x) matching times")
    if times.size < MIN_S_SAMPLES:
        raise ValueError(f"mixed norm needs at least {MIN_S_SAMPLES} time samples, got {times.size}")
    if T is not None and (times[0] > -T + 1e-12 or times[-1] < T - 1e-12):
        raise ValueError("samples do not cover [-T, T]")
    nxt = np.roll(samples, -1, axis=1)
    l2 = np.sqrt(dx * np.sum((samples ** 2 + samples * nxt + nxt ** 2) / 3, axis=1))
    du = cell_derivative(samples, dx)
    smoothing = np.sqrt(_trapezoid(du ** 2, times, axis=0))
    return float(np.max(l2) + np.max(smoothing))


def airy_of_interpolant(f: LatticeField, t: float, sign: int, rho: int = 8, images: int = 8) -> LineField:
    """Node samples of S^{sign}(t) l_h f on the fine grid.

    The transform of l_h f at xi is L_h(xi) F_h f(xi), so the fine-grid DFT of
    the evolved function collects the images xi + 2 pi rho j / h, |j| <= images,
    each with its own Airy phase.
    """
    g = f.grid
    fg = fine_grid(g, rho)
    xi = fg.frequencies.astype(np.longdouble)
    period = np.longdouble(2) * np.pi / np.longdouble(fg.h)
    Fh = np.fft.fft(f.values) * g.h  # at xi_k, k in the coarse zone
    coarse_idx = np.fft.fftfreq(fg.n, d=1.0 / fg.n).astype(np.int64) % g.n
    base = Fh[coarse_idx]
    total = np.zeros(fg.n, dtype=complex)
    for j in range(-images, images + 1):
        z = xi + j * period
        ph = phase_factor(sign * t, z ** 3 / 24)
        total += interpolation_symbol(z.astype(float), g.h) * ph
    coeffs = base * total
    vals = np.fft.ifft(coeffs).real / fg.h
    return LineField(LatticeField(fg, vals), rho, g.h)


def translate_line(w: LatticeField, shift: float) -> LatticeField:
    """x -> w(x - shift) on the periodic fine grid (spectral, Nyquist averaged)."""
    g = w.grid
    rate = g.rfrequencies.astype(np.longdouble)
    e = phase_factor(-shift, rate)
    e[-1] = e[-1].real
    return LatticeField(g, np.fft.irfft(e * np.fft.rfft(w.values), n=g.n))


def continuum_error(r_samples: Sequence[LatticeField], w_plus: Sequence[LatticeField],
                    w_minus: Sequence[LatticeField], times: Sequence[float], rho: int) -> dict:
    """sup_t || l_h r(t) - w^+(t, x - t/h^2) - w^-(t, x + t/h^2) ||_{L2(box)}.

    KdV fields live on the fine grid of the lattice; translations wrap modulo
    the period.  Returns the sup, the per-time errors, and their times.
    """
    if not (len(r_samples) == len(w_plus) == len(w_minus) == len(times)):
        raise ValueError("all trajectories need the same sample times")
    errs = []
    for r, wp, wm, t in zip(r_samples, w_plus, w_minus, times):
        lr = interpolate(r, rho)
        if wp.grid != lr.grid or wm.grid != lr.grid:
            raise ValueError("KdV fields must live on the fine grid of the lattice")
        h = r.grid.h
        model = translate_line(wp, t / h ** 2).values + translate_line(wm, -t / h ** 2).values
        diff = lr.values - model
        errs.append(float(np.sqrt(lr.grid.h * np.sum(diff ** 2))))
    errs = np.array(errs)
    return {"error": float(np.max(errs)) if errs.size else 0.0, "per_time": errs,
            "times": np.asarray(times, dtype=float)}


def seam_mass(w: LatticeField, width: float) -> float:
    """Fraction of ||w||^2 within ``width`` of the seam x = 0 (= L)."""
    x = w.grid.nodes
    L = w.grid.L
    near = (x < width) | (x > L - width)
    tot = float(np.sum(w.values ** 2))
    return float(np.sum(w.values[near] ** 2) / tot) if tot > 0 else 0.0
