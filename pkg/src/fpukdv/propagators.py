"""Exact Fourier-side evolution operators.

Sign conventions (symbols on the dual grid):

    S_h^{+-}(t) = exp(-+(t/h^2)(nabla_h - d_h))   ->  exp(+- i t s_h(xi))
    S^{+-}(t)   = exp(-+(t/24) d_x^3)             ->  exp(+- i t xi^3 / 24)
    exp(+-(t/h^2) d_h)                            ->  exp(+- i t xi / h^2)

with s_h(xi) = (xi - (2/h) sin(h xi / 2)) / h^2.  At t = k h^3 the last flow is
the lattice shift f -> f(. +- k h).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .lattice_fourier import (
    TWO_PI_LD,
    LatticeField,
    LatticeGrid,
    Spectrum,
    apply_to_field,
    dft_forward,
    dft_inverse,
    require_zero_mean,
    symbol_on_grid,
)

# below this |h xi| the phase is summed from its Taylor series
_SERIES_CUTOFF = 0.5
_N_TERMS = 9


def _series_part(theta):
    """theta - 2 sin(theta/2) from its alternating series (accurate for small theta)."""
    half = theta / 2
    term = 2 * half ** 3 / 6  # j = 1 term: 2 (theta/2)^3 / 3!
    total = term
    sq = half * half
    for j in range(2, _N_TERMS + 1):
        term = -term * sq / ((2 * j) * (2 * j + 1))
        total = total + term
    return total


def fpu_phase(xi, h: float, dtype=float) -> np.ndarray:
    """s_h(xi) = (xi - (2/h) sin(h xi/2)) / h^2, cancellation-free."""
    xi = np.asarray(xi, dtype=dtype)
    hh = dtype(h) if dtype is not float else float(h)
    theta = hh * xi
    out = np.empty_like(theta)
    small = np.abs(theta) < _SERIES_CUTOFF
    out[small] = _series_part(theta[small])
    tb = theta[~small]
    out[~small] = tb - 2 * np.sin(tb / 2)
    return out / hh ** 3


def fpu_phase_d1(xi, h: float) -> np.ndarray:
    """s_h'(xi) = (1 - cos(h xi/2)) / h^2."""
    xi = np.asarray(xi, dtype=float)
    return 2 * np.sin(h * xi / 4) ** 2 / h ** 2


def fpu_phase_d2(xi, h: float) -> np.ndarray:
    """s_h''(xi) = sin(h xi/2) / (2h)."""
    xi = np.asarray(xi, dtype=float)
    return np.sin(h * xi / 2) / (2 * h)


def fpu_phase_d3(xi, h: float) -> np.ndarray:
    """s_h'''(xi) = cos(h xi/2) / 4."""
    xi = np.asarray(xi, dtype=float)
    return np.cos(h * xi / 2) / 4


def airy_phase(xi, dtype=float) -> np.ndarray:
    xi = np.asarray(xi, dtype=dtype)
    return xi ** 3 / 24


def transport_phase(xi, h: float, dtype=float) -> np.ndarray:
    xi = np.asarray(xi, dtype=dtype)
    return xi / (dtype(h) if dtype is not float else h) ** 2


def phase_factor(t: float, omega_ld: np.ndarray) -> np.ndarray:
    """exp(i t omega) with t*omega reduced modulo 2 pi in extended precision."""
    arg = np.longdouble(t) * omega_ld
    arg = np.fmod(arg, TWO_PI_LD)
    return np.exp(1j * arg.astype(float))


@lru_cache(maxsize=64)
def _grid_phases(grid: LatticeGrid, which: str, real: bool):
    xi = (grid.rfrequencies if real else grid.frequencies).astype(np.longdouble)
    if which == "fpu":
        return fpu_phase(xi, grid.h, dtype=np.longdouble)
    if which == "airy":
        return airy_phase(xi, dtype=np.longdouble)
    if which == "transport":
        return transport_phase(xi, grid.h, dtype=np.longdouble)
    if which == "wave":
        # omega / h^2 with omega = (2/h) sin(h xi / 2), signed
        hh = np.longdouble(grid.h)
        return (2 / hh) * np.sin(hh * xi / 2) / hh ** 2
    raise ValueError(which)


def grid_phase(grid: LatticeGrid, which: str, real: bool = False) -> np.ndarray:
    """Extended-precision phase rate on the full (or half) dual grid."""
    return _grid_phases(grid, which, real)


def flow_symbol(grid: LatticeGrid, which: str, t: float, sign: int, real: bool = False) -> np.ndarray:
    """exp(sign * i t phase(xi)) on the grid, with the Nyquist averaging rule.

    Odd phases at Nyquist average to cos(t phase(pi/h)); even ones are exact.
    """
    _check_sign(sign)
    e = phase_factor(sign * t, grid_phase(grid, which, real))
    k = -1 if real else grid.nyquist_index
    e[k] = e[k].real + 0j  # mean of exp(+-i t phase) at the two zone edges
    return e


def _check_sign(sign: int) -> None:
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")


def apply_fpu_flow(f: LatticeField, t: float, sign: int) -> LatticeField:
    """S_h^{sign}(t) f."""
    return apply_to_field(f, flow_symbol(f.grid, "fpu", t, sign))


def apply_airy_flow(f: LatticeField, t: float, sign: int) -> LatticeField:
    """S^{sign}(t) f on the periodic box carried by ``f.grid``."""
    return apply_to_field(f, flow_symbol(f.grid, "airy", t, sign))


def apply_translation_flow(f: LatticeField, t: float, sign: int) -> LatticeField:
    """exp(sign (t/h^2) d_h) f; equals f(. + sign k h) when t = k h^3."""
    return apply_to_field(f, flow_symbol(f.grid, "transport", t, sign))


def wave_symbols(grid: LatticeGrid, t: float):
    """(cos(t|w|/h^2), h^2 sin(t|w|/h^2)/|w|) with w = (2/h) sin(h xi/2)."""
    h = grid.h
    xi = grid.frequencies
    w = np.abs((2.0 / h) * np.sin(h * xi / 2))
    c = phase_factor(t, grid_phase(grid, "wave")).real
    # cos is even in omega, so the signed rate gives the same value
    arg = np.fmod(np.longdouble(t) * np.abs(grid_phase(grid, "wave")), TWO_PI_LD).astype(float)
    sn = np.sin(arg)
    g = np.zeros_like(w)
    nz = w > 0
    g[nz] = h ** 2 * sn[nz] / w[nz]
    g[~nz] = t  # limit of h^2 sin(t w / h^2)/w at w -> 0
    return c, g


def wave_propagator_pair(f: LatticeField, g: LatticeField, t: float) -> LatticeField:
    """cos(t sqrt(-Delta_h)/h^2) f + sin(t sqrt(-Delta_h)/h^2) (h^2/sqrt(-Delta_h)) g."""
    require_zero_mean(g, "velocity field")
    c, s = wave_symbols(f.grid, t)
    out = c * dft_forward(f).coeffs + s * dft_forward(g).coeffs
    return dft_inverse(Spectrum(f.grid, out))


def wave_propagator_pair_split(f: LatticeField, g: LatticeField, t: float) -> LatticeField:
    """Same evolution assembled from exp(+-(t/h^2) nabla_h).

    Uses cos = (E_+ + E_-)/2 and sin/w = (E_+ - E_-) nabla_h^{-1}/2, each
    combination evaluated as a single symbol.
    """
    require_zero_mean(g, "velocity field")
    grid = f.grid
    h = grid.h

    def e_plus(xi):
        return np.exp(1j * t * (2.0 / h) * np.sin(h * xi / 2) / h ** 2)

    def e_minus(xi):
        return np.exp(-1j * t * (2.0 / h) * np.sin(h * xi / 2) / h ** 2)

    def even_part(xi):
        return 0.5 * (e_plus(xi) + e_minus(xi))

    def odd_part(xi):
        w = (2.0 / h) * np.sin(h * xi / 2)
        out = np.full(np.shape(xi), t + 0j)
        nz = w != 0
        out[nz] = h ** 2 * 0.5 * (e_plus(xi[nz]) - e_minus(xi[nz])) / (1j * w[nz])
        return out

    if t / h ** 2 > 1e6:
        raise ValueError("split form is for moderate t/h^2; use wave_propagator_pair")
    a = symbol_on_grid(even_part, grid)
    b = symbol_on_grid(odd_part, grid)
    out = a * dft_forward(f).coeffs + b * dft_forward(g).coeffs
    return dft_inverse(Spectrum(grid, out))
