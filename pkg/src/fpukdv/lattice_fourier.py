"""Fourier analysis on a periodic lattice hZ / nhZ.

The transform carries the lattice weight h, so that

    F f(xi_k) = h * sum_m f(hm) exp(-i h m xi_k),   xi_k = 2 pi k / L,

and Parseval reads ||f||^2 = h sum |f|^2 = (1/L) sum_k |F f(xi_k)|^2.

Spectra are stored in natural FFT order (k = 0, 1, ..., n/2-1, -n/2, ..., -1),
so the Nyquist frequency sits at xi = -pi/h.  A symbol m is evaluated there as
the average of m(-pi/h) and m(pi/h): the lattice mode (-1)^m is the common
restriction of exp(+-i pi x / h), so this is the exact action of the
multiplier on it, and it keeps real fields real for every symbol with
m(-xi) = conj(m(xi)).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Optional

import numpy as np

TWO_PI_LD = np.longdouble("6.283185307179586476925286766559005768")


@dataclass(frozen=True)
class LatticeGrid:
    """Periodic lattice with spacing ``h`` and ``n`` points (period ``L = n h``)."""

    h: float
    n: int

    def __post_init__(self):
        if not (self.h > 0 and np.isfinite(self.h)):
            raise ValueError(f"spacing must be positive, got {self.h}")
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"point count must be a power of two, got {self.n}")

    @classmethod
    def from_period(cls, h: float, L: float) -> "LatticeGrid":
        n = int(round(L / h))
        if abs(n * h - L) > 1e-12 * L:
            raise ValueError(f"period {L} is not a multiple of h={h}")
        return cls(h=h, n=n)

    @property
    def L(self) -> float:
        return self.n * self.h

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.h * np.arange(self.n)

    @cached_property
    def frequencies(self) -> np.ndarray:
        """Dual frequencies in natural FFT order; Nyquist is -pi/h."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.h)

    @cached_property
    def rfrequencies(self) -> np.ndarray:
        """Non-negative frequencies of the real transform (last entry pi/h)."""
        return 2.0 * np.pi * np.fft.rfftfreq(self.n, d=self.h)

    @property
    def nyquist_index(self) -> int:
        return self.n // 2

    def sorted_frequencies(self) -> np.ndarray:
        return np.fft.fftshift(self.frequencies)


@dataclass(frozen=True)
class LatticeField:
    """Real samples ``values[m] = f(h m)`` on a lattice grid."""

    grid: LatticeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} samples, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __add__(self, other: "LatticeField") -> "LatticeField":
        _same_grid(self.grid, other.grid)
        return LatticeField(self.grid, self.values + other.values)

    def __sub__(self, other: "LatticeField") -> "LatticeField":
        _same_grid(self.grid, other.grid)
        return LatticeField(self.grid, self.values - other.values)

    def __mul__(self, other):
        if isinstance(other, LatticeField):
            _same_grid(self.grid, other.grid)
            return LatticeField(self.grid, self.values * other.values)
        return LatticeField(self.grid, self.values * float(other))

    __rmul__ = __mul__

    def shifted(self, k: int) -> "LatticeField":
        """The field x -> f(x + k h)."""
        return LatticeField(self.grid, np.roll(self.values, -k))

    def norm(self) -> float:
        return float(np.sqrt(self.grid.h * np.sum(self.values ** 2)))

    def mean(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True)
class Spectrum:
    """Lattice Fourier coefficients in natural FFT order."""

    grid: LatticeGrid
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} coefficients, got shape {c.shape}")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    def sorted(self):
        """(xi, coeffs) with xi increasing from -pi/h."""
        return self.grid.sorted_frequencies(), np.fft.fftshift(self.coeffs)

    def hermitian_defect(self) -> float:
        c = self.coeffs
        mirror = np.conj(np.roll(c[::-1], 1))
        return float(np.max(np.abs(c - mirror), initial=0.0))


@dataclass(frozen=True)
class MultiplierSymbol:
    """A Fourier multiplier symbol ``xi -> m(xi)`` tied to a spacing ``h``.

    ``order`` is the vanishing order at xi = 0 (negative for singular symbols);
    ``real_preserving`` records whether m(-xi) = conj(m(xi)).
    """

    name: str
    evaluator: Callable[[np.ndarray], np.ndarray]
    order: float = 0.0
    real_preserving: bool = True
    h: Optional[float] = None

    def __call__(self, xi) -> np.ndarray:
        return np.asarray(self.evaluator(np.asarray(xi, dtype=float)), dtype=complex)

    def on_grid(self, grid: LatticeGrid) -> np.ndarray:
        return symbol_on_grid(self.evaluator, grid)

    def compose(self, other: "MultiplierSymbol") -> "MultiplierSymbol":
        f, g = self.evaluator, other.evaluator
        return MultiplierSymbol(
            name=f"{self.name}*{other.name}",
            evaluator=lambda xi: f(xi) * g(xi),
            order=self.order + other.order,
            real_preserving=self.real_preserving and other.real_preserving,
            h=self.h if self.h is not None else other.h,
        )


def _same_grid(a: LatticeGrid, b: LatticeGrid) -> None:
    if a != b:
        raise ValueError(f"grid mismatch: {a} vs {b}")


def symbol_on_grid(evaluator: Callable[[np.ndarray], np.ndarray], grid: LatticeGrid) -> np.ndarray:
    """Evaluate a symbol on the dual grid with the Nyquist averaging rule."""
    xi = grid.frequencies
    m = np.asarray(evaluator(xi), dtype=complex).copy()
    k = grid.nyquist_index
    edge = np.pi / grid.h
    both = np.asarray(evaluator(np.array([-edge, edge])), dtype=complex)
    m[k] = 0.5 * (both[0] + both[1])
    return m


def symbol_on_rgrid(evaluator: Callable[[np.ndarray], np.ndarray], grid: LatticeGrid) -> np.ndarray:
    """Same rule on the half spectrum used by the real transform."""
    xi = grid.rfrequencies
    m = np.asarray(evaluator(xi), dtype=complex).copy()
    edge = np.pi / grid.h
    both = np.asarray(evaluator(np.array([-edge, edge])), dtype=complex)
    m[-1] = 0.5 * (both[0] + both[1])
    return m


def dft_forward(f: LatticeField) -> Spectrum:
    """Lattice Fourier transform with the h weight."""
    return Spectrum(f.grid, f.grid.h * np.fft.fft(f.values))


def dft_inverse(s: Spectrum, check_real: bool = True) -> LatticeField:
    """Inverse transform; rejects spectra whose inverse is not real."""
    v = np.fft.ifft(s.coeffs) / s.grid.h
    if check_real:
        scale = max(np.max(np.abs(v)), 1e-300)
        if np.max(np.abs(v.imag)) > 1e-10 * scale:
            raise ValueError("inverse transform is not real; spectrum lacks Hermitian symmetry")
    return LatticeField(s.grid, v.real)


def apply_multiplier(s: Spectrum, m) -> Spectrum:
    """Multiply a spectrum by a symbol (a MultiplierSymbol or precomputed array)."""
    if isinstance(m, MultiplierSymbol):
        if m.h is not None and m.h != s.grid.h:
            raise ValueError(f"symbol built for h={m.h}, spectrum has h={s.grid.h}")
        values = m.on_grid(s.grid)
    else:
        values = np.asarray(m, dtype=complex)
        if values.shape != s.coeffs.shape:
            raise ValueError("symbol array does not match the spectrum grid")
    return Spectrum(s.grid, values * s.coeffs)


def apply_to_field(f: LatticeField, m) -> LatticeField:
    return dft_inverse(apply_multiplier(dft_forward(f), m))


def _sign(xi):
    return np.sign(xi)


def symbol_table(h: float) -> Dict[str, MultiplierSymbol]:
    """Symbols of the lattice differentials and related multipliers."""
    if not h > 0:
        raise ValueError("h must be positive")

    def nabla(xi):
        return (2j / h) * np.sin(h * xi / 2)

    def abs_nabla(xi):
        return np.abs((2.0 / h) * np.sin(h * xi / 2)) + 0j

    return {
        "nabla": MultiplierSymbol("nabla", nabla, 1, True, h),
        "d": MultiplierSymbol("d", lambda xi: 1j * xi, 1, True, h),
        "abs_d": MultiplierSymbol("abs_d", lambda xi: np.abs(xi) + 0j, 1, True, h),
        "bracket_d": MultiplierSymbol("bracket_d", lambda xi: np.sqrt(1 + xi ** 2) + 0j, 0, True, h),
        "d_plus": MultiplierSymbol("d_plus", lambda xi: (np.exp(1j * h * xi) - 1) / h, 1, True, h),
        "laplace": MultiplierSymbol(
            "laplace", lambda xi: -(4.0 / h ** 2) * np.sin(h * xi / 2) ** 2 + 0j, 2, True, h
        ),
        "half_cos": MultiplierSymbol("half_cos", lambda xi: np.cos(h * xi / 2) + 0j, 0, True, h),
        "hilbert": MultiplierSymbol("hilbert", lambda xi: -1j * _sign(xi), 0, True, h),
        "abs_nabla": MultiplierSymbol("abs_nabla", abs_nabla, 1, True, h),
        "bracket_nabla": MultiplierSymbol(
            "bracket_nabla", lambda xi: np.sqrt(1 + np.abs(nabla(xi)) ** 2) + 0j, 0, True, h
        ),
        "shift": MultiplierSymbol("shift", lambda xi: np.exp(1j * h * xi), 0, True, h),
        "half_shift_back": MultiplierSymbol(
            "half_shift_back", lambda xi: np.exp(-0.5j * h * xi), 0, True, h
        ),
    }


def inverse_nabla_symbol(grid: LatticeGrid) -> np.ndarray:
    """Symbol of nabla_h^{-1} on the grid, zero on the zero mode and at Nyquist."""
    xi = grid.frequencies
    w = (2.0 / grid.h) * np.sin(grid.h * xi / 2)
    out = np.zeros(grid.n, dtype=complex)
    nz = w != 0
    out[nz] = 1.0 / (1j * w[nz])
    out[grid.nyquist_index] = 0.0  # average of +-h/(2i)
    return out


def require_zero_mean(f: LatticeField, what: str = "field") -> None:
    scale = max(f.norm(), 1e-300)
    mass = abs(f.grid.h * np.sum(f.values))
    if mass > 1e-12 * scale * np.sqrt(f.grid.L):
        raise ValueError(
            f"{what} has nonzero mean; subtract its mean (project out the zero mode) first"
        )


def sobolev_norm(f: LatticeField, s: float, homogeneous: bool = False) -> float:
    """H^s (or homogeneous H^s) norm evaluated on the Fourier side."""
    c = dft_forward(f).coeffs
    xi = f.grid.frequencies
    if homogeneous:
        if s < 0:
            require_zero_mean(f)
        w = np.zeros_like(xi)
        nz = xi != 0
        w[nz] = np.abs(xi[nz]) ** (2 * s)
        if s == 0:
            w[~nz] = 1.0
    else:
        w = (1.0 + xi ** 2) ** s
    return float(np.sqrt(np.sum(w * np.abs(c) ** 2) / f.grid.L))


def spectral_sobolev_norm(coeffs: np.ndarray, grid: LatticeGrid, s: float) -> float:
    """H^s norm straight from natural-order coefficients (no field construction)."""
    w = (1.0 + grid.frequencies ** 2) ** s
    return float(np.sqrt(np.sum(w * np.abs(coeffs) ** 2) / grid.L))


def _smooth_step(y: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for y <= 0, 1 for y >= 1."""
    y = np.clip(y, 0.0, 1.0)
    a = np.where(y > 0, np.exp(-1.0 / np.where(y > 0, y, 1.0)), 0.0)
    b = np.where(y < 1, np.exp(-1.0 / np.where(y < 1, 1.0 - y, 1.0)), 0.0)
    return a / (a + b)


def bump(x) -> np.ndarray:
    """Smooth even bump: 1 on |x| <= 1, 0 on |x| >= 2."""
    a = np.abs(np.asarray(x, dtype=float))
    return _smooth_step(2.0 - a)


def lp_symbol(grid: LatticeGrid, N: float) -> np.ndarray:
    """psi_N(xi) = phi(h xi / (pi N)) - phi(2 h xi / (pi N))."""
    _check_dyadic(N)
    xi = grid.frequencies
    z = grid.h * xi / (np.pi * N)
    return bump(z) - bump(2 * z)


def lp_low_symbol(grid: LatticeGrid, N0: float) -> np.ndarray:
    """Symbol of P_{<= N0}, the piece left below the dyadic range (N0, 1]."""
    _check_dyadic(N0)
    xi = grid.frequencies
    return bump(2 * grid.h * xi / (np.pi * N0))


def _check_dyadic(N: float) -> None:
    if not (0 < N <= 1) or abs(np.log2(N) - round(np.log2(N))) > 1e-12:
        raise ValueError(f"N must be a dyadic number in (0, 1], got {N}")


def lp_project(f: LatticeField, N: float) -> LatticeField:
    """Littlewood-Paley projection P_N."""
    return apply_to_field(f, lp_symbol(f.grid, N))


def lp_low(f: LatticeField, N0: float) -> LatticeField:
    return apply_to_field(f, lp_low_symbol(f.grid, N0))


def dyadic_range(grid: LatticeGrid, N0: Optional[float] = None):
    """Dyadic N from 1 down to N0 (default: the first N whose band misses the grid)."""
    if N0 is None:
        dxi = 2 * np.pi / grid.L
        # psi_N lives on |xi| >= pi N / (2h); stop once that exceeds nothing below dxi
        j = int(np.ceil(np.log2(np.pi / (2 * grid.h * dxi)))) + 1
        N0 = 2.0 ** (-max(j, 0))
    Ns = []
    N = 1.0
    while N >= N0:
        Ns.append(N)
        N /= 2
    return Ns


def random_field(grid: LatticeGrid, rng: np.random.Generator, band: Optional[int] = None,
                 zero_mean: bool = False) -> LatticeField:
    """Gaussian random field; ``band`` keeps only modes |k| < band (drops Nyquist)."""
    v = rng.standard_normal(grid.n)
    if band is None and not zero_mean:
        return LatticeField(grid, v)
    c = np.fft.fft(v)
    k = np.fft.fftfreq(grid.n, d=1.0 / grid.n)
    if band is not None:
        c[np.abs(k) >= band] = 0.0
    if zero_mean:
        c[0] = 0.0
    return LatticeField(grid, np.fft.ifft(c).real)
