"""Interaction-picture integrators for the coupled FPU, decoupled FPU and KdV systems.

All three systems are written as  dU/dt = L U + N(t, U)  with a diagonal
linear part L that is applied exactly, and are advanced by the Lawson
(integrating-factor) form of classical RK4.  Quadratic products are formed
pseudo-spectrally and dealiased by the 2/3 rule; the Nyquist mode never
receives forcing.

Coupled FPU, in the frame of the split variables u^+, u^-:

    u^+_t = +i s_h u^+ - (1/4) nabla_h [ (u^+ + T u^-)^2 + h^2 T_1 R ]
    u^-_t = -i s_h u^- + (1/4) nabla_h [ (u^- + T* u^+)^2 + h^2 T_1* R ]

with T = exp((2t/h^2) d_h), T_1 = exp((t/h^2) d_h) and R the remainder of the
potential evaluated on the reconstructed r.  The factors T carry phases
2 t xi / h^2 that turn over many times per step on fine lattices.  They are
multiplied by the filter

    psi(theta) = sinc(theta/2) * 3 / (2 + cos(theta/2)),   theta = 2 xi dt / h^2,

which is the ratio between the exact integral of exp(i Omega tau) over a step
and its Simpson-rule value implied by RK4.  With it, the cross terms are
integrated exactly in their fast phase and the scheme stays accurate for
dt well above h^2 / xi_max; psi = 1 - theta^4/2880 + ..., so fourth order in
dt is unaffected.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .fpu_system import Potential, remainder_values
from .lattice_fourier import (
    LatticeField,
    LatticeGrid,
    inverse_nabla_symbol,
    require_zero_mean,
)
from .propagators import grid_phase, phase_factor

SYSTEMS = ("coupled", "decoupled", "kdv")
SNAPSHOT_MAGIC = b"FPUKDV01"


class SolverDivergence(RuntimeError):
    """Raised when a step produces non-finite values."""


@dataclass(frozen=True)
class SplitState:
    u_plus: LatticeField
    u_minus: LatticeField
    time: float = 0.0

    def __post_init__(self):
        if self.u_plus.grid != self.u_minus.grid:
            raise ValueError("u_plus and u_minus live on different grids")

    @property
    def grid(self) -> LatticeGrid:
        return self.u_plus.grid

    def norm(self) -> float:
        return math.hypot(self.u_plus.norm(), self.u_minus.norm())


@dataclass
class Trajectory:
    """Samples of a run; ``states`` hold SplitState (FPU) or LatticeField (KdV)."""

    times: np.ndarray
    states: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.states):
            raise ValueError("one state per sample time")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")

    def at(self, t: float):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-12 * max(1.0, abs(t)):
            raise KeyError(f"no sample at t={t}")
        return self.states[i]


def split_initial_data(r0: LatticeField, r1: LatticeField) -> SplitState:
    """u^{+-}_0 = (r0 -+ h^2 nabla_h^{-1} r1) / 2."""
    require_zero_mean(r1, "r1")
    g = r0.grid
    if r1.grid != g:
        raise ValueError("r0 and r1 live on different grids")
    q = np.fft.ifft(inverse_nabla_symbol(g) * np.fft.fft(r1.values)).real * g.h ** 2
    return SplitState(LatticeField(g, 0.5 * (r0.values - q)),
                      LatticeField(g, 0.5 * (r0.values + q)), 0.0)


def _translation(grid: LatticeGrid, t: float) -> np.ndarray:
    """exp((t/h^2) d_h) on the half spectrum, Nyquist by the averaging rule."""
    e = phase_factor(t, grid_phase(grid, "transport", real=True))
    e[-1] = e[-1].real
    return e


def reconstruct_r(s: SplitState, t: Optional[float] = None) -> LatticeField:
    """r = exp(-(t/h^2) d_h) u^+ + exp((t/h^2) d_h) u^-."""
    t = s.time if t is None else t
    e = _translation(s.grid, t)
    c = np.conj(e) * np.fft.rfft(s.u_plus.values) + e * np.fft.rfft(s.u_minus.values)
    return LatticeField(s.grid, np.fft.irfft(c, n=s.grid.n))


def reconstruct_rt(s: SplitState, t: Optional[float] = None) -> LatticeField:
    """d_t r = -(1/h^2) nabla_h (exp(-(t/h^2)d_h) u^+ - exp((t/h^2)d_h) u^-)."""
    t = s.time if t is None else t
    g = s.grid
    e = _translation(g, t)
    xi = g.rfrequencies
    nab = (2j / g.h) * np.sin(g.h * xi / 2)
    nab[-1] = 0.0
    c = np.conj(e) * np.fft.rfft(s.u_plus.values) - e * np.fft.rfft(s.u_minus.values)
    return LatticeField(g, np.fft.irfft(-nab * c / g.h ** 2, n=g.n))


def filon_factor(theta) -> np.ndarray:
    """psi(theta) = sinc(theta/2) 3/(2 + cos(theta/2))."""
    x = 0.5 * np.asarray(theta, dtype=float)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    sx = np.where(small, 1.0 - x * x / 6, np.sin(safe) / safe)
    return sx * 3.0 / (2.0 + np.cos(x))


def dealias_mask(n: int) -> np.ndarray:
    """Half-spectrum mask keeping k < n/3 (drops Nyquist)."""
    k = np.arange(n // 2 + 1)
    return 3 * k < n


def band_limit(f: LatticeField) -> LatticeField:
    """Project onto the modes kept by dealias_mask, where the dealiased schemes are exact Galerkin truncations."""
    c = np.fft.rfft(f.values)
    c[~dealias_mask(f.grid.n)] = 0.0
    return LatticeField(f.grid, np.fft.irfft(c, n=f.grid.n))


class _LawsonRK4:
    """Shared Lawson-RK4 machinery on half-spectrum coefficient arrays."""

    def __init__(self, grid: LatticeGrid, rates: List[np.ndarray], nonlinear: bool):
        self.grid = grid
        self.rates = rates  # extended-precision phase rates, one per component
        self.nonlinear = nonlinear
        self._cache = {}

    def _propagators(self, dt: float):
        if dt not in self._cache:
            out = []
            for rate in self.rates:
                e1 = phase_factor(dt, rate)
                e2 = phase_factor(dt / 2, rate)
                e1[-1], e2[-1] = e1[-1].real, e2[-1].real
                out.append((e1, e2))
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[dt] = out
        return self._cache[dt]

    def forcing(self, t: float, U: List[np.ndarray], dt: float) -> List[np.ndarray]:
        raise NotImplementedError

    def step(self, t: float, U: List[np.ndarray], dt: float) -> List[np.ndarray]:
        props = self._propagators(dt)
        E = [p[0] for p in props]
        E2 = [p[1] for p in props]
        if not self.nonlinear:
            return [e * u for e, u in zip(E, U)]
        k1 = self.forcing(t, U, dt)
        U2 = [e2 * (u + 0.5 * dt * k) for e2, u, k in zip(E2, U, k1)]
        k2 = self.forcing(t + dt / 2, U2, dt)
        U3 = [e2 * u + 0.5 * dt * k for e2, u, k in zip(E2, U, k2)]
        k3 = self.forcing(t + dt / 2, U3, dt)
        U4 = [e * u + dt * e2 * k for e, e2, u, k in zip(E, E2, U, k3)]
        k4 = self.forcing(t + dt, U4, dt)
        out = [e * u + (dt / 6) * (e * a + 2 * e2 * (b + c) + d)
               for e, e2, u, a, b, c, d in zip(E, E2, U, k1, k2, k3, k4)]
        for c in out:
            if not np.all(np.isfinite(c)):
                raise SolverDivergence(f"non-finite coefficients at t={t + dt:.6g} (dt={dt:.3g})")
        return out


class FpuStepper(_LawsonRK4):
    """Coupled (``cross=True``) or decoupled FPU stepper on half spectra."""

    def __init__(self, grid: LatticeGrid, potential: Optional[Potential] = None,
                 cross: bool = True, nonlinear: bool = True, dealias: bool = True):
        rate = grid_phase(grid, "fpu", real=True)
        super().__init__(grid, [rate, -rate], nonlinear)
        self.cross = cross
        self.potential = potential
        h = grid.h
        xi = grid.rfrequencies
        mask = dealias_mask(grid.n) if dealias else np.arange(xi.size) < xi.size - 1
        self.nab = (2j / h) * np.sin(h * xi / 2) * mask
        self.transport = grid_phase(grid, "transport", real=True)
        self.use_remainder = cross and potential is not None and not (
            potential.kind == "cubic" and potential.params == (1.0, 1.0))
        if potential is not None and (abs(potential.a - 1) > 1e-12 or abs(potential.b - 1) > 1e-12):
            raise ValueError("the split system needs a normalized potential (a = b = 1)")
        self._psi = {}

    def _filter(self, dt: float) -> np.ndarray:
        key = abs(dt)
        if key not in self._psi:
            g = self.grid
            self._psi = {key: filon_factor(2 * g.rfrequencies * key / g.h ** 2)}
        return self._psi[key]

    def forcing(self, t, U, dt):
        n = self.grid.n
        up, um = U
        a = np.fft.irfft(up, n=n)
        b = np.fft.irfft(um, n=n)
        A = np.fft.rfft(a * a)
        B = np.fft.rfft(b * b)
        if not self.cross:
            return [-0.25 * self.nab * A, 0.25 * self.nab * B]
        ph = phase_factor(2 * t, self.transport)
        ph[-1] = ph[-1].real
        ph = ph * self._filter(dt)
        bt = np.fft.irfft(ph * um, n=n)
        at = np.fft.irfft(np.conj(ph) * up, n=n)
        fp = A + 2 * np.fft.rfft(a * bt) + ph * B
        fm = B + 2 * np.fft.rfft(b * at) + np.conj(ph) * A
        if self.use_remainder:
            h = self.grid.h
            e1 = phase_factor(t, self.transport)
            e1[-1] = e1[-1].real
            r = np.fft.irfft(np.conj(e1) * up + e1 * um, n=n)
            Rc = h ** 2 * np.fft.rfft(remainder_values(r, self.potential, h))
            fp = fp + e1 * Rc
            fm = fm + np.conj(e1) * Rc
        return [-0.25 * self.nab * fp, 0.25 * self.nab * fm]


class KdvStepper(_LawsonRK4):
    """w_t = -+(1/24) w_xxx -+ (1/4)(w^2)_x on the periodic box of ``grid``."""

    def __init__(self, grid: LatticeGrid, sign: int, nonlinear: bool = True, dealias: bool = True):
        if sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        rate = grid_phase(grid, "airy", real=True)
        super().__init__(grid, [sign * rate], nonlinear)
        self.sign = sign
        xi = grid.rfrequencies
        mask = dealias_mask(grid.n) if dealias else np.arange(xi.size) < xi.size - 1
        self.dx = 1j * xi * mask

    def forcing(self, t, U, dt):
        w = np.fft.irfft(U[0], n=self.grid.n)
        return [-self.sign * 0.25 * self.dx * np.fft.rfft(w * w)]


def _to_spec(fields: Sequence[LatticeField]) -> List[np.ndarray]:
    return [np.fft.rfft(f.values) for f in fields]


def _to_fields(grid: LatticeGrid, U: Sequence[np.ndarray]) -> List[LatticeField]:
    return [LatticeField(grid, np.fft.irfft(u, n=grid.n)) for u in U]


def step_coupled(s: SplitState, p: Optional[Potential], dt: float, nonlinear: bool = True) -> SplitState:
    """One Lawson-RK4 step of the coupled FPU system (normalized potential)."""
    st = FpuStepper(s.grid, p, cross=True, nonlinear=nonlinear)
    up, um = _to_fields(s.grid, st.step(s.time, _to_spec([s.u_plus, s.u_minus]), dt))
    return SplitState(up, um, s.time + dt)


def step_decoupled(s: SplitState, dt: float, nonlinear: bool = True) -> SplitState:
    """One Lawson-RK4 step of the decoupled FPU system."""
    st = FpuStepper(s.grid, None, cross=False, nonlinear=nonlinear)
    up, um = _to_fields(s.grid, st.step(s.time, _to_spec([s.u_plus, s.u_minus]), dt))
    return SplitState(up, um, s.time + dt)


def step_kdv(w: LatticeField, dt: float, sign: int, nonlinear: bool = True) -> LatticeField:
    """One Lawson-RK4 step of KdV with the given propagation sign."""
    st = KdvStepper(w.grid, sign, nonlinear=nonlinear)
    return _to_fields(w.grid, st.step(0.0, _to_spec([w]), dt))[0]


def default_dt(h: float, L: float) -> float:
    """Step for the split FPU systems.

    Capped by min(0.1, h)/2 and by an eighth-turn rotation of the lowest
    translated mode per step, dt <= (pi/8) / (2 * (2 pi / L) / h^2).
    """
    return min(min(0.1, h) / 2, h * h * L / 32)


def make_stepper(system: str, grid: LatticeGrid, potential: Optional[Potential] = None,
                 sign: int = 1, nonlinear: bool = True, dealias: bool = True):
    if system == "coupled":
        return FpuStepper(grid, potential, cross=True, nonlinear=nonlinear, dealias=dealias)
    if system == "decoupled":
        return FpuStepper(grid, None, cross=False, nonlinear=nonlinear, dealias=dealias)
    if system == "kdv":
        return KdvStepper(grid, sign, nonlinear=nonlinear, dealias=dealias)
    raise ValueError(f"unknown system {system!r}; expected one of {SYSTEMS}")


def _run_leg(stepper, U, t0: float, dt: float, n_steps: int, sample_every: int,
             observer: Optional[Callable] = None):
    """Advance n_steps of size dt; returns samples (t, U) taken every sample_every steps."""
    out = []
    t = t0
    for i in range(1, n_steps + 1):
        U = stepper.step(t, U, dt)
        t = t0 + i * dt
        if observer is not None:
            observer(t, U)
        if i % sample_every == 0 or i == n_steps:
            out.append((t, [u.copy() for u in U]))
    return out


def evolve(system: str, init, T: float, dt: float, sample_every: int = 1, *,
           potential: Optional[Potential] = None, sign: int = 1, nonlinear: bool = True,
           n_samples: Optional[int] = None, observer: Optional[Callable] = None,
           two_sided: bool = True, dealias: bool = True) -> Trajectory:
    """Run ``system`` from ``init`` over [-T, T] (or [0, T] if not two-sided).

    ``init`` is a SplitState for the FPU systems and a LatticeField for KdV.
    With ``n_samples`` the step is shrunk so that T/n_samples is a whole
    number of steps and samples land exactly on k T / n_samples.
    ``observer(t, coeffs)`` sees every step (half-spectrum arrays).
    ``dealias=False`` keeps every product mode except Nyquist, which
    reproduces the lattice equations themselves rather than their 2/3 truncation.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    grid = init.grid
    stepper = make_stepper(system, grid, potential, sign, nonlinear, dealias)
    if n_samples is not None:
        per = max(1, int(math.ceil(T / n_samples / dt - 1e-9)))
        n_steps = per * n_samples
        sample_every = per
    else:
        n_steps = max(1, int(math.ceil(T / dt - 1e-9)))
    step = T / n_steps
    fields0 = [init.u_plus, init.u_minus] if system != "kdv" else [init]
    U0 = _to_spec(fields0)
    if observer is not None:
        observer(0.0, U0)
    fwd = _run_leg(stepper, U0, 0.0, step, n_steps, sample_every, observer)
    samples = [(0.0, [u.copy() for u in U0])] + fwd
    if two_sided:
        bwd = _run_leg(stepper, U0, 0.0, -step, n_steps, sample_every, observer)
        samples = bwd[::-1] + samples
    times, states = [], []
    for t, U in samples:
        flds = _to_fields(grid, U)
        times.append(t)
        states.append(SplitState(flds[0], flds[1], t) if system != "kdv" else flds[0])
    meta = {
        "system": system, "dt": step, "n_steps": n_steps, "scheme": "lawson-rk4",
        "order": 4, "dealiased": dealias, "filtered_cross_terms": system == "coupled",
        "h": grid.h, "n": grid.n, "T": T, "two_sided": two_sided,
        "potential": potential.to_spec() if potential is not None else None,
        "sign": sign if system == "kdv" else None, "nonlinear": nonlinear,
    }
    return Trajectory(np.array(times), states, meta)


def save_trajectory(path, traj: Trajectory, extra: Optional[dict] = None) -> None:
    """Write the hybrid snapshot: magic, uint64 header length, JSON header, float64 LE payload.

    The payload holds, for each sample in order, the component arrays
    (u_plus then u_minus for FPU, w for KdV) as little-endian doubles.
    """
    header = dict(traj.metadata)
    header.update(extra or {})
    header["times"] = [float(t) for t in traj.times]
    first = traj.states[0]
    header["components"] = 2 if isinstance(first, SplitState) else 1
    header["grid"] = {"h": first.grid.h, "n": first.grid.n}
    blob = json.dumps(header, sort_keys=True).encode()
    chunks = []
    for st in traj.states:
        comps = [st.u_plus, st.u_minus] if isinstance(st, SplitState) else [st]
        chunks.extend(np.asarray(c.values, dtype="<f8").tobytes() for c in comps)
    with open(Path(path), "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_trajectory(path) -> Trajectory:
    data = Path(path).read_bytes()
    if data[:8] != SNAPSHOT_MAGIC:
        raise ValueError("not a trajectory snapshot")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode())
    grid = LatticeGrid(header["grid"]["h"], header["grid"]["n"])
    payload = np.frombuffer(data[16 + hlen:], dtype="<f8")
    ncomp, n = header["components"], grid.n
    times = header.pop("times")
    expected = len(times) * ncomp * n
    if payload.size != expected:
        raise ValueError(f"payload has {payload.size} doubles, expected {expected}")
    payload = payload.reshape(len(times), ncomp, n)
    states = []
    for t, block in zip(times, payload):
        if ncomp == 2:
            states.append(SplitState(LatticeField(grid, block[0]), LatticeField(grid, block[1]), t))
        else:
            states.append(LatticeField(grid, block[0]))
    return Trajectory(np.array(times), states, header)
