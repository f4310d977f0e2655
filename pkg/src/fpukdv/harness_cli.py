"""Experiment orchestration: synthetic data, h-sweeps, rate fits, reports and the CLI."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import click
import numpy as np

from . import __version__
from .fpu_system import FpuState, Potential, hamiltonian, integrate_direct, normalize, stable_dt, to_unscaled
from .interpolation_bridge import (
    airy_of_interpolant,
    continuum_error,
    interpolate,
    mixed_norm_S,
    seam_mass,
)
from .lattice_fourier import LatticeField, LatticeGrid, inverse_nabla_symbol, sobolev_norm
from .propagators import apply_fpu_flow
from .spectral_solvers import (
    FpuStepper,
    SplitState,
    band_limit,
    default_dt,
    evolve,
    reconstruct_r,
    reconstruct_rt,
    save_trajectory,
    split_initial_data,
)

log = logging.getLogger("fpukdv")

SCHEMA_VERSION = 1
KINDS = ("continuum_limit", "small_amplitude", "decoupling", "linear_comparison",
         "kernels", "bilinear", "xsb_failure", "conservation", "remainder")
DEFAULT_H = tuple(2.0 ** -k for k in range(3, 8))
DATA_EPS = 0.01
FLOOR_FACTOR = 10.0  # fits drop points with error below this multiple of the budget
WRAP_TOL = 1e-3
KDV_DRIFT_TOL = 1e-5  # relative momentum drift that flags an unstable KdV step

EXIT_OK, EXIT_FAIL, EXIT_PARTIAL = 0, 1, 2


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; T="auto" is resolved per run by auto_horizon."""

    kind: str = "continuum_limit"
    h_list: Tuple[float, ...] = DEFAULT_H
    s: float = 1.0
    R: float = 1.0
    T: Union[float, str] = 1.0
    potential: str = "cubic:1,1"
    seed: int = 0
    L: float = 64.0
    dt_factor: float = 1.0
    kdv_dt_factor: float = 0.5
    rho: int = 8
    n_samples: int = 16
    data: str = "random"  # or "soliton"
    soliton_speed: float = 0.5
    cross_check_h: Tuple[float, ...] = (0.5,)
    threads: int = 1
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        hs = tuple(float(h) for h in self.h_list)
        object.__setattr__(self, "h_list", hs)
        object.__setattr__(self, "cross_check_h", tuple(float(h) for h in self.cross_check_h))
        for h in hs:
            k = -math.log2(h)
            if abs(k - round(k)) > 1e-12:
                raise ValueError(f"h = {h} is not dyadic")
        if any(a <= b for a, b in zip(hs, hs[1:])):
            raise ValueError("h list must be strictly decreasing")
        if not (0 < self.s <= 1):
            raise ValueError("s must lie in (0, 1]")
        if self.kind == "continuum_limit" and not self.s > 0.75:
            raise ValueError("the continuum limit needs s in (3/4, 1]")
        if not self.R >= 0:
            raise ValueError("R must be non-negative")
        if isinstance(self.T, str):
            if self.T != "auto":
                raise ValueError("T must be a positive number or 'auto'")
        elif not self.T > 0:
            raise ValueError("T must be positive")
        if self.data not in ("random", "soliton"):
            raise ValueError("data must be 'random' or 'soliton'")
        Potential.from_spec(self.potential)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        d = dict(d)
        for k in ("h_list", "cross_check_h"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["h_list"] = list(self.h_list)
        d["cross_check_h"] = list(self.cross_check_h)
        return d

    def potential_obj(self) -> Potential:
        return Potential.from_spec(self.potential)


# ---------------------------------------------------------------- data


def generate_hs_data(grid: LatticeGrid, s: float, R: float, seed: int) -> Tuple[LatticeField, LatticeField]:
    """Random (r0, r1) with |F r0| ~ <xi>^{-s-1/2-eps} and ||(r0, h^2 nabla_h^{-1} r1)||_{H^s} = R.

    Phases come from two spawned streams drawn in frequency order, so a
    finer grid with the same period reuses the phases of the coarser one.
    r1 = nabla_h q / h^2 for a field q of the same class, hence zero mean.
    """
    if not (0 < s <= 1):
        raise ValueError("s must lie in (0, 1]")
    n, h, L = grid.n, grid.h, grid.L
    xi = grid.rfrequencies
    prof = (1 + xi ** 2) ** (-(s + 0.5 + DATA_EPS) / 2)
    streams = [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(2)]
    coeffs = []
    for rng in streams:
        F = prof * np.exp(2j * np.pi * rng.random(xi.size))
        F[0] = 0.0
        F[-1] = 0.0
        coeffs.append(F)
    w = (1 + xi ** 2) ** s

    def norm2(F):
        t = np.abs(F) ** 2 * w
        return (t[0] + 2 * t[1:-1].sum() + t[-1]) / L

    total = norm2(coeffs[0]) + norm2(coeffs[1])
    A = R / math.sqrt(total) if total > 0 else 0.0
    r0 = np.fft.irfft(A * coeffs[0] / h, n)
    q = np.fft.irfft(A * coeffs[1] / h, n)
    nab = (2j / h) * np.sin(h * xi / 2)
    r1 = np.fft.irfft(nab * np.fft.rfft(q), n) / h ** 2
    return LatticeField(grid, r0), LatticeField(grid, r1)


def data_norm(r0: LatticeField, r1: LatticeField, s: float) -> float:
    """||(r0, h^2 nabla_h^{-1} r1)||_{H^s x H^s}."""
    g = r0.grid
    q = np.fft.ifft(inverse_nabla_symbol(g) * np.fft.fft(r1.values)).real * g.h ** 2
    return math.hypot(sobolev_norm(r0, s), sobolev_norm(LatticeField(g, q), s))


def kdv_soliton(x: np.ndarray, c: float, L: float, x0: float = 0.0) -> np.ndarray:
    """Periodized 6c sech^2(sqrt(6c)(x - x0)), a travelling wave of w_t = -(1/24)w_xxx - (1/4)(w^2)_x."""
    k = math.sqrt(6 * c)
    out = np.zeros_like(x, dtype=float)
    for j in range(-2, 3):
        out += 6 * c / np.cosh(k * (x - x0 - L / 2 + j * L)) ** 2
    return out


def soliton_data(grid: LatticeGrid, c: float) -> Tuple[LatticeField, LatticeField]:
    """Right-moving data: r0 a mean-free soliton, r1 = -nabla_h r0 / h^2, so u^- = 0."""
    v = kdv_soliton(grid.nodes, c, grid.L)
    v = v - v.mean()
    h = grid.h
    xi = grid.rfrequencies
    nab = (2j / h) * np.sin(h * xi / 2)
    nab[-1] = 0.0
    r1 = -np.fft.irfft(nab * np.fft.rfft(v), grid.n) / h ** 2
    return LatticeField(grid, v), LatticeField(grid, r1)


def initial_data(cfg: ExperimentConfig, grid: LatticeGrid):
    if cfg.data == "soliton":
        return soliton_data(grid, cfg.soliton_speed)
    return generate_hs_data(grid, cfg.s, cfg.R, cfg.seed)


# ---------------------------------------------------------------- fits


def fit_rate(points: Sequence[Tuple[float, float]], excluded: Optional[list] = None):
    """Least squares on (log h, log error); returns (slope, intercept, residual).

    Points with error <= 0 are dropped and appended to ``excluded``.
    The residual is the RMS deviation of the log errors from the line.
    """
    good = []
    for h, e in points:
        if e > 0 and np.isfinite(e):
            good.append((h, e))
        elif excluded is not None:
            excluded.append({"h": h, "error": e, "reason": "non-positive error"})
    if len(good) < 4:
        raise ValueError(f"a rate fit needs at least 4 points with positive error, got {len(good)}")
    x = np.log([p[0] for p in good])
    y = np.log([p[1] for p in good])
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = float(np.sqrt(np.mean((y - (slope * x + icpt)) ** 2)))
    return float(slope), float(icpt), res


# ---------------------------------------------------------------- reports


@dataclass
class ConvergenceReport:
    kind: str
    config: dict
    records: List[dict] = field(default_factory=list)
    slope: Optional[float] = None
    intercept: Optional[float] = None
    residual: Optional[float] = None
    threshold: Optional[float] = None
    status: str = "pending"  # passed | failed | partial | degenerate
    notes: List[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    series: List[tuple] = field(default_factory=list)
    runtimes: Dict[str, float] = field(default_factory=dict)
    version: str = __version__

    def to_json(self) -> dict:
        """Deterministic part of the report (run timings live in run_info)."""
        return {
            "schema_version": SCHEMA_VERSION,
            "artifact_version": self.version,
            "kind": self.kind,
            "config": self.config,
            "records": self.records,
            "fit": {"slope": self.slope, "intercept": self.intercept, "residual": self.residual,
                    "threshold": self.threshold},
            "status": self.status,
            "notes": self.notes,
            "extra": self.extra,
        }

    @property
    def passed(self) -> bool:
        return self.status == "passed"

    def exit_code(self) -> int:
        return {"passed": EXIT_OK, "degenerate": EXIT_OK, "partial": EXIT_PARTIAL}.get(self.status, EXIT_FAIL)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_report(report: ConvergenceReport, out_dir) -> Path:
    """report.json (timestamp and timings isolated under run_info) and series.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = _jsonable(report.to_json())
    body["run_info"] = {"timestamp": datetime.now(timezone.utc).isoformat(),
                        "runtimes_s": _jsonable(report.runtimes)}
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    with open(out / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "h", "t", "quantity", "value"])
        for row in report.series:
            w.writerow([report.kind, *row])
    return out / "report.json"


def _finish_fit(report: ConvergenceReport, threshold: float, max_residual: Optional[float] = None,
                key: str = "error") -> ConvergenceReport:
    """Fit the usable records and set status; aborted or floored points are excluded."""
    usable = [r for r in report.records if r.get("status") == "ok" and not r.get("below_floor")]
    report.threshold = threshold
    if report.records and all(r.get(key, 0.0) == 0.0 for r in report.records if r.get("status") == "ok"):
        report.status = "degenerate"
        report.notes.append("all errors vanish; slope undefined")
        return report
    excluded: list = []
    try:
        slope, icpt, res = fit_rate([(r["h"], r[key]) for r in usable], excluded)
    except ValueError as e:
        report.status = "partial" if usable else "failed"
        report.notes.append(str(e))
        return report
    report.notes.extend(f"excluded h={x['h']}: {x['reason']}" for x in excluded)
    report.slope, report.intercept, report.residual = slope, icpt, res
    ok = slope >= threshold and (max_residual is None or res < max_residual)
    aborted = any(r.get("status") != "ok" for r in report.records)
    report.status = "passed" if ok and not aborted else ("partial" if ok else "failed")
    return report


def _map_h(fn: Callable, cfg: ExperimentConfig, hs: Sequence[float]) -> List[dict]:
    if cfg.threads > 1 and len(hs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as ex:
            return list(ex.map(fn, [cfg] * len(hs), hs))
    return [fn(cfg, h) for h in hs]


# ---------------------------------------------------------------- continuum limit


def hs_pair_norm(s_state: SplitState, s: float) -> float:
    """||(r, h^2 nabla_h^{-1} r_t)||_{H^s x H^s} of a split state."""
    r = reconstruct_r(s_state)
    rt = reconstruct_rt(s_state)
    return data_norm(r, rt, s)


def auto_horizon(cfg: ExperimentConfig, t_max: float = 1.0, min_T: float = 2.0 ** -6) -> float:
    """Halve T from t_max until the coupled run at the largest h keeps its norm <= 2R."""
    h = cfg.h_list[0]
    g = LatticeGrid.from_period(h, cfg.L)
    r0, r1 = initial_data(cfg, g)
    R = data_norm(r0, r1, cfg.s)
    T = t_max
    p = normalize(cfg.potential_obj())[0]
    while T >= min_T:
        tr = evolve("coupled", split_initial_data(r0, r1), T, default_dt(h, cfg.L) * cfg.dt_factor,
                    potential=p, n_samples=cfg.n_samples)
        if max(hs_pair_norm(st, cfg.s) for st in tr.states) <= 2 * R:
            return T
        T /= 2
    raise RuntimeError("no horizon keeps the H^s norm below 2R")


def wrap_fraction(w: LatticeField) -> float:
    """Mass fraction of w - median(w) within L/8 of the seam.

    Localized data start at L/2 on a flat background (the median); mass
    reaching the seam means the wave interacts with its periodic image.
    """
    return seam_mass(LatticeField(w.grid, w.values - np.median(w.values)), w.grid.L / 8)


def kdv_dt(cfg: ExperimentConfig, h: float, w0: LatticeField) -> float:
    """kdv_dt_factor * (h / rho), shrunk for amplitudes above 1 (advective limit)."""
    return cfg.kdv_dt_factor * (h / cfg.rho) / max(1.0, float(np.max(np.abs(w0.values))))


def _continuum_pipeline(cfg: ExperimentConfig, h: float, T: float, dt_scale: float):
    g = LatticeGrid.from_period(h, cfg.L)
    r0, r1 = initial_data(cfg, g)
    s0 = split_initial_data(r0, r1)
    p = normalize(cfg.potential_obj())[0]
    fpu = evolve("coupled", s0, T, default_dt(h, cfg.L) * cfg.dt_factor * dt_scale,
                 potential=p, n_samples=cfg.n_samples)
    kdv = []
    for sgn, u in ((1, s0.u_plus), (-1, s0.u_minus)):
        w0 = interpolate(u, cfg.rho).field
        kdv.append(evolve("kdv", w0, T, kdv_dt(cfg, h, w0) * dt_scale, sign=sgn, n_samples=cfg.n_samples))
    rs = [reconstruct_r(st) for st in fpu.states]
    ce = continuum_error(rs, kdv[0].states, kdv[1].states, fpu.times, cfg.rho)
    return fpu, kdv, ce, r0, r1


def kdv_momentum_drift(kdv) -> float:
    """Largest relative change of the L2 norm squared over the KdV legs (exactly conserved by the scheme)."""
    out = 0.0
    for tr in kdv:
        P = np.array([w.norm() ** 2 for w in tr.states])
        if P[0] > 0:
            out = max(out, float(np.max(np.abs(P - P[0])) / P[0]))
    return out


def continuum_point(cfg: ExperimentConfig, h: float) -> dict:
    t0 = time.perf_counter()
    T = float(cfg.T)
    try:
        fpu, kdv, ce, r0, r1 = _continuum_pipeline(cfg, h, T, 1.0)
    except Exception as e:  # one h failing must not sink the sweep
        return {"h": h, "status": "aborted", "reason": f"{type(e).__name__}: {e}",
                "runtime": time.perf_counter() - t0}
    wrap = max(wrap_fraction(w) for w in kdv[0].states)
    drift = kdv_momentum_drift(kdv)
    rec = {"h": h, "error": ce["error"], "data_norm": data_norm(r0, r1, cfg.s),
           "max_pair_norm": max(hs_pair_norm(st, cfg.s) for st in fpu.states),
           "wrap": wrap, "kdv_momentum_drift": drift, "status": "ok",
           "per_time": [float(v) for v in ce["per_time"]], "times": [float(t) for t in ce["times"]]}
    localized = cfg.data == "soliton"
    if localized and wrap > WRAP_TOL:
        rec.update(status="aborted", reason=f"wave reaches the periodic seam (mass fraction {wrap:.2e})")
    elif drift > KDV_DRIFT_TOL:
        rec.update(status="aborted", reason=f"KdV momentum drift {drift:.2e}: step unstable, lower kdv_dt_factor")
    else:
        _, kdv2, ce2, _, _ = _continuum_pipeline(cfg, h, T, 2.0)
        if kdv_momentum_drift(kdv2) <= KDV_DRIFT_TOL:
            rec["temporal_budget"] = abs(ce2["error"] - ce["error"]) / 15
        else:
            # the doubled step is unstable: D(dt) - D(dt/2) = (15/16) C dt^4 for RK4
            _, kdv2, ce2, _, _ = _continuum_pipeline(cfg, h, T, 0.5)
            rec["temporal_budget"] = abs(ce2["error"] - ce["error"]) * 16 / 15
            rec["budget_step"] = 0.5
        rec["kdv_momentum_drift"] = max(drift, kdv_momentum_drift(kdv2))
        rec["budget"] = rec["temporal_budget"] + (wrap * ce["error"] if localized else 0.0)
        rec["below_floor"] = bool(ce["error"] < FLOOR_FACTOR * rec["budget"])
    if cfg.data == "soliton":
        up = max(st.u_plus.norm() for st in fpu.states)
        um = max(st.u_minus.norm() for st in fpu.states)
        rec["minus_to_plus"] = um / up if up > 0 else 0.0
    rec["runtime"] = time.perf_counter() - t0
    return rec


def _effective(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.T == "auto":
        return replace(cfg, T=auto_horizon(cfg))
    return cfg


def _collect(report: ConvergenceReport, recs: List[dict]) -> None:
    for r in recs:
        report.runtimes[str(r["h"])] = r.pop("runtime", float("nan"))
        for t, v in zip(r.pop("times", []), r.pop("per_time", [])):
            report.series.append((r["h"], t, "error", v))
        report.records.append(r)


def run_continuum_limit(cfg: ExperimentConfig) -> ConvergenceReport:
    """l_h r against the two translated KdV waves, swept over h, with the slope fit."""
    cfg = _effective(replace(cfg, kind="continuum_limit"))
    rep = ConvergenceReport("continuum_limit", cfg.to_dict())
    _collect(rep, _map_h(continuum_point, cfg, cfg.h_list))
    _finish_fit(rep, 2 * cfg.s / 5 - 0.04)
    if cfg.data == "soliton":
        ratios = [r["minus_to_plus"] for r in rep.records if "minus_to_plus" in r]
        rep.extra["max_minus_to_plus"] = max(ratios) if ratios else None
        if ratios and max(ratios) >= 1e-2 and rep.status == "passed":
            rep.status = "failed"
            rep.notes.append("u^- channel exceeds 1e-2 of u^+")
    return rep


# ---------------------------------------------------------------- small amplitude


def small_amplitude_error(h: float, scaled_error: float) -> float:
    """Error of the unscaled chain: ||f(h .)||_{L2(dx)} = h^{-1/2}||f||, times the h^2 amplitude."""
    return h ** 1.5 * scaled_error


def direct_cross_check(cfg: ExperimentConfig, h: float, max_work: float = 5e8) -> dict:
    """Coupled spectral run at spacing h against the unit-spacing leapfrog chain on [0, T/h^3].

    The combined tolerance is twice the sum of three measured budgets:
    leapfrog (dt against dt/2), spectral time stepping (dt against 2dt)
    and aliasing.  Pointwise products do not commute with the fractional
    lattice shifts of the split form, so the split system matches the
    chain only up to aliasing; its size is taken as the gap between the
    full-product and the 2/3-dealiased runs.
    """
    g = LatticeGrid.from_period(h, cfg.L)
    r0, r1 = initial_data(cfg, g)
    T = float(cfg.T)
    p = normalize(cfg.potential_obj())[0]
    dt = default_dt(h, cfg.L) * cfg.dt_factor

    def spectral(step, dealias):
        tr = evolve("coupled", split_initial_data(r0, r1), T, step, potential=p, n_samples=1,
                    two_sided=False, dealias=dealias)
        end = tr.states[-1]
        return to_unscaled(reconstruct_r(end), reconstruct_rt(end), T)

    spec = spectral(dt, False)
    start = to_unscaled(r0, r1, 0.0)
    lf_dt = 0.5 * stable_dt(start, p)
    work = g.n * spec.time / lf_dt
    if work > max_work:
        return {"h": h, "status": "skipped", "reason": f"cost guard: {work:.2e} site-steps"}
    spec2 = spectral(2 * dt, False)
    spec_da = spectral(dt, True)
    lf1 = integrate_direct(start, p, spec.time, lf_dt)
    lf2 = integrate_direct(start, p, spec.time, lf_dt / 2)

    def dist(a, b):
        return float(np.sqrt(np.sum((a.r.values - b.r.values) ** 2)))

    budgets = {"leapfrog_budget": dist(lf1, lf2) / 3, "spectral_budget": dist(spec, spec2) / 15,
               "aliasing_budget": dist(spec, spec_da)}
    diff = dist(spec, lf2)
    tol = 2 * sum(budgets.values())
    return {"h": h, "status": "ok", "difference": diff, "tolerance": tol, **budgets,
            "amplitude": float(np.sqrt(np.sum(spec.r.values ** 2))), "passed": bool(diff <= tol),
            "physical_time": spec.time}


def run_small_amplitude(cfg: ExperimentConfig, continuum: Optional[ConvergenceReport] = None) -> ConvergenceReport:
    """Rescaled continuum errors h^{3/2} e(h), fitted, plus direct-chain cross-checks."""
    cfg = _effective(replace(cfg, kind="small_amplitude"))
    if continuum is None:
        continuum = run_continuum_limit(replace(cfg, kind="continuum_limit"))
    rep = ConvergenceReport("small_amplitude", cfg.to_dict())
    rep.runtimes.update(continuum.runtimes)
    for r in continuum.records:
        rr = dict(r)
        if "error" in rr:
            rr["scaled_error"] = rr["error"]
            rr["error"] = small_amplitude_error(rr["h"], rr["error"])
            if "budget" in rr:
                rr["budget"] = small_amplitude_error(rr["h"], rr["budget"])
        rep.records.append(rr)
    for h, t, q, v in continuum.series:
        rep.series.append((h, t / h ** 3, q, small_amplitude_error(h, v)))
    _finish_fit(rep, 1.5 + 2 * cfg.s / 5 - 0.05)
    checks = []
    for h in cfg.cross_check_h:
        t0 = time.perf_counter()
        checks.append(direct_cross_check(cfg, h))
        rep.runtimes[f"cross_check_{h}"] = time.perf_counter() - t0
    rep.extra["cross_checks"] = checks
    if any(c.get("status") == "ok" and not c["passed"] for c in checks) and rep.status == "passed":
        rep.status = "failed"
        rep.notes.append("direct-chain cross-check outside the combined tolerance")
    if any(c.get("status") == "skipped" for c in checks) and rep.status == "passed":
        rep.status = "partial"
    return rep


# ---------------------------------------------------------------- decoupling


def _half_norm(U: np.ndarray, h: float, L: float) -> float:
    e = np.abs(U) ** 2
    return math.sqrt((e[0] + 2 * e[1:-1].sum() + e[-1]) * h * h / L)


def decoupling_distance(cfg: ExperimentConfig, h: float, dt_scale: float = 1.0) -> float:
    """max over [-T, T] and both signs of ||u^{+-} - v^{+-}||_{L2}."""
    g = LatticeGrid.from_period(h, cfg.L)
    r0, r1 = initial_data(cfg, g)
    s0 = split_initial_data(r0, r1)
    p = normalize(cfg.potential_obj())[0]
    dt = default_dt(h, cfg.L) * cfg.dt_factor * dt_scale
    T = float(cfg.T)
    coupled = FpuStepper(g, p, cross=True)
    decoupled = FpuStepper(g, None, cross=False)
    D = 0.0
    for sgn in (1, -1):
        Ua = [np.fft.rfft(s0.u_plus.values), np.fft.rfft(s0.u_minus.values)]
        Ub = [u.copy() for u in Ua]
        n = int(math.ceil(T / dt - 1e-9))
        st = sgn * T / n
        for i in range(n):
            Ua = coupled.step(i * st, Ua, st)
            Ub = decoupled.step(i * st, Ub, st)
            D = max(D, max(_half_norm(a - b, h, cfg.L) for a, b in zip(Ua, Ub)))
    return D


def decoupling_point(cfg: ExperimentConfig, h: float) -> dict:
    t0 = time.perf_counter()
    D = decoupling_distance(cfg, h)
    D2 = decoupling_distance(cfg, h, 2.0)
    budget = abs(D2 - D) / 15
    return {"h": h, "error": D, "budget": budget, "below_floor": bool(D < FLOOR_FACTOR * budget),
            "status": "ok", "runtime": time.perf_counter() - t0}


def run_decoupling(cfg: ExperimentConfig) -> ConvergenceReport:
    cfg = _effective(replace(cfg, kind="decoupling"))
    rep = ConvergenceReport("decoupling", cfg.to_dict())
    _collect(rep, _map_h(decoupling_point, cfg, cfg.h_list))
    return _finish_fit(rep, cfg.s - 0.15, max_residual=0.1)


# ---------------------------------------------------------------- linear comparison


def linear_comparison_point(cfg: ExperimentConfig, h: float, n_times: int = 65, images: int = 4) -> dict:
    """||l_h S_h(t) f - S(t) l_h f||_S on [-T, T] with f = r0 of the synthetic data."""
    t0 = time.perf_counter()
    g = LatticeGrid.from_period(h, cfg.L)
    f, _ = initial_data(cfg, g)
    T = float(cfg.T)
    times = np.linspace(-T, T, n_times)
    rows = []
    for t in times:
        a = interpolate(apply_fpu_flow(f, t, 1), cfg.rho)
        b = airy_of_interpolant(f, t, 1, cfg.rho, images)
        rows.append(a.values - b.values)
    S = np.array(rows)
    err = mixed_norm_S(S, times, h / cfg.rho)
    return {"h": h, "error": err, "status": "ok", "runtime": time.perf_counter() - t0}


def run_linear_comparison(cfg: ExperimentConfig) -> ConvergenceReport:
    cfg = _effective(replace(cfg, kind="linear_comparison"))
    rep = ConvergenceReport("linear_comparison", cfg.to_dict())
    _collect(rep, _map_h(linear_comparison_point, cfg, cfg.h_list))
    return _finish_fit(rep, 2 * cfg.s / 5 - 0.04)


# ---------------------------------------------------------------- conservation


def conservation_point(cfg: ExperimentConfig, h: float) -> dict:
    """Relative Hamiltonian drift of the coupled run and KdV momentum drift per unit time.

    Both runs start from data projected onto the dealiased band, where the
    schemes evolve closed Galerkin systems; the coupled step h^3/4 resolves
    the transport phase 2 t xi / h^2 up to the zone edge, and the KdV step is
    kdv_dt / 16.  The drift is then the time-stepping error alone.
    """
    t0 = time.perf_counter()
    g = LatticeGrid.from_period(h, cfg.L)
    r0, r1 = initial_data(cfg, g)
    s0 = split_initial_data(r0, r1)
    s0 = SplitState(band_limit(s0.u_plus), band_limit(s0.u_minus))
    p = normalize(cfg.potential_obj())[0]
    T = float(cfg.T)
    tr = evolve("coupled", s0, T, cfg.dt_factor * h ** 3 / 4, potential=p, n_samples=cfg.n_samples)
    H = [hamiltonian(FpuState(reconstruct_r(st), reconstruct_rt(st), st.time), p) for st in tr.states]
    H0 = H[len(H) // 2]
    w0 = band_limit(interpolate(s0.u_plus, cfg.rho).field)
    kd = evolve("kdv", w0, T, kdv_dt(cfg, h, w0) / 16, sign=1, n_samples=cfg.n_samples)
    P = [float(np.sum(w.values ** 2) * w.grid.h) for w in kd.states]
    P0 = P[len(P) // 2]
    return {"h": h, "status": "ok",
            "hamiltonian_drift": float(max(abs(x - H0) for x in H) / abs(H0)) if H0 else 0.0,
            "momentum_drift_per_time": float(max(abs(x - P0) for x in P) / (abs(P0) * T)) if P0 else 0.0,
            "hamiltonian": H, "momentum": P, "times": [float(t) for t in tr.times],
            "runtime": time.perf_counter() - t0}


def run_conservation(cfg: ExperimentConfig, h_tol: float = 1e-8, p_tol: float = 1e-10) -> ConvergenceReport:
    """Drift check on the coarse end of the h list (the reference step scales like h^3)."""
    hs = tuple(h for h in cfg.h_list if h >= 2.0 ** -3) or (2.0 ** -2, 2.0 ** -3)
    cfg = _effective(replace(cfg, kind="conservation", h_list=hs))
    rep = ConvergenceReport("conservation", cfg.to_dict())
    for r in _map_h(conservation_point, cfg, cfg.h_list):
        rep.runtimes[str(r["h"])] = r.pop("runtime")
        times = r.pop("times")
        for t, a, b in zip(times, r.pop("hamiltonian"), r.pop("momentum")):
            rep.series.append((r["h"], t, "hamiltonian", a))
            rep.series.append((r["h"], t, "kdv_momentum", b))
        rep.records.append(r)
    ok = all(r["hamiltonian_drift"] < h_tol and r["momentum_drift_per_time"] < p_tol for r in rep.records)
    rep.extra["tolerances"] = {"hamiltonian": h_tol, "momentum_per_time": p_tol}
    rep.status = "passed" if ok else "failed"
    return rep


def smooth_test_data(h: float, L: float = 8.0) -> Tuple[LatticeField, LatticeField]:
    """Two low modes for r and a sine for q, with r1 = nabla_h q / h^2."""
    g = LatticeGrid.from_period(h, L)
    x = g.nodes
    r0 = LatticeField(g, 0.6 * np.cos(2 * np.pi * x / L) + 0.3 * np.sin(4 * np.pi * x / L))
    q = LatticeField(g, 0.4 * np.sin(2 * np.pi * x / L))
    nab = (2j / h) * np.sin(h * g.frequencies / 2)
    r1 = LatticeField(g, np.fft.ifft(nab * np.fft.fft(q.values)).real / h ** 2)
    return r0, r1


def scheme_order(system: str, h: float = 0.25, L: float = 8.0, T: float = 1.0,
                 dts: Sequence[float] = (0.04, 0.02, 0.01), potential: Optional[Potential] = None) -> dict:
    """Richardson self-convergence log2(|y_dt - y_dt/2| / |y_dt/2 - y_dt/4|) at time T."""
    r0, r1 = smooth_test_data(h, L)
    init = r0 if system == "kdv" else split_initial_data(r0, r1)
    finals = []
    for dt in dts:
        tr = evolve(system, init, T, dt, potential=potential, n_samples=1, two_sided=False)
        finals.append(tr.states[-1])

    def dist(a, b):
        if system == "kdv":
            return (a - b).norm()
        return math.hypot((a.u_plus - b.u_plus).norm(), (a.u_minus - b.u_minus).norm())

    diffs = [dist(a, b) for a, b in zip(finals, finals[1:])]
    slopes = [math.log2(d1 / d2) for d1, d2 in zip(diffs, diffs[1:])]
    return {"system": system, "dts": list(dts), "differences": diffs, "slopes": slopes, "slope": slopes[-1]}


def remainder_contribution(cfg: ExperimentConfig, h: float) -> float:
    """max over [-T, T] of the L2 gap between coupled runs with the configured
    potential and with its cubic truncation (same a, b): the trajectory
    contribution of the h^2 R term."""
    g = LatticeGrid.from_period(h, cfg.L)
    r0, r1 = initial_data(cfg, g)
    s0 = split_initial_data(r0, r1)
    p = normalize(cfg.potential_obj())[0]
    cubic = Potential.cubic(p.a, p.b)
    dt = default_dt(h, cfg.L) * cfg.dt_factor
    full = FpuStepper(g, p, cross=True)
    trunc = FpuStepper(g, cubic, cross=True)
    D = 0.0
    for sgn in (1, -1):
        Ua = [np.fft.rfft(s0.u_plus.values), np.fft.rfft(s0.u_minus.values)]
        Ub = [u.copy() for u in Ua]
        n = int(math.ceil(float(cfg.T) / dt - 1e-9))
        st = sgn * float(cfg.T) / n
        for i in range(n):
            Ua = full.step(i * st, Ua, st)
            Ub = trunc.step(i * st, Ub, st)
            D = max(D, math.sqrt(sum(_half_norm(a - b, h, cfg.L) ** 2 for a, b in zip(Ua, Ub))))
    return D


def remainder_point(cfg: ExperimentConfig, h: float) -> dict:
    t0 = time.perf_counter()
    return {"h": h, "error": remainder_contribution(cfg, h), "status": "ok",
            "runtime": time.perf_counter() - t0}


def run_remainder(cfg: ExperimentConfig, threshold: float = 1.9) -> ConvergenceReport:
    """Slope in h of the remainder contribution (Toda by default)."""
    cfg = replace(cfg, kind="remainder")
    if cfg.potential_obj().kind == "cubic":
        cfg = replace(cfg, potential="toda:1,1")
    cfg = _effective(cfg)
    rep = ConvergenceReport("remainder", cfg.to_dict())
    _collect(rep, _map_h(remainder_point, cfg, cfg.h_list))
    return _finish_fit(rep, threshold)


# ---------------------------------------------------------------- estimate experiments


def run_kernels(cfg: ExperimentConfig) -> ConvergenceReport:
    """Kernel sweep; the h list of the config is used when it is coarser than 1/16."""
    from .estimate_verifiers import default_kernel_grid, kernel_sweep

    hs = tuple(h for h in cfg.h_list if h >= 2.0 ** -4) or (2.0 ** -2, 2.0 ** -3, 2.0 ** -4)
    rep = ConvergenceReport("kernels", replace(cfg, kind="kernels", h_list=hs).to_dict())
    t0 = time.perf_counter()
    points = default_kernel_grid(h_list=hs)
    sw = kernel_sweep(points)
    rep.runtimes["sweep"] = time.perf_counter() - t0
    core = [r for r in sw.rows if not (r["bound_kind"] == "region3" and r["N"] == 1.0)]
    const = max(r["ratio"] for r in core)
    const_c = max(r["ratio_coarse"] for r in core)
    arg = max(core, key=lambda r: r["ratio"])
    for r in sw.rows:
        rep.series.append((r["h"], r["t"], f"ratio_{r['bound_kind']}_N{r['N']}_x{r['x']:.6g}", r["ratio"]))
    rep.extra = {"queries": len(points), "ratio_rows": len(sw.rows), "constant": const, "constant_coarse": const_c,
                 "argmax": {k: arg[k] for k in ("t", "x", "N", "h", "bound_kind")},
                 "refinement_change": abs(const - const_c) / const,
                 "worst_self_convergence": sw.worst_self_convergence,
                 "edge_band_constant": max((r["ratio"] for r in sw.rows
                                            if r["bound_kind"] == "region3" and r["N"] == 1.0), default=None)}
    rep.records = [{"h": h, "constant": max(r["ratio"] for r in core if r["h"] == h), "status": "ok"} for h in hs]
    rep.status = "passed" if rep.extra["refinement_change"] <= 0.02 else "failed"
    return rep


def run_bilinear(cfg: ExperimentConfig, which: Sequence[str] = ("I", "II", "III")) -> ConvergenceReport:
    """Reduced-integrand suprema over h, proof-chain ceilings and the II slope."""
    from .estimate_verifiers import BilinearQuery, bilinear_scan, ceiling_limit, elementary_constant

    hs = tuple(h for h in cfg.h_list if h >= 2.0 ** -5) or (2.0 ** -2, 2.0 ** -3, 2.0 ** -4, 2.0 ** -5)
    rep = ConvergenceReport("bilinear", replace(cfg, kind="bilinear", h_list=hs).to_dict())
    c2 = None
    ok = True
    for w in which:
        for h in hs:
            t0 = time.perf_counter()
            q = BilinearQuery(h=h, dc=0.5 if h >= 2.0 ** -4 else 1.0)
            r = bilinear_scan(q, w)
            c2 = c2 if c2 is not None else elementary_constant(q.b)
            gain = 1.0 if w == "I" else h ** (q.s_prime - q.s)
            rec = {"which": w, "h": h, "sup": r.sup, "tau": r.tau, "xi": r.xi,
                   "sup_over_gain": r.sup / gain, "proof_constant": r.proof_constant,
                   "closed_form_max": r.ceiling_max, "closed_form_ceiling": ceiling_limit(w, q) * (1.0 if w == "I" else 1.01),
                   "resolution_change": r.resolution_change, "status": "ok"}
            rec["within_proof"] = bool(r.sup <= r.proof_constant)
            rec["closed_form_ok"] = bool(r.ceiling_max <= rec["closed_form_ceiling"] * (1 + 1e-12)) if w != "III" else True
            ok &= rec["within_proof"] and rec["closed_form_ok"]
            rep.records.append(rec)
            rep.series.append((h, 0.0, f"sup_{w}", r.sup))
            rep.runtimes[f"{w}_{h}"] = time.perf_counter() - t0
    rep.extra["recorded_constants"] = {w: max(r["sup_over_gain"] for r in rep.records if r["which"] == w)
                                       for w in which}
    rep.extra["elementary_constant"] = c2
    if "II" in which:
        pts = [(r["h"], r["sup"]) for r in rep.records if r["which"] == "II"][-3:]
        x, y = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
        slope = float(np.polyfit(x, y, 1)[0])
        rep.slope = slope
        rep.threshold = 0.5
        rep.extra["II_slope_fit_h"] = [p[0] for p in pts]
        ok &= abs(slope - 0.5) <= 0.05
    rep.status = "passed" if ok else "failed"
    return rep


def run_xsb_failure(cfg: ExperimentConfig, b: float = 0.55) -> ConvergenceReport:
    from .estimate_verifiers import window_weight_integral, xsb_dichotomy

    hs = tuple(h for h in cfg.h_list if h >= 2.0 ** -5) or (2.0 ** -2, 2.0 ** -3, 2.0 ** -4, 2.0 ** -5)
    rep = ConvergenceReport("xsb_failure", replace(cfg, kind="xsb_failure", h_list=hs).to_dict())
    t0 = time.perf_counter()
    recs = xsb_dichotomy(hs, s=cfg.s, b=b, L=1.0)
    rep.runtimes["sweep"] = time.perf_counter() - t0
    for r in recs:
        rep.records.append({"h": r.h, "ratio_fpu": r.ratio_fpu, "ratio_airy": r.ratio_airy,
                            "hs_norm": r.hs_norm, "status": "ok"})
        rep.series.append((r.h, 0.0, "ratio_fpu", r.ratio_fpu))
        rep.series.append((r.h, 0.0, "ratio_airy", r.ratio_airy))
    fpu = [r.ratio_fpu for r in recs]
    airy = [r.ratio_airy for r in recs]
    growth = [b2 / a for a, b2 in zip(airy, airy[1:])]
    rep.extra = {"window_weight_integral": window_weight_integral(b), "fpu_variation": max(fpu) / min(fpu),
                 "airy_growth": growth, "required_growth": 2 ** (2 * b)}
    ok = max(fpu) / min(fpu) < 2 and all(g >= 2 ** (2 * b) for g in growth)
    rep.status = "passed" if ok else "failed"
    return rep


RUNNERS = {
    "continuum_limit": run_continuum_limit,
    "small_amplitude": run_small_amplitude,
    "decoupling": run_decoupling,
    "linear_comparison": run_linear_comparison,
    "kernels": run_kernels,
    "bilinear": run_bilinear,
    "xsb_failure": run_xsb_failure,
    "conservation": run_conservation,
    "remainder": run_remainder,
}


def run_experiment(cfg: ExperimentConfig) -> ConvergenceReport:
    return RUNNERS[cfg.kind](cfg)


def run_suite(configs: Sequence[ExperimentConfig], out_dir=None) -> dict:
    """Run each config in isolation; a failing sub-run is recorded, not raised."""
    bundle = {"schema_version": SCHEMA_VERSION, "artifact_version": __version__, "runs": []}
    statuses = []
    for i, cfg in enumerate(configs):
        sub = Path(out_dir) / f"{i:02d}_{cfg.kind}" if out_dir is not None else None
        try:
            rep = run_experiment(cfg)
            status = rep.status
            if sub is not None:
                write_report(rep, sub)
        except Exception as e:
            log.exception("sub-run %s failed", cfg.kind)
            rep, status = None, "error"
            bundle["runs"].append({"kind": cfg.kind, "status": status, "error": f"{type(e).__name__}: {e}"})
            statuses.append(status)
            continue
        entry = {"kind": cfg.kind, "status": status}
        if sub is not None:
            entry["report"] = str(sub.relative_to(out_dir) / "report.json")
        bundle["runs"].append(entry)
        statuses.append(status)
    if not statuses or all(s in ("passed", "degenerate") for s in statuses):
        bundle["status"] = "passed"
    elif any(s in ("passed", "degenerate") for s in statuses):
        bundle["status"] = "partial"
    else:
        bundle["status"] = "failed"
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "index.json").write_text(json.dumps(_jsonable(bundle), indent=2, sort_keys=True) + "\n")
    return bundle


# ---------------------------------------------------------------- CLI


def _load_config(path: Optional[str], **overrides) -> ExperimentConfig:
    d = json.loads(Path(path).read_text()) if path else {}
    for k, v in overrides.items():
        if v is not None:
            d[k] = v
    return ExperimentConfig.from_dict(d)


def eval_fraction(tok: str) -> float:
    """'1/8' -> 0.125, '0.25' -> 0.25, '2^-3' -> 0.125."""
    tok = tok.strip()
    if tok.startswith("2^"):
        return 2.0 ** int(tok[2:])
    if "/" in tok:
        a, b = tok.split("/")
        return float(a) / float(b)
    return float(tok)


def _common(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="JSON config file."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True),
        click.option("--seed", type=int, default=None),
        click.option("--threads", type=int, default=None),
        click.option("--h-list", "h_list", default=None, help="Comma list, e.g. 1/8,1/16 or 2^-3,2^-4."),
        click.option("--s", "s", type=float, default=None),
        click.option("--potential", default=None, help="kind:p1,p2 (cubic, polynomial, lennard_jones, toda)."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _build(kind, config_path, seed, threads, h_list, s, potential, out_dir, **extra) -> ExperimentConfig:
    hl = tuple(eval_fraction(t) for t in h_list.split(",")) if h_list else None
    return _load_config(config_path, kind=kind, seed=seed, threads=threads, h_list=hl, s=s,
                        potential=potential, out_dir=out_dir, **extra)


def _emit(rep: ConvergenceReport, out_dir: str) -> None:
    path = write_report(rep, out_dir)
    click.echo(f"{rep.kind}: {rep.status} (slope={rep.slope}) -> {path}")
    raise SystemExit(rep.exit_code())


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool) -> None:
    """FPU to KdV numerical laboratory."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_common
@click.option("--system", type=click.Choice(["coupled", "decoupled"]), default="coupled", show_default=True)
@click.option("--T", "T", type=float, default=1.0, show_default=True)
def simulate(config_path, out_dir, seed, threads, h_list, s, potential, system, T):
    """Evolve one h and write a trajectory snapshot."""
    cfg = _build("conservation", config_path, seed, threads, h_list, s, potential, out_dir, T=T)
    h = cfg.h_list[0]
    g = LatticeGrid.from_period(h, cfg.L)
    r0, r1 = initial_data(cfg, g)
    p = normalize(cfg.potential_obj())[0]
    tr = evolve(system, split_initial_data(r0, r1), T, default_dt(h, cfg.L) * cfg.dt_factor,
                potential=p if system == "coupled" else None, n_samples=cfg.n_samples)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_trajectory(out / "trajectory.bin", tr, {"config": cfg.to_dict()})
    click.echo(f"wrote {out / 'trajectory.bin'} ({len(tr.times)} samples)")


@main.command()
@_common
@click.option("--kind", type=click.Choice(["continuum_limit", "small_amplitude", "decoupling",
                                          "linear_comparison", "remainder"]),
              default="continuum_limit", show_default=True)
@click.option("--T", "T", default=None, help="Horizon or 'auto'.")
def converge(config_path, out_dir, seed, threads, h_list, s, potential, kind, T):
    """Run an h-sweep and fit the convergence rate."""
    Tv = None if T is None else (T if T == "auto" else float(T))
    _emit(run_experiment(_build(kind, config_path, seed, threads, h_list, s, potential, out_dir, T=Tv)), out_dir)


@main.command()
@_common
def kernels(config_path, out_dir, seed, threads, h_list, s, potential):
    """Kernel decay sweep."""
    _emit(run_kernels(_build("kernels", config_path, seed, threads, h_list, s, potential, out_dir)), out_dir)


@main.command()
@_common
def bilinear(config_path, out_dir, seed, threads, h_list, s, potential):
    """Reduced bilinear integrands over h."""
    _emit(run_bilinear(_build("bilinear", config_path, seed, threads, h_list, s, potential, out_dir)), out_dir)


@main.command("xsb-failure")
@_common
def xsb_failure(config_path, out_dir, seed, threads, h_list, s, potential):
    """Discrete Bourgain norms with the lattice and Airy phases."""
    _emit(run_xsb_failure(_build("xsb_failure", config_path, seed, threads, h_list, s, potential, out_dir)), out_dir)


@main.command()
@_common
@click.option("--T", "T", type=float, default=None)
def conserve(config_path, out_dir, seed, threads, h_list, s, potential, T):
    """Hamiltonian and KdV momentum drift."""
    _emit(run_conservation(_build("conservation", config_path, seed, threads, h_list, s, potential, out_dir, T=T)),
          out_dir)


if __name__ == "__main__":
    main()
