import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpukdv.fpu_system import Potential, normalize
from fpukdv.harness_cli import kdv_soliton
from fpukdv.lattice_fourier import LatticeField, LatticeGrid, random_field, symbol_table, apply_to_field
from fpukdv.propagators import apply_airy_flow, apply_fpu_flow
from fpukdv.spectral_solvers import (
    SolverDivergence,
    SplitState,
    Trajectory,
    default_dt,
    dealias_mask,
    evolve,
    filon_factor,
    load_trajectory,
    make_stepper,
    reconstruct_r,
    reconstruct_rt,
    save_trajectory,
    split_initial_data,
    step_coupled,
    step_decoupled,
    step_kdv,
)

G = LatticeGrid.from_period(0.25, 8.0)
TODA = normalize(Potential.toda(1.0, 2.0))[0]


def smooth_pair(seed=0, amp=0.3, g=G):
    rng = np.random.default_rng(seed)
    r0 = random_field(g, rng, band=4) * amp
    r1 = random_field(g, rng, band=4, zero_mean=True) * amp
    return r0, r1


def close(a, b, tol):
    return np.max(np.abs(a.values - b.values)) <= tol * max(1.0, np.max(np.abs(b.values)))


def test_split_examples():
    r0, _ = smooth_pair()
    zero = LatticeField(G, np.zeros(G.n))
    s = split_initial_data(r0, zero)
    assert close(s.u_plus, r0 * 0.5, 1e-15) and close(s.u_minus, r0 * 0.5, 1e-15)
    q = random_field(G, np.random.default_rng(3), band=G.n // 2, zero_mean=True)
    nq = apply_to_field(q, symbol_table(G.h)["nabla"])
    s = split_initial_data(zero, nq)
    assert close(s.u_plus, q * (-G.h ** 2 / 2), 1e-12) and close(s.u_minus, q * (G.h ** 2 / 2), 1e-12)
    with pytest.raises(ValueError):
        split_initial_data(r0, LatticeField(G, np.ones(G.n)))


def test_reconstruct_round_trip_and_exact_shifts():
    r0, r1 = smooth_pair(1)
    s = split_initial_data(r0, r1)
    assert close(reconstruct_r(s), r0, 1e-12)
    assert close(reconstruct_rt(s), r1, 1e-12)
    h = G.h
    for k in (1, 17):
        r = reconstruct_r(SplitState(s.u_plus, s.u_minus, k * h ** 3))
        expect = np.roll(s.u_plus.values, k) + np.roll(s.u_minus.values, -k)
        assert np.max(np.abs(r.values - expect)) < 1e-12


@pytest.mark.parametrize("system", ["coupled", "decoupled", "kdv"])
def test_zero_is_fixed_point(system):
    zero = LatticeField(G, np.zeros(G.n))
    init = zero if system == "kdv" else SplitState(zero, zero)
    tr = evolve(system, init, 0.5, 0.05, potential=TODA if system == "coupled" else None)
    for st_ in tr.states:
        vals = st_.values if system == "kdv" else np.concatenate([st_.u_plus.values, st_.u_minus.values])
        assert np.all(vals == 0)


def test_single_steps_match_evolve():
    r0, r1 = smooth_pair(2)
    s = split_initial_data(r0, r1)
    a = step_coupled(s, TODA, 0.01)
    b = evolve("coupled", s, 0.01, 0.01, potential=TODA, two_sided=False).states[-1]
    assert close(a.u_plus, b.u_plus, 1e-14)
    a = step_decoupled(s, 0.01)
    b = evolve("decoupled", s, 0.01, 0.01, two_sided=False).states[-1]
    assert close(a.u_minus, b.u_minus, 1e-14)
    w = step_kdv(r0, 0.01, -1)
    assert close(w, evolve("kdv", r0, 0.01, 0.01, sign=-1, two_sided=False).states[-1], 1e-14)


@pytest.mark.parametrize("system", ["coupled", "decoupled"])
@pytest.mark.parametrize("dt", [0.013, 0.1])
def test_linear_part_is_exact(system, dt):
    r0, r1 = smooth_pair(3)
    s = split_initial_data(r0, r1)
    tr = evolve(system, s, 0.7, dt, nonlinear=False, potential=TODA if system == "coupled" else None)
    for t, st_ in zip(tr.times, tr.states):
        assert close(st_.u_plus, apply_fpu_flow(s.u_plus, t, 1), 1e-12)
        assert close(st_.u_minus, apply_fpu_flow(s.u_minus, t, -1), 1e-12)


def test_kdv_linear_part_is_exact():
    r0, _ = smooth_pair(4)
    tr = evolve("kdv", r0, 0.7, 0.05, nonlinear=False, sign=-1)
    for t, w in zip(tr.times, tr.states):
        assert close(w, apply_airy_flow(r0, t, -1), 1e-12)


def test_kdv_soliton_profile_satisfies_pde():
    # residual of w_t + (1/24) w_xxx + (1/4)(w^2)_x for the travelling wave, spectral derivatives
    c, L = 0.5, 32.0
    g = LatticeGrid.from_period(1 / 32, L)
    x = g.nodes
    xi = g.rfrequencies

    def dx(v, k=1):
        return np.fft.irfft((1j * xi) ** k * np.fft.rfft(v), n=g.n)

    w = kdv_soliton(x, c, L)
    wt = -c * dx(w)
    res = wt + dx(w, 3) / 24 + 0.25 * dx(w * w)
    assert np.sqrt(g.h * np.sum(res ** 2)) < 1e-8
    wrong = kdv_soliton(x, 2 * c, L)
    res2 = -c * dx(wrong) + dx(wrong, 3) / 24 + 0.25 * dx(wrong * wrong)
    assert np.sqrt(g.h * np.sum(res2 ** 2)) > 1e-2


def test_kdv_soliton_propagates():
    c, L = 0.5, 32.0
    g = LatticeGrid.from_period(1 / 16, L)
    x = g.nodes
    tr = evolve("kdv", LatticeField(g, kdv_soliton(x, c, L)), 1.0, 1e-3, n_samples=4)
    err = max(np.max(np.abs(w.values - kdv_soliton(x, c, L, x0=c * t))) for t, w in zip(tr.times, tr.states))
    assert err < 1e-6


def test_kdv_momentum_conserved():
    r0, _ = smooth_pair(5, amp=1.0)
    tr = evolve("kdv", r0, 1.0, 0.01, n_samples=8)
    P = np.array([w.norm() ** 2 for w in tr.states])
    assert np.max(np.abs(P - P[len(P) // 2])) / P[0] < 1e-10


def test_evolve_contract():
    r0, r1 = smooth_pair(6)
    s = split_initial_data(r0, r1)
    tr = evolve("coupled", s, 0.5, 0.02, potential=TODA, n_samples=5)
    assert close(tr.at(0.0).u_plus, s.u_plus, 1e-15) and close(tr.at(0.0).u_minus, s.u_minus, 1e-15)
    assert np.allclose(tr.times, np.linspace(-0.5, 0.5, 11))
    assert tr.metadata["order"] == 4 and tr.metadata["dealiased"] is True
    with pytest.raises(KeyError):
        tr.at(0.123)
    with pytest.raises(ValueError):
        evolve("coupled", s, 0.0, 0.01)
    with pytest.raises(ValueError):
        evolve("coupled", s, 1.0, -0.01)
    with pytest.raises(ValueError):
        make_stepper("wave", G)
    with pytest.raises(ValueError):
        evolve("coupled", s, 0.5, 0.02, potential=Potential.toda(1.0, 2.0))


@pytest.mark.parametrize("system", ["coupled", "decoupled", "kdv"])
def test_forward_backward_reversibility(system):
    r0, r1 = smooth_pair(7)
    init = r0 if system == "kdv" else split_initial_data(r0, r1)
    pot = TODA if system == "coupled" else None
    fwd = evolve(system, init, 0.4, 0.01, potential=pot, two_sided=False).states[-1]
    if system != "kdv":
        fwd = SplitState(fwd.u_plus, fwd.u_minus, 0.4)
    stepper = make_stepper(system, G, pot)
    U = [np.fft.rfft(f.values) for f in ([fwd] if system == "kdv" else [fwd.u_plus, fwd.u_minus])]
    for i in range(40):
        U = stepper.step(0.4 - i * 0.01, U, -0.01)
    back = np.fft.irfft(U[0], n=G.n)
    ref = init.values if system == "kdv" else init.u_plus.values
    # RK4 is not symmetric: the round trip carries twice the O(dt^4) global error
    assert np.max(np.abs(back - ref)) < 1e-6


@pytest.mark.parametrize("system", ["coupled", "decoupled", "kdv"])
def test_richardson_self_convergence(system):
    from fpukdv.harness_cli import scheme_order

    out = scheme_order(system, potential=TODA if system == "coupled" else None)
    assert out["slope"] == pytest.approx(4.0, abs=0.2)


def test_uniform_hs_bound_on_short_horizon():
    from fpukdv.harness_cli import generate_hs_data, hs_pair_norm

    g = LatticeGrid.from_period(2.0 ** -4, 16.0)
    r0, r1 = generate_hs_data(g, 1.0, 1.0, 0)
    s = split_initial_data(r0, r1)
    n0 = hs_pair_norm(s, 1.0)
    tr = evolve("coupled", s, 0.25, default_dt(g.h, g.L), potential=Potential.cubic(), n_samples=4)
    assert max(hs_pair_norm(st_, 1.0) for st_ in tr.states) <= 2 * n0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    g = LatticeGrid(0.25, 32)
    w = LatticeField(g, 1e154 * np.cos(2 * np.pi * g.nodes / g.L))
    with pytest.raises(SolverDivergence):
        step_kdv(w, 0.1, 1)


def test_snapshot_round_trip(tmp_path):
    r0, r1 = smooth_pair(8)
    s = split_initial_data(r0, r1)
    tr = evolve("coupled", s, 0.1, 0.05, potential=TODA, n_samples=2)
    p = tmp_path / "traj.bin"
    save_trajectory(p, tr, {"seed": 3})
    back = load_trajectory(p)
    assert np.array_equal(back.times, tr.times)
    assert back.metadata["seed"] == 3 and back.metadata["potential"]["kind"] == "toda"
    for a, b in zip(back.states, tr.states):
        assert np.array_equal(a.u_plus.values, b.u_plus.values)
    kd = evolve("kdv", r0, 0.1, 0.05, n_samples=2)
    save_trajectory(p, kd)
    assert np.array_equal(load_trajectory(p).states[-1].values, kd.states[-1].values)
    p.write_bytes(b"garbage!" + p.read_bytes()[8:])
    with pytest.raises(ValueError):
        load_trajectory(p)


def test_helpers():
    m = dealias_mask(12)
    assert m.sum() == 4 and not m[-1]
    assert filon_factor(np.array([0.0]))[0] == pytest.approx(1.0)
    th = np.array([1e-3, 0.5, 2.0])
    x = th / 2
    assert np.allclose(filon_factor(th), np.sin(x) / x * 3 / (2 + np.cos(x)))
    assert default_dt(0.25, 64.0) == pytest.approx(0.05)
    assert default_dt(2.0 ** -7, 64.0) == pytest.approx(2.0 ** -14 * 2)
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [1, 2])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31), t=st.floats(0.05, 0.5))
def test_split_reconstruct_property(seed, t):
    rng = np.random.default_rng(seed)
    r0 = random_field(G, rng, band=G.n // 2)
    r1 = random_field(G, rng, band=G.n // 2, zero_mean=True)
    s = split_initial_data(r0, r1)
    moved = SplitState(apply_fpu_flow(s.u_plus, 0.0, 1), s.u_minus, t)
    back = SplitState(s.u_plus, s.u_minus, t)
    assert close(reconstruct_r(moved), reconstruct_r(back), 1e-13)
    assert reconstruct_r(back).norm() <= 2 * max(s.u_plus.norm(), s.u_minus.norm()) + 1e-12
