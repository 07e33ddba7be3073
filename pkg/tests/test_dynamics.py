import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hamflow import autodiff as ad
from hamflow import dynamics as dyn
from hamflow import symmetry as sym
from hamflow.autodiff import ContractError

from .helpers import random_flow_model


def harmonic_1d():
    return dyn.quadratic_kinetic(1), dyn.harmonic_potential(1)


def leapfrog_oracle(q, p, dt, du, dk, steps=1):
    """Plain-numpy reference of the three sub-steps."""
    for _ in range(steps):
        p = p - 0.5 * dt * du(q)
        q = q + dt * dk(p)
        p = p - 0.5 * dt * du(q)
    return q, p


class TestPoissonBracket:
    def test_canonical_coordinates(self):
        f = dyn.ScalarField(1, lambda q, p: ad.index(q, 0))
        g = dyn.ScalarField(1, lambda q, p: ad.index(p, 0))
        s = dyn.StateVector([0.3], [-1.7])
        assert dyn.poisson_bracket(f, g, s) == 1.0

    def test_squares(self):
        f = dyn.ScalarField(1, lambda q, p: ad.square(ad.index(q, 0)))
        g = dyn.ScalarField(1, lambda q, p: ad.square(ad.index(p, 0)))
        s = dyn.StateVector([1.0], [2.0])
        # 2 q1 * 2 p1 at (1, 2)
        assert dyn.poisson_bracket(f, g, s) == pytest.approx(8.0, abs=1e-14)

    def test_rotation_invariant_hamiltonian(self):
        g = sym.so2_generator()
        H = dyn.hamiltonian_field(dyn.quadratic_kinetic(2), dyn.harmonic_potential(2))
        rng = np.random.default_rng(0)
        for _ in range(10):
            s = dyn.StateVector(rng.normal(size=2), rng.normal(size=2))
            assert abs(dyn.poisson_bracket(g, H, s)) < 1e-14

    def test_antisymmetry(self):
        f = dyn.ScalarField(2, lambda q, p: ad.dot(q, p))
        g = dyn.ScalarField(2, lambda q, p: ad.dot(q, q) * ad.vsum(p))
        rng = np.random.default_rng(1)
        for _ in range(5):
            s = dyn.StateVector(rng.normal(size=2), rng.normal(size=2))
            a = dyn.poisson_bracket(f, g, s)
            b = dyn.poisson_bracket(g, f, s)
            assert a == pytest.approx(-b, abs=1e-12)

    def test_dimension_mismatch(self):
        f = dyn.ScalarField(1, lambda q, p: ad.index(q, 0))
        g = sym.so2_generator()
        with pytest.raises(ContractError):
            dyn.poisson_bracket(f, g, dyn.StateVector([1.0], [0.0]))


class TestInfinitesimalTransform:
    def test_angular_momentum_action(self):
        g = sym.so2_generator()
        s = dyn.StateVector([1.0, 0.0], [0.0, 0.0])
        out = dyn.infinitesimal_transform(g, 0.01, s)
        # dg/dp = (-q2, q1) = (0, 1); dg/dq = (p2, -p1) = (0, 0)
        assert np.allclose(out.q, [1.0, 0.01], atol=1e-15)
        assert np.allclose(out.p, [0.0, 0.0], atol=1e-15)

    def test_zero_eps_is_identity(self):
        g = sym.so2_generator()
        s = dyn.StateVector([0.4, -0.2], [1.1, 0.6])
        out = dyn.infinitesimal_transform(g, 0.0, s)
        assert np.array_equal(out.q, s.q) and np.array_equal(out.p, s.p)

    def test_constant_field_is_identity(self):
        c = dyn.constant_field(2, 3.7)
        s = dyn.StateVector([0.4, -0.2], [1.1, 0.6])
        out = dyn.infinitesimal_transform(c, 0.3, s)
        assert np.array_equal(out.q, s.q) and np.array_equal(out.p, s.p)


class TestLeapfrog:
    def test_harmonic_hand_values(self):
        K, U = harmonic_1d()
        s = dyn.StateVector([1.0], [0.0])
        out = dyn.leapfrog_step(K, U, 0.1, s)
        # p1 = -0.05; q' = 1 - 0.005 = 0.995; p' = -0.05 - 0.05*0.995
        assert out.q[0] == pytest.approx(0.995, abs=1e-15)
        assert out.p[0] == pytest.approx(-0.09975, abs=1e-15)

    def test_exact_inverse(self):
        K, U = harmonic_1d()
        s = dyn.StateVector([1.0], [0.0])
        out = dyn.leapfrog_step(K, U, 0.1, s)
        back = dyn.leapfrog_step(K, U, 0.1, out, direction="inverse")
        assert abs(back.q[0] - 1.0) < 1e-14
        assert abs(back.p[0]) < 1e-14

    def test_free_particle(self):
        K = dyn.quadratic_kinetic(1)
        U = dyn.constant_field(1, 0.0)
        out = dyn.leapfrog_step(K, U, 1.0, dyn.StateVector([0.0], [1.0]))
        assert out.q[0] == 1.0 and out.p[0] == 1.0

    def test_separability_enforced(self):
        mixed = dyn.ScalarField(1, lambda q, p: ad.dot(q, p), name="qp")
        K, U = harmonic_1d()
        with pytest.raises(ContractError):
            dyn.leapfrog_exprs(mixed, U, 0.1, ad.vector_input("a", 1), ad.vector_input("b", 1))
        with pytest.raises(ContractError):
            dyn.leapfrog_exprs(K, mixed, 0.1, ad.vector_input("a", 1), ad.vector_input("b", 1))

    def test_matches_numpy_oracle_with_quartic(self):
        K = dyn.quadratic_kinetic(2)
        U = dyn.central_potential(2, lambda r2: 0.25 * ad.square(r2))
        s = dyn.StateVector([0.8, -0.3], [0.2, 0.5])
        out = dyn.leapfrog_step(K, U, 0.37, s)
        q, p = leapfrog_oracle(s.q, s.p, 0.37,
                               du=lambda q: np.sum(q * q) * q,
                               dk=lambda p: p)
        assert np.allclose(out.q, q, atol=1e-15)
        assert np.allclose(out.p, p, atol=1e-15)


class TestFlow:
    def test_zero_energy_flow_is_identity(self):
        model = random_flow_model(seed=0)
        K0 = dyn.constant_field(2, 0.0, "K")
        U0 = dyn.constant_field(2, 1.5, "U")
        flow = dyn.FlowSpec([(K0, U0)], dt=0.7, leapfrog_steps=3)
        s = dyn.StateVector([0.3, -1.0], [0.2, 0.9])
        out = dyn.flow_forward(flow, s)
        assert np.array_equal(out.q, s.q) and np.array_equal(out.p, s.p)

    def test_two_step_harmonic_frozen_values(self):
        K, U = harmonic_1d()
        flow = dyn.FlowSpec([(K, U)], dt=0.1, leapfrog_steps=2)
        out = dyn.flow_forward(flow, dyn.StateVector([1.0], [0.0]))
        q, p = leapfrog_oracle(np.array([1.0]), np.array([0.0]), 0.1,
                               du=lambda q: q, dk=lambda p: p, steps=2)
        # hand iteration gives (0.98005, -0.1985025)
        assert q[0] == pytest.approx(0.98005, abs=1e-15)
        assert p[0] == pytest.approx(-0.1985025, abs=1e-15)
        assert out.q[0] == pytest.approx(q[0], abs=1e-15)
        assert out.p[0] == pytest.approx(p[0], abs=1e-15)

    def test_round_trip_learned_networks(self):
        model = random_flow_model(seed=3, widths=(16, 16))
        rng = np.random.default_rng(8)
        s = dyn.StateVector(rng.normal(size=(100, 2)), rng.normal(size=(100, 2)))
        fwd = dyn.flow_forward(model.flow, s, model.store)
        back = dyn.flow_inverse(model.flow, fwd, model.store)
        err = max(np.abs(back.q - s.q).max(), np.abs(back.p - s.p).max())
        assert err < 1e-10

    @settings(deadline=None, max_examples=20)
    @given(st.floats(0.01, 2.0), st.integers(0, 1000))
    def test_round_trip_any_dt(self, dt, seed):
        # exact invertibility holds for any dt > 0, not just dt -> 0
        model = random_flow_model(seed=5)
        flow = dyn.FlowSpec(model.flow.hamiltonians, dt=dt, leapfrog_steps=2)
        rng = np.random.default_rng(seed)
        s = dyn.StateVector(rng.normal(size=2), rng.normal(size=2))
        back = dyn.flow_inverse(flow, dyn.flow_forward(flow, s, model.store), model.store)
        assert max(np.abs(back.q - s.q).max(), np.abs(back.p - s.p).max()) < 1e-10

    def test_validation(self):
        K, U = harmonic_1d()
        with pytest.raises(ContractError):
            dyn.FlowSpec([], dt=0.1)
        with pytest.raises(ContractError):
            dyn.FlowSpec([(K, U)], dt=-0.1)
        with pytest.raises(ContractError):
            dyn.FlowSpec([(K, U)], dt=0.1, leapfrog_steps=0)

    def test_multi_hamiltonian_chain_order(self):
        # inverse reverses both the chain and each step
        m1 = random_flow_model(seed=21, widths=(8, 8))
        m2 = random_flow_model(seed=22, widths=(8, 8))
        # merge stores: rebuild in one store
        store = ad.ParamStore()
        rng = np.random.default_rng(0)
        from hamflow import networks as nets

        k1 = nets.MlpSpec((2, 8, 1), "softplus", "K1")
        u1 = nets.MlpSpec((2, 8, 1), "softplus", "U1")
        k2 = nets.MlpSpec((2, 8, 1), "softplus", "K2")
        u2 = nets.MlpSpec((2, 8, 1), "softplus", "U2")
        for spec in (k1, u1, k2, u2):
            nets.init_mlp_params(store, spec, rng)
        store.freeze()
        H1 = (dyn.field_from_mlp(k1, store, "p"), dyn.field_from_mlp(u1, store, "q"))
        H2 = (dyn.field_from_mlp(k2, store, "p"), dyn.field_from_mlp(u2, store, "q"))
        chain = dyn.FlowSpec([H1, H2], dt=0.3, leapfrog_steps=1)
        only1 = dyn.FlowSpec([H1], dt=0.3, leapfrog_steps=1)
        only2 = dyn.FlowSpec([H2], dt=0.3, leapfrog_steps=1)
        s = dyn.StateVector([0.4, 0.1], [-0.2, 0.7])
        manual = dyn.flow_forward(only2, dyn.flow_forward(only1, s, store), store)
        out = dyn.flow_forward(chain, s, store)
        assert np.allclose(out.flat(), manual.flat(), atol=1e-15)
        back = dyn.flow_inverse(chain, out, store)
        assert np.allclose(back.flat(), s.flat(), atol=1e-12)


class TestJacobianDeterminant:
    def test_identity_flow(self):
        K0 = dyn.constant_field(2, 0.0, "K")
        U0 = dyn.constant_field(2, 0.0, "U")
        flow = dyn.FlowSpec([(K0, U0)], dt=0.5, leapfrog_steps=2)
        det = dyn.jacobian_determinant_check(flow, dyn.StateVector([0.1, 0.2], [0.3, 0.4]))
        assert det == pytest.approx(1.0, abs=1e-9)

    def test_harmonic(self):
        K, U = harmonic_1d()
        flow = dyn.FlowSpec([(K, U)], dt=0.1, leapfrog_steps=2)
        det = dyn.jacobian_determinant_check(flow, dyn.StateVector([1.0], [0.0]))
        assert abs(det - 1.0) < 1e-6

    def test_learned_networks(self):
        model = random_flow_model(seed=9, widths=(16, 16))
        rng = np.random.default_rng(2)
        for _ in range(5):
            s = dyn.StateVector(rng.normal(size=2), rng.normal(size=2))
            det = dyn.jacobian_determinant_check(model.flow, s, model.store)
            assert abs(det - 1.0) < 1e-5


class TestConservationAndSymplecticity:
    def test_angular_momentum_conserved_central_force(self):
        # radial kicks and drifts preserve q x p exactly; only roundoff drifts
        K = dyn.quadratic_kinetic(2)
        for U in (dyn.harmonic_potential(2),
                  dyn.central_potential(2, lambda r2: 0.25 * ad.square(r2))):
            flow = dyn.FlowSpec([(K, U)], dt=0.1, leapfrog_steps=1)
            g = sym.so2_generator()
            drift = sym.noether_drift(g, flow, dyn.StateVector([1.0, 0.0], [0.0, 1.0]), 100)
            assert drift < 1e-12

    def test_energy_bounded_long_run(self):
        # no secular growth beyond 10x the early error over 1e4 steps
        K, U = harmonic_1d()
        H = dyn.hamiltonian_field(K, U)
        flow = dyn.FlowSpec([(K, U)], dt=0.1, leapfrog_steps=1)
        prog = flow._program("fwd", None)
        q, p = np.array([1.0]), np.array([0.0])
        h0 = H.value(dyn.StateVector(q, p))
        errs = np.empty(10_000)
        for i in range(10_000):
            q, p = prog(q, p)
            errs[i] = abs(0.5 * (q[0] ** 2 + p[0] ** 2) - h0)
        assert errs.max() <= 10 * errs[:10].max()

    def test_equivariance_residual_scaling(self):
        # r(eps, dt) = |T_g^eps T_H^dt - T_H^dt T_g^eps| shrinks by >= 1.8x
        # under halving of either parameter (rotation-invariant quartic H)
        K = dyn.quadratic_kinetic(2)
        U = dyn.central_potential(2, lambda r2: 0.25 * ad.square(r2))
        H = dyn.hamiltonian_field(K, U)
        g = sym.so2_generator()
        rng = np.random.default_rng(42)
        states = [dyn.StateVector(rng.normal(size=2), rng.normal(size=2))
                  for _ in range(20)]

        def r(eps, dt):
            vals = []
            for s in states:
                a = dyn.infinitesimal_transform(
                    g, eps, dyn.infinitesimal_transform(H, dt, s))
                b = dyn.infinitesimal_transform(
                    H, dt, dyn.infinitesimal_transform(g, eps, s))
                vals.append(max(np.abs(a.q - b.q).max(), np.abs(a.p - b.p).max()))
            return float(np.mean(vals))

        grid = [0.1, 0.05, 0.025]
        rv = {(e, d): r(e, d) for e in grid for d in grid}
        for d in grid:
            assert rv[(0.1, d)] / rv[(0.05, d)] >= 1.8
            assert rv[(0.05, d)] / rv[(0.025, d)] >= 1.8
        for e in grid:
            assert rv[(e, 0.1)] / rv[(e, 0.05)] >= 1.8
            assert rv[(e, 0.05)] / rv[(e, 0.025)] >= 1.8


def test_trajectory_and_export(tmp_path):
    K, U = harmonic_1d()
    flow = dyn.FlowSpec([(K, U)], dt=0.1, leapfrog_steps=1)
    states = dyn.trajectory(flow, dyn.StateVector([1.0], [0.0]), 5)
    assert len(states) == 6
    path = tmp_path / "traj.csv"
    dyn.write_trajectory_csv(path, flow, [dyn.StateVector([1.0], [0.0])], 5,
                             generators=[K])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "traj,step,q1,p1,H,g1"
    assert len(lines) == 7


def test_flow_numeric_failure_names_step():
    from hamflow.autodiff import NumericError

    K = dyn.quadratic_kinetic(1)
    U = dyn.ScalarField(1, lambda q, p: ad.exp(ad.dot(q, q)), name="U=e^{q^2}")
    flow = dyn.FlowSpec([(K, U)], dt=1.0, leapfrog_steps=4)
    with pytest.raises(NumericError, match="leapfrog step 0"):
        dyn.flow_forward(flow, dyn.StateVector([4.0], [0.0]))
    with pytest.raises(NumericError, match="leapfrog step"):
        dyn.flow_inverse(flow, dyn.StateVector([4.0], [0.0]))


def test_state_vector_validation():
    with pytest.raises(ContractError):
        dyn.StateVector([1.0, 2.0], [1.0])
    with pytest.raises(ContractError):
        dyn.StateVector([np.nan], [1.0])
    s = dyn.StateVector([[1.0, 2.0]], [[0.0, 1.0]])
    assert s.batched and s.d == 2
