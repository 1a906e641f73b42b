import math

import numpy as np
import pytest
import scipy.sparse as sp

from spde_velocity.spde_sim import (Grid, ModelError, ModelSpec, PathRecorder, PathWriter, SolutionPath, Stepper,
                                    build_operator, default_burn_in, difference_operators, grid_for, run_batch,
                                    simulate, stationary_warmup)


def heat(a=1.0, T=0.1, dim=1, **kw):
    return ModelSpec.from_dict({"a": a, "T": T, "dim": dim, **kw})


def figure_model(T=0.01):
    return ModelSpec.from_dict({"a": 1.0, "T": T, "theta": {"family": "polynomial",
                                                            "coefficients": [-0.3, 0.0, 1.5]}})


class TestModelSpec:
    @pytest.mark.parametrize("bad", [{"a": 0.0, "T": 1.0}, {"a": 1.0, "T": -1.0},
                                     {"a": 1.0, "T": 1.0, "dim": 3}, {"a": 1.0, "T": 1.0, "x0_mode": "random"}])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ModelError):
            ModelSpec.from_dict(bad)

    def test_stationary_requires_damping(self):
        # c - div theta = -3x reaches 0 at x = 0
        with pytest.raises(ModelError):
            ModelSpec.from_dict({"a": 1.0, "T": 1.0, "x0_mode": "stationary_warmup",
                                 "theta": {"family": "polynomial", "coefficients": [-0.3, 0.0, 1.5]}})

    def test_stationary_accepts_damped_and_relaxed(self):
        m = ModelSpec.from_dict({"a": 1.0, "T": 1.0, "c": -1.0, "x0_mode": "stationary_warmup"})
        assert m.check_gamma() == pytest.approx(-1.0)
        assert default_burn_in(m) == pytest.approx(5.0)
        relaxed = ModelSpec.from_dict({"a": 1.0, "T": 0.2, "x0_mode": "stationary_warmup"})
        assert relaxed.check_gamma() is None
        assert default_burn_in(relaxed) == pytest.approx(1.0)

    def test_gamma_check_bound_enforced(self):
        with pytest.raises(ModelError):
            ModelSpec.from_dict({"a": 1.0, "T": 1.0, "c": -1.0, "gamma_check": -2.0,
                                 "x0_mode": "stationary_warmup"})

    def test_dict_roundtrip(self):
        m = figure_model()
        back = ModelSpec.from_dict(m.to_dict())
        x = np.linspace(0, 1, 5)[:, None]
        np.testing.assert_array_equal(back.theta.value(x), m.theta.value(x))
        assert back.a == m.a and back.T == m.T


class TestGrid:
    def test_spacings(self):
        g = Grid(1, 7, 10, 0.5)
        assert g.dx == pytest.approx(0.125)
        assert g.dt == pytest.approx(0.05)
        np.testing.assert_allclose(g.axis, np.arange(1, 8) / 8)
        assert g.times[-1] == pytest.approx(0.5)

    @pytest.mark.parametrize("args", [(1, 2, 10, 1.0), (1, 7, 0, 1.0), (1, 7, 10, 1.0, 0.3)])
    def test_rejects_invalid(self, args):
        with pytest.raises(ModelError):
            Grid(*args)

    def test_nodes_2d_row_major(self):
        g = Grid(2, 3, 1, 1.0)
        nodes = g.nodes
        assert nodes.shape == (9, 2)
        np.testing.assert_allclose(nodes[1], [0.25, 0.5])
        np.testing.assert_allclose(nodes[3], [0.5, 0.25])

    def test_grid_for_resolution_rule(self):
        g = grid_for(2**-5, 1.0, 0.01, ratio=8, time_resolution=0.002, a=1.0)
        assert g.M == 255
        assert 2**-5 / g.dx >= 8
        assert g.n_t == 5120
        assert grid_for(0.25, 1.0, 0.01).n_t == 2000


class TestOperator:
    def test_pure_laplacian_m3(self):
        g = Grid(1, 3, 1, 1.0)
        A = build_operator(heat(a=2.0), g).toarray()
        expected = 2.0 / g.dx**2 * np.array([[-2, 1, 0], [1, -2, 1], [0, 1, -2]])
        np.testing.assert_allclose(A, expected, rtol=1e-14)

    def test_constant_velocity_asymmetry(self):
        g = Grid(1, 9, 1, 1.0)
        v = 0.7
        A = build_operator(ModelSpec.from_dict({"a": 1.0, "T": 1.0, "theta": {"family": "constant", "value": v}}),
                           g).toarray()
        np.testing.assert_allclose(np.diag(A, 1) - np.diag(A, -1), v / g.dx, rtol=1e-13)
        np.testing.assert_allclose(np.diag(A, 1) - 1 / g.dx**2, v / (2 * g.dx), rtol=1e-13)

    def test_eigenvalues_m7(self):
        g = Grid(1, 7, 1, 1.0)
        a = 1.3
        ev = np.sort(np.linalg.eigvalsh(build_operator(heat(a=a), g).toarray()))
        k = np.arange(1, 8)
        expected = np.sort(-(4 * a / g.dx**2) * np.sin(k * np.pi * g.dx / 2) ** 2)
        np.testing.assert_allclose(ev, expected, rtol=1e-12)

    def test_reaction_on_diagonal(self):
        g = Grid(1, 5, 1, 1.0)
        A0 = build_operator(heat(), g).toarray()
        A1 = build_operator(heat(c={"family": "polynomial", "coefficients": [0.0, 2.0]}), g).toarray()
        np.testing.assert_allclose(A1 - A0, np.diag(2.0 * g.axis), atol=1e-12)

    def test_2d_kronecker(self):
        g = Grid(2, 4, 1, 1.0)
        L, grads = difference_operators(g)
        L1, (G1,) = difference_operators(Grid(1, 4, 1, 1.0))
        f = np.outer(np.sin(np.pi * g.axis), g.axis**2).ravel()
        F = f.reshape(4, 4)
        np.testing.assert_allclose(L @ f, (L1 @ F + F @ L1.T).ravel(), rtol=1e-12)
        np.testing.assert_allclose(grads[0] @ f, (G1 @ F).ravel(), rtol=1e-12)
        np.testing.assert_allclose(grads[1] @ f, (F @ G1.T).ravel(), rtol=1e-12)

    def test_centred_difference_antisymmetric(self):
        _, (G,) = difference_operators(Grid(1, 11, 1, 1.0))
        assert abs(G + G.T).max() == 0


class TestHeatOracle:
    def test_deterministic_decay_1d(self):
        g = Grid(1, 255, 1000, 0.1)
        x = g.axis
        path = simulate(heat(), g, seed=0, noise=False, x0=np.sin(np.pi * x))
        exact = np.exp(-np.pi**2 * 0.1) * np.sin(np.pi * x)
        err = np.linalg.norm(path.values[-1] - exact) / np.linalg.norm(exact)
        assert err < 0.01

    def test_crank_nicolson_is_second_order(self):
        x0 = None
        errs = []
        for n_t in (50, 100):
            g = Grid(1, 127, n_t, 0.1, implicitness=0.5)
            x0 = np.sin(np.pi * g.axis)
            path = simulate(heat(), g, seed=0, noise=False, x0=x0)
            lam = -(4 / g.dx**2) * np.sin(np.pi * g.dx / 2) ** 2  # discrete eigenvalue
            errs.append(np.abs(path.values[-1] - np.exp(lam * 0.1) * x0).max())
        assert math.log2(errs[0] / errs[1]) == pytest.approx(2.0, abs=0.1)

    def test_deterministic_decay_2d(self):
        g = Grid(2, 63, 400, 0.05)
        nodes = g.nodes
        x0 = np.sin(np.pi * nodes[:, 0]) * np.sin(np.pi * nodes[:, 1])
        path = simulate(heat(dim=2, T=0.05), g, seed=0, noise=False, x0=x0)
        exact = np.exp(-2 * np.pi**2 * 0.05) * x0
        assert np.linalg.norm(path.values[-1] - exact) / np.linalg.norm(exact) < 0.01


class TestDeterminismAndBatching:
    def test_same_seed_bit_identical(self):
        g = Grid(1, 31, 50, 0.01)
        a = simulate(figure_model(), g, seed=123)
        b = simulate(figure_model(), g, seed=123)
        assert a.values.tobytes() == b.values.tobytes()
        c = simulate(figure_model(), g, seed=124)
        assert not np.array_equal(a.values, c.values)

    def test_batch_composition_invariant(self):
        g = Grid(1, 31, 70, 0.01, implicitness=0.5)
        m = figure_model()
        seeds = [5, 17, 2**63 + 9]
        together = run_batch(m, g, seeds)
        for r, s in enumerate(seeds):
            alone = run_batch(m, g, [s])
            np.testing.assert_array_equal(together[:, r], alone[:, 0])

    def test_boundary_is_zero(self):
        g = Grid(1, 15, 20, 0.01)
        path = simulate(figure_model(), g, seed=1)
        for j in (0, 7, 20):
            full = path.full_field(j)
            assert full.shape == (17,)
            assert full[0] == 0.0 and full[-1] == 0.0
        g2 = Grid(2, 7, 5, 0.01)
        p2 = simulate(heat(dim=2, T=0.01), g2, seed=1)
        full = p2.full_field(5)
        assert full.shape == (9, 9)
        assert np.all(full[0] == 0) and np.all(full[-1] == 0) and np.all(full[:, 0] == 0) and np.all(full[:, -1] == 0)

    def test_linearity(self):
        g = Grid(1, 63, 40, 0.02)
        m = figure_model(T=0.02)
        f = np.sin(3 * np.pi * g.axis)
        gg = g.axis * (1 - g.axis)
        both = simulate(m, g, seed=9, x0=f + gg).values
        noisy = simulate(m, g, seed=9, x0=f).values
        clean = simulate(m, g, seed=9, x0=gg, noise=False).values
        np.testing.assert_allclose(both, noisy + clean, atol=1e-10)

    def test_initial_state_matches_mode(self):
        g = Grid(1, 15, 4, 0.01)
        assert np.all(simulate(figure_model(), g, seed=3).values[0] == 0)
        m = heat(T=0.01).replace(x0_mode="explicit_field", x0_field=lambda p: p[:, 0] ** 2)
        np.testing.assert_array_equal(simulate(m, g, seed=3).values[0], g.axis**2)

    def test_rejects_horizon_mismatch(self):
        with pytest.raises(ModelError):
            run_batch(heat(T=1.0), Grid(1, 7, 3, 0.5), [1])


class TestNoise:
    @pytest.mark.parametrize("M", [15, 31, 63])
    def test_one_step_variance(self, M):
        g = Grid(1, M, 1, 1e-6)
        X = run_batch(heat(T=1e-6), g, list(range(3000)))
        target = g.dt / g.dx * (1 - 2 * g.dt / g.dx**2)  # first order in dt
        var = np.mean(X[M // 4: 3 * M // 4] ** 2)
        assert var == pytest.approx(target, rel=0.1)

    def test_stationary_variance_crank_nicolson(self):
        # CN preserves the discrete OU variance 1/(2|lambda|) per mode exactly
        g = Grid(1, 31, 1, 0.05, implicitness=0.5)
        m = heat(T=0.05, c=-1.0)
        stepper = Stepper(m, g)
        A = build_operator(m, g).toarray()
        P = np.linalg.solve(np.eye(31) - 0.5 * g.dt * A, np.eye(31) + 0.5 * g.dt * A)
        Q = np.linalg.solve(np.eye(31) - 0.5 * g.dt * A, np.eye(31))
        C = np.zeros((31, 31))
        for _ in range(2000):
            C = P @ C @ P.T + g.dt / g.dx * Q @ Q.T
        # continuous-time stationary covariance solves A C + C A^T = -I/dx
        ref = -np.linalg.inv(A) / (2 * g.dx)
        np.testing.assert_allclose(C, ref, rtol=1e-8, atol=1e-12)
        assert stepper.explicit is not None


class TestStationaryWarmup:
    def test_zero_burn_in(self):
        g = Grid(1, 15, 10, 0.1)
        m = heat(c=-1.0, x0_mode="stationary_warmup")
        np.testing.assert_array_equal(stationary_warmup(m, g, seed=1, burn_in=0.0), 0.0)

    def test_ou_mode_variance(self):
        g = Grid(1, 63, 10, 0.01)
        m = heat(T=0.01, c=-1.0, x0_mode="stationary_warmup")
        rec = PathRecorder(every=100)
        run_batch(m, g, list(range(500)), [rec])
        X0 = rec.values()[:, 0]
        coef = X0 @ (math.sqrt(2) * np.sin(np.pi * g.axis)) * g.dx
        assert np.var(coef) == pytest.approx(1 / (2 * (np.pi**2 + 1)), rel=0.1)

    def test_default_burn_in_saturates(self):
        # exact covariance recursion of the implicit scheme from zero
        g = Grid(1, 31, 100, 0.1)
        m = heat(c=-1.0, x0_mode="stationary_warmup")
        A = build_operator(m, g).toarray()
        P = np.linalg.inv(np.eye(31) - g.dt * A)
        Q = g.dt / g.dx * P @ P.T

        def var_after(t):
            C = np.zeros((31, 31))
            for _ in range(int(round(t / g.dt))):
                C = P @ C @ P.T + Q
            return np.diag(C)

        base = default_burn_in(m)
        np.testing.assert_allclose(var_after(2 * base), var_after(base), rtol=0.02)

    def test_matches_batched_warmup(self):
        g = Grid(1, 15, 10, 0.1)
        m = heat(c=-1.0, x0_mode="stationary_warmup")
        rec = PathRecorder(every=10)
        run_batch(m, g, [77, 78], [rec], burn_in=0.3)
        np.testing.assert_array_equal(rec.values()[1, 0], stationary_warmup(m, g, 78, burn_in=0.3))

    def test_variance_flat_in_time(self):
        from spde_velocity.measurements import MeasurementConfig, measurement_operator
        g = Grid(1, 63, 200, 0.1)
        m = heat(T=0.1, x0_mode="stationary_warmup")
        cfg = MeasurementConfig(0.125, [[0.5]])
        phi0 = measurement_operator(cfg, g)[:1]
        vals = {}

        class Probe:
            def start(self, grid, n_rep):
                pass

            def observe(self, j, X):
                if j in (0, 100, 200):
                    vals[j] = np.asarray(phi0 @ X)[0]

        run_batch(m, g, list(range(200)), [Probe()])
        v0 = np.var(vals[0])
        for j in (100, 200):
            assert np.var(vals[j]) == pytest.approx(v0, rel=0.15)


class TestPathIO:
    def test_dump_roundtrip(self, tmp_path):
        g = Grid(1, 15, 12, 0.01)
        path = simulate(figure_model(), g, seed=2**64 - 5)
        f = tmp_path / "p.bin"
        path.dump(f)
        back = SolutionPath.load(f)
        assert back.seed == 2**64 - 5
        assert back.grid == Grid(1, 15, 12, 0.01)
        np.testing.assert_array_equal(back.values, path.values)
        assert f.stat().st_size == 40 + 8 * 13 * 15

    def test_header_layout(self, tmp_path):
        import struct
        g = Grid(2, 5, 3, 0.25)
        path = simulate(heat(dim=2, T=0.25), g, seed=42)
        f = tmp_path / "p.bin"
        path.dump(f)
        raw = f.read_bytes()
        assert struct.unpack("<qqqdQ", raw[:40]) == (2, 5, 3, 0.25, 42)
        np.testing.assert_array_equal(np.frombuffer(raw[40:], "<f8").reshape(4, 25), path.values)

    def test_streaming_writer_matches_dump(self, tmp_path):
        g = Grid(1, 15, 12, 0.01)
        m = figure_model()
        run_batch(m, g, [31, 32], [PathWriter(tmp_path / "w.bin", 32, column=1)])
        simulate(m, g, seed=32).dump(tmp_path / "d.bin")
        assert (tmp_path / "w.bin").read_bytes() == (tmp_path / "d.bin").read_bytes()
