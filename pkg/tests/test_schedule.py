import numpy as np
import pytest

from cebench.denoiser import AnalyticDenoiser
from cebench.errors import OrderingError, ParameterError, ShapeError
from cebench.prompts import make_prompt, null_prompt
from cebench.schedule import (
    Latent,
    NoiseSchedule,
    add_noise,
    build_linear_schedule,
    ddim_inv_process,
    ddim_inv_step,
    ddim_process,
    ddim_step,
)


def toy_sched(alpha_bar, T=None):
    """Schedule stub with a prescribed cumulative-alpha table."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    T = T if T is not None else len(ab) - 1
    return NoiseSchedule(T, np.zeros(T), ab, np.arange(T)[::-1].copy())


class TestBuild:
    def test_sd_style_grid(self):
        s = build_linear_schedule(1000, 1e-4, 0.02, 50)
        assert len(s.inference_grid) == 50
        assert s.inference_grid[0] == 980
        assert s.inference_grid[-1] == 0
        assert np.all(np.diff(s.inference_grid) < 0)

    def test_two_step_cumprod(self):
        s = build_linear_schedule(2, 0.5, 0.5, 2)
        np.testing.assert_allclose(s.alpha_bar, [1.0, 0.5, 0.25])

    def test_alpha_bar_strictly_decreasing(self):
        for T, b0, b1, n in [(100, 1e-4, 0.02, 10), (50, 0.3, 0.9, 5), (1000, 1e-4, 0.02, 50)]:
            s = build_linear_schedule(T, b0, b1, n)
            assert np.all(np.diff(s.alpha_bar) < 0)
            assert s.alpha_bar[0] == 1.0
            assert np.all((s.inference_grid >= 0) & (s.inference_grid < T))

    def test_invalid_bounds(self):
        with pytest.raises(ParameterError):
            build_linear_schedule(10, 0.0, 0.02, 5)
        with pytest.raises(ParameterError):
            build_linear_schedule(10, 0.1, 0.02, 5)
        with pytest.raises(ParameterError):
            build_linear_schedule(4, 1e-4, 0.02, 5)
        with pytest.raises(ParameterError):
            build_linear_schedule(10, 1e-4, 0.02, 1)


class TestAddNoise:
    def test_identity_at_alpha_one(self):
        s = toy_sched([1.0, 0.5])
        x0 = Latent(np.full((1, 2, 2), 0.3, dtype=np.float32), 0)
        eps = np.ones((1, 2, 2), dtype=np.float32)
        out = add_noise(x0, 0, eps, s)
        np.testing.assert_array_equal(out.data, x0.data)

    def test_pure_noise_at_alpha_zero_limit(self):
        s = toy_sched([1.0, 1e-16])
        x0 = Latent(np.full((1, 2, 2), 0.3, dtype=np.float32), 0)
        eps = np.full((1, 2, 2), 2.0, dtype=np.float32)
        out = add_noise(x0, 1, eps, s)
        np.testing.assert_allclose(out.data, eps, rtol=1e-6)

    def test_scalar_forward_map(self):
        # x0 = 1, eps = 1, abar = 0.25: x_t = 0.5 + sqrt(0.75)
        s = toy_sched([1.0, 0.25])
        out = add_noise(Latent(np.ones((1, 1, 1)), 0), 1, np.ones((1, 1, 1)), s)
        assert out.data[0, 0, 0] == pytest.approx(0.5 + np.sqrt(0.75), abs=1e-5)

    def test_shape_mismatch(self):
        s = toy_sched([1.0, 0.5])
        with pytest.raises(ShapeError):
            add_noise(Latent(np.ones((1, 2, 2)), 0), 1, np.ones((1, 3, 3)), s)


class TestSteps:
    def test_scalar_ddim_step(self):
        s = toy_sched([1.0, 0.8, 0.5])  # abar[2]=0.5 (current), abar[1]=0.8 (previous)
        out = ddim_step(Latent(np.ones((1, 1, 1)), 2), np.ones((1, 1, 1)), 2, 1, s)
        # independently: sqrt(0.8/0.5)(1 - sqrt(0.5)) + sqrt(0.2)
        want = np.sqrt(0.8 / 0.5) * (1 - np.sqrt(1 - 0.5)) + np.sqrt(1 - 0.8)
        assert out.data[0, 0, 0] == pytest.approx(want, abs=1e-5)
        assert out.data[0, 0, 0] == pytest.approx(0.81770, abs=1e-5)

    def test_scalar_inverse_of_step(self):
        s = toy_sched([1.0, 0.8, 0.5])
        x = Latent(np.array([[[0.8177002]]]), 1)
        out = ddim_inv_step(x, np.ones((1, 1, 1)), 1, 2, s)
        assert out.data[0, 0, 0] == pytest.approx(1.0, abs=1e-5)

    def test_zero_eps_pure_rescale(self):
        s = toy_sched([1.0, 0.25])
        x = Latent(np.full((1, 2, 2), 0.7, dtype=np.float64), 1)
        out = ddim_step(x, np.zeros((1, 2, 2)), 1, 0, s)
        np.testing.assert_allclose(out.data, 2 * x.data, rtol=1e-12)

    def test_ordering_errors(self):
        s = toy_sched([1.0, 0.5, 0.3])
        x = Latent(np.ones((1, 1, 1)), 1)
        with pytest.raises(OrderingError):
            ddim_step(x, np.ones((1, 1, 1)), 1, 1, s)
        with pytest.raises(OrderingError):
            ddim_inv_step(x, np.ones((1, 1, 1)), 2, 1, s)

    def test_equal_alpha_identity_randomized(self):
        # 1000 randomized cases for both maps; bit-exact on float32 latents
        rng = np.random.default_rng(0)
        for _ in range(1000):
            ab = rng.uniform(0.05, 0.95)
            s = toy_sched([1.0, ab, ab])
            x = Latent(rng.normal(0, 1, (1, 3, 3)).astype(np.float32), 2)
            e = rng.normal(0, 1, (1, 3, 3)).astype(np.float32)
            fwd = ddim_step(x, e, 2, 1, s)
            np.testing.assert_array_equal(fwd.data, x.data)
            x1 = Latent(x.data, 1)
            inv = ddim_inv_step(x1, e, 1, 2, s)
            np.testing.assert_array_equal(inv.data, x.data)

    def test_inverse_pair_exactness_randomized(self):
        # fixed eps: step(inv_step(x)) == x to machine precision, 1000 cases
        rng = np.random.default_rng(1)
        for _ in range(1000):
            a = sorted(rng.uniform(0.05, 0.99, size=2))
            s = toy_sched([1.0, a[1], a[0]])  # abar[1] > abar[2]
            x = Latent(rng.normal(0, 1, (1, 3, 3)), 1)
            e = rng.normal(0, 1, (1, 3, 3))
            up = ddim_inv_step(x, e, 1, 2, s)
            back = ddim_step(up, e, 2, 1, s)
            np.testing.assert_allclose(back.data, x.data, rtol=1e-12, atol=1e-12)


def point_mass_model(mu):
    return AnalyticDenoiser([(1.0, mu, None)], sigma=0.0, latent_shape=mu.shape)


class TestProcesses:
    def test_identity_hook_bit_identical(self):
        mu = np.full((1, 2, 2), 0.5)
        model = point_mass_model(mu)
        s = build_linear_schedule(100, 1e-3, 0.02, 10)
        xT = Latent(np.random.default_rng(3).normal(0, 1, (1, 2, 2)), int(s.inference_grid[0]))
        a = ddim_process(xT, null_prompt(), model, s, guidance=1.0)
        b = ddim_process(xT, null_prompt(), model, s, guidance=1.0, hook=lambda t, x: x)
        np.testing.assert_array_equal(a.data, b.data)

    def test_two_step_point_mass_collapses_to_mode(self):
        mu = np.full((1, 2, 2), 0.5)
        model = point_mass_model(mu)
        s = build_linear_schedule(100, 1e-3, 0.02, 2)
        top = int(s.inference_grid[0])
        xT = Latent(np.sqrt(s.alpha_bar[top]) * mu, top)
        out = ddim_process(xT, null_prompt(), model, s, guidance=1.0)
        np.testing.assert_allclose(out.data, mu, atol=1e-6)
        # many-step reference agrees
        s200 = build_linear_schedule(100, 1e-3, 0.02, 50)
        xT = Latent(np.sqrt(s200.alpha_bar[int(s200.inference_grid[0])]) * mu, int(s200.inference_grid[0]))
        ref = ddim_process(xT, null_prompt(), model, s200, guidance=1.0)
        np.testing.assert_allclose(ref.data, mu, atol=1e-6)

    def test_null_cond_guidance_degenerates(self):
        mu = np.full((1, 2, 2), 0.5)
        model = point_mass_model(mu)
        s = build_linear_schedule(100, 1e-3, 0.02, 10)
        xT = Latent(np.random.default_rng(5).normal(0, 1, (1, 2, 2)), int(s.inference_grid[0]))
        a = ddim_process(xT, null_prompt(), model, s, guidance=1.0)
        b = ddim_process(xT, null_prompt(), model, s, guidance=7.5)
        np.testing.assert_array_equal(a.data, b.data)

    def test_round_trip_mse_small(self):
        rng = np.random.default_rng(7)
        comps = [(1.0, rng.normal(0, 0.5, (1, 2, 2)), None) for _ in range(3)]
        model = AnalyticDenoiser(comps, sigma=0.3, latent_shape=(1, 2, 2))
        s = build_linear_schedule(1000, 1e-4, 0.02, 200)
        x0 = Latent(comps[0][1] + 0.1 * rng.normal(0, 1, (1, 2, 2)), 0)
        xT = ddim_inv_process(x0, null_prompt(), model, s)
        assert xT.t == int(s.inference_grid[0])
        back = ddim_process(xT, null_prompt(), model, s, guidance=1.0)
        mse = np.mean((back.data - x0.data) ** 2)
        assert mse <= 1e-3

    def test_single_substep_fixed_eps_exact_inverse(self):
        class ConstEps:
            backend = "analytic"

            def __init__(self, e):
                self.e = e

            def predict_eps(self, x_t, t, cond, sched=None):
                return self.e

        rng = np.random.default_rng(11)
        e = rng.normal(0, 1, (1, 2, 2))
        model = ConstEps(e)
        s = build_linear_schedule(100, 1e-3, 0.02, 2)
        x0 = Latent(rng.normal(0, 1, (1, 2, 2)), 0)
        up = ddim_inv_process(x0, null_prompt(), model, s)
        back = ddim_process(up, null_prompt(), model, s, guidance=1.0)
        np.testing.assert_allclose(back.data, x0.data, rtol=1e-12, atol=1e-12)
