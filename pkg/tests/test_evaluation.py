import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from iclebm.datagen import GaussianMixtureTask, TaskPrior, sample_sequence, sample_task
from iclebm.evaluation import (
    EnergyGrid,
    GridSpec,
    SharpeningReport,
    UndefinedCorrelationError,
    energy_landscape,
    grid_log_density,
    grid_log_partition,
    landscape_agreement,
    sample_quality,
    sample_quality_stats,
    sharpening_curve,
    spearman_rho,
    write_grid_csv,
    write_grid_pgm,
    write_report_csv,
)
from iclebm.model import ModelConfig, init_params
from iclebm.sampler import LangevinConfig, sample_initial
from stubs import ContextMeanEnergy, MixtureEnergy, QuadraticEnergy

TINY = ModelConfig(num_layers=2, num_heads=4, d_model=16, max_seq_len=16)


def quadratic_grid(lo=-8.0, hi=8.0, n=256):
    spec = GridSpec((lo, hi), (lo, hi), (n, n))
    return EnergyGrid(spec, 0.5 * (spec.points() ** 2).sum(-1))


class TestGridSpec:
    def test_cell_centres(self):
        spec = GridSpec((0.0, 4.0), (-1.0, 1.0), (4, 2))
        xs, ys = spec.axes()
        np.testing.assert_allclose(xs, [0.5, 1.5, 2.5, 3.5])
        np.testing.assert_allclose(ys, [-0.5, 0.5])
        assert spec.cell_area == 1.0
        assert spec.points().shape == (4, 2, 2)

    def test_invalid(self):
        with pytest.raises(ValueError):
            GridSpec(resolution=(1, 4))
        with pytest.raises(ValueError):
            GridSpec(x_bounds=(1.0, 0.0))


class TestEnergyLandscape:
    def test_shape(self):
        model = init_params(TINY, seed=0)
        grid = energy_landscape(model, np.zeros((3, 2)), GridSpec(resolution=(64, 64)))
        assert grid.values.shape == (64, 64)

    def test_empty_context(self):
        model = init_params(TINY, seed=0)
        spec = GridSpec(resolution=(8, 8))
        grid = energy_landscape(model, np.zeros((0, 2)), spec)
        direct = model.forward_energies(torch.as_tensor(spec.points().reshape(-1, 1, 2)))[:, 0]
        np.testing.assert_allclose(grid.values.ravel(), direct.detach().numpy(), rtol=0, atol=1e-12)

    def test_quadratic_stub(self):
        spec = GridSpec(resolution=(32, 32))
        grid = energy_landscape(QuadraticEnergy(), np.ones((4, 2)), spec)
        np.testing.assert_allclose(grid.values, 0.5 * (spec.points() ** 2).sum(-1), rtol=0, atol=1e-12)

    def test_parameters_untouched(self):
        model = init_params(TINY, seed=0)
        before = [p.detach().clone() for p in model.parameters()]
        energy_landscape(model, np.random.default_rng(0).normal(size=(5, 2)), GridSpec(resolution=(16, 16)))
        assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))
        assert all(p.grad is None for p in model.parameters())

    def test_context_too_long(self):
        with pytest.raises(ValueError, match="too long"):
            energy_landscape(init_params(TINY), np.zeros((16, 2)))


class TestPartition:
    def test_constant(self):
        spec = GridSpec((-2.0, 3.0), (0.0, 4.0), (10, 7))
        grid = EnergyGrid(spec, np.full((10, 7), 1.7))
        assert grid_log_partition(grid) == pytest.approx(math.log(20.0) - 1.7, abs=1e-12)

    def test_gaussian_integral(self):
        assert grid_log_partition(quadratic_grid()) == pytest.approx(math.log(2 * math.pi), abs=1e-3)
        assert math.log(2 * math.pi) == pytest.approx(1.837877, abs=1e-6)

    def test_shift(self):
        grid = quadratic_grid(n=64)
        shifted = EnergyGrid(grid.spec, grid.values + 3.25)
        assert grid_log_partition(shifted) == pytest.approx(grid_log_partition(grid) - 3.25, abs=1e-12)

    def test_no_overflow(self):
        grid = quadratic_grid(n=32)
        low = EnergyGrid(grid.spec, grid.values - 2000.0)
        assert grid_log_partition(low) == pytest.approx(grid_log_partition(grid) + 2000.0, abs=1e-9)

    def test_resolution_convergence(self):
        a = grid_log_partition(quadratic_grid(n=128))
        b = grid_log_partition(quadratic_grid(n=256))
        assert abs(a - b) < 1e-3


class TestLogDensity:
    def test_normalizes(self):
        for grid in (quadratic_grid(n=64), quadratic_grid(-3, 5, 50)):
            total = np.exp(grid_log_density(grid)).sum() * grid.spec.cell_area
            assert abs(total - 1.0) < 1e-12

    def test_constant_is_uniform(self):
        spec = GridSpec((0.0, 2.0), (0.0, 5.0), (4, 5))
        dens = np.exp(grid_log_density(EnergyGrid(spec, np.full((4, 5), -3.0))))
        np.testing.assert_allclose(dens, 1 / 10.0, rtol=1e-12)

    def test_standard_normal(self):
        grid = quadratic_grid()
        pts = grid.spec.points()
        inner = np.all(np.abs(pts) < 4, axis=-1)
        expected = -math.log(2 * math.pi) - 0.5 * (pts ** 2).sum(-1)
        np.testing.assert_allclose(grid_log_density(grid)[inner], expected[inner], atol=1e-3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-50, 50))
    def test_normalizes_random(self, seed, offset):
        vals = np.random.default_rng(seed).normal(scale=5, size=(9, 11)) + offset
        grid = EnergyGrid(GridSpec(resolution=(9, 11)), vals)
        assert abs(np.exp(grid_log_density(grid)).sum() * grid.spec.cell_area - 1) < 1e-12


class TestSpearman:
    def test_monotone(self):
        a = np.random.default_rng(0).normal(size=50)
        assert spearman_rho(a, 2 * a + 3) == pytest.approx(1.0, abs=1e-15)
        assert spearman_rho(a, -a) == pytest.approx(-1.0, abs=1e-15)

    def test_hand_computed(self):
        # 1 - 6 * sum(d^2) / (n (n^2 - 1)) with sum(d^2) = 2, n = 4
        assert spearman_rho([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(1 - 6 * 2 / (4 * 15))
        assert spearman_rho([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)

    def test_ties_match_scipy(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, 5, size=40).astype(float)
        b = a + rng.integers(0, 3, size=40)
        assert spearman_rho(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)

    def test_undefined(self):
        with pytest.raises(UndefinedCorrelationError):
            spearman_rho([1, 1, 1, 1], [1, 2, 3, 4])

    def test_bad_input(self):
        with pytest.raises(ValueError):
            spearman_rho([1, 2], [1, 2])
        with pytest.raises(ValueError):
            spearman_rho([1, 2, 3], [1, 2, 3, 4])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=40, unique=True), st.integers(0, 1000))
    def test_invariant_under_increasing_transform(self, a, seed):
        # distinct integers keep both transforms strictly increasing in floating point
        a = np.array(a, dtype=float)
        b = np.random.default_rng(seed).permutation(a)
        base = spearman_rho(a, b)
        assert spearman_rho(np.exp(a / 1e3), b) == pytest.approx(base, abs=1e-12)
        assert spearman_rho(a, b ** 3 + 7) == pytest.approx(base, abs=1e-12)
        assert -1.0 <= base <= 1.0


class TestAgreement:
    task = sample_task(TaskPrior(), seed=3)

    def test_perfect(self):
        ctx = sample_sequence(self.task, 4, seed=0)
        assert landscape_agreement(MixtureEnergy(self.task, 1.0, 5.0), self.task, ctx) == pytest.approx(1.0)

    def test_inverted(self):
        ctx = sample_sequence(self.task, 4, seed=0)
        assert landscape_agreement(MixtureEnergy(self.task, -1.0), self.task, ctx) == pytest.approx(-1.0)

    def test_sharpening_shape(self):
        ctx = sample_sequence(self.task, 4, seed=0)
        rep = sharpening_curve(init_params(TINY, seed=0), self.task, ctx, (1, 2), GridSpec(resolution=(16, 16)))
        assert isinstance(rep, SharpeningReport)
        assert rep.context_lengths == [1, 2] and len(rep.spearman_rho) == 2

    def test_context_free_is_flat(self):
        ctx = sample_sequence(self.task, 8, seed=0)
        rep = sharpening_curve(QuadraticEnergy(), self.task, ctx, (0, 2, 8), GridSpec(resolution=(16, 16)))
        assert max(rep.spearman_rho) - min(rep.spearman_rho) < 1e-12

    def test_context_dependent(self):
        ctx = sample_sequence(self.task, 8, seed=0)
        rep = sharpening_curve(ContextMeanEnergy(), self.task, ctx, (1, 8), GridSpec(resolution=(16, 16)))
        assert rep.spearman_rho[0] != rep.spearman_rho[1]

    def test_lengths_validation(self):
        ctx = sample_sequence(self.task, 4, seed=0)
        with pytest.raises(ValueError, match="ascending"):
            sharpening_curve(QuadraticEnergy(), self.task, ctx, (2, 1))
        with pytest.raises(ValueError, match="exceeds"):
            sharpening_curve(QuadraticEnergy(), self.task, ctx, (2, 5))


class TestSampleQuality:
    def test_mode_beats_uniform(self):
        task = sample_task(TaskPrior(), seed=0)
        samples = np.repeat(task.means[:1], 10, axis=0)
        assert sample_quality(samples, task, 1000, seed=0) > 0

    def test_null(self):
        task = sample_task(TaskPrior(), seed=1)
        samples = sample_initial(LangevinConfig(), (1000, 2), seed=77).numpy()
        gain, se = sample_quality_stats(samples, task, 1000, seed=0)
        assert abs(gain) < 3 * se

    def test_analytic_gap(self):
        mu, s = np.array([1.0, -2.0]), 0.3
        task = GaussianMixtureTask([mu], [s], [1.0])
        # uniform reference on [-6, 6]^2: E||x - mu||^2 = 2 * 144 / 12 + ||mu||^2
        expected = (24.0 + mu @ mu) / (2 * s ** 2)
        gain, se = sample_quality_stats(mu[None], task, 200_000, seed=0)
        assert abs(gain - expected) < 4 * se


class TestExports:
    def test_grid_csv(self, tmp_path):
        spec = GridSpec(resolution=(3, 2))
        grid = EnergyGrid(spec, np.arange(6.0).reshape(3, 2))
        write_grid_csv(grid, tmp_path / "g.csv")
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0] == "x,y,energy" and len(lines) == 7
        # row-major: y varies fastest
        assert [float(l.split(",")[2]) for l in lines[1:]] == [0, 1, 2, 3, 4, 5]
        assert float(lines[1].split(",")[0]) == -4.0 and float(lines[2].split(",")[1]) == 3.0

    def test_grid_pgm(self, tmp_path):
        spec = GridSpec(resolution=(4, 3))
        grid = EnergyGrid(spec, np.arange(12.0).reshape(4, 3))
        write_grid_pgm(grid, tmp_path / "g.pgm")
        data = (tmp_path / "g.pgm").read_bytes()
        header = b"P5\n4 3\n255\n"
        assert data.startswith(header)
        pix = np.frombuffer(data[len(header):], dtype=np.uint8).reshape(3, 4)
        assert pix.min() == 0 and pix.max() == 255
        # top-left pixel is lowest x, highest y
        assert pix[0, 0] == round(255 * 2 / 11)

    def test_constant_pgm(self, tmp_path):
        grid = EnergyGrid(GridSpec(resolution=(2, 2)), np.ones((2, 2)))
        write_grid_pgm(grid, tmp_path / "c.pgm")
        assert (tmp_path / "c.pgm").read_bytes().endswith(bytes(4))

    def test_report_csv(self, tmp_path):
        reps = [SharpeningReport([2, 8], [0.1, 0.5], 0), SharpeningReport([2, 8], [0.2, 0.6], 1)]
        write_report_csv(reps, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines == ["task_id,context_length,spearman_rho", "0,2,0.1", "0,8,0.5", "1,2,0.2", "1,8,0.6"]
