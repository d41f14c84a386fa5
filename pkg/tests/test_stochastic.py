"""Sampling estimators: scaling formulas, unbiasedness, and the sparse-path identity."""

import numpy as np
import pytest

from symgcp.losses import get_loss
from symgcp.objective import gradient_from_derivative
from symgcp.stochastic import (
    LossEstimator,
    RejectionBudgetExhausted,
    SampledDerivative,
    SamplerConfig,
    make_gradient_source,
    sample_stratified,
    sample_uniform,
    stochastic_gradient,
)
from symgcp.losses import total_loss
from symgcp.tensors import (
    DenseTensor,
    ModePartition,
    SparseTensor,
    SymKruskal,
    densify,
    model_entries,
    reconstruct,
    sparsify,
)

from .test_tensors import random_model
from .util import random_instance


def make_sparse_instance(rng, dims=(3, 3, 3), density=0.3, loss_name="poisson"):
    mask = rng.random(dims) < density
    data = np.where(mask, rng.integers(1, 5, size=dims).astype(float), 0.0)
    x = sparsify(DenseTensor(data))
    part = ModePartition.singletons(len(dims))
    factors = [rng.uniform(0.3, 1.2, size=(d, 2)) for d in dims]
    m = SymKruskal(rng.uniform(0.5, 1.5, size=2), factors, part)
    return x, m


class TestUniformSampling:
    def test_scaling_formula(self):
        rng = np.random.default_rng(0)
        part = ModePartition.singletons(2)
        x, m = random_instance(rng, 2, part, "least-squares", rank=2, size=4)
        loss = get_loss("least-squares")
        cfg = SamplerConfig(kind="uniform", s=4, rng_seed=3)
        sd = sample_uniform(cfg, loss, x, m)
        total = 16
        assert sd.total_entries == total
        assert np.isfinite(sd.vals).all()
        # every collapsed value is multiplicity * (T/s) * deriv
        mv = model_entries(m, sd.subs)
        xv = x.data[tuple(sd.subs.T)]
        derivs = loss.deriv(xv, mv)
        counts = sd.vals / ((total / cfg.s) * derivs)
        np.testing.assert_allclose(counts, np.round(counts), atol=1e-9)
        assert np.sum(np.round(counts)) == cfg.s

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(1)
        part = ModePartition.singletons(3)
        x, m = random_instance(rng, 3, part, "least-squares")
        cfg = SamplerConfig(kind="uniform", s=10, rng_seed=42)
        loss = get_loss("least-squares")
        a = sample_uniform(cfg, loss, x, m)
        b = sample_uniform(cfg, loss, x, m)
        np.testing.assert_array_equal(a.subs, b.subs)
        np.testing.assert_array_equal(a.vals, b.vals)

    def test_unbiased_mean(self):
        # empirical mean over many batches approaches the exact derivative tensor
        rng = np.random.default_rng(2)
        x, m = make_sparse_instance(rng)
        loss = get_loss("poisson")
        from symgcp.losses import derivative_tensor

        y = derivative_tensor(loss, x, m).data
        cfg = SamplerConfig(kind="uniform", s=20)
        batches = 10000
        acc = np.zeros(x.dims)
        acc2 = np.zeros(x.dims)
        for _ in range(batches):
            sd = sample_uniform(cfg, loss, x, m, rng=rng)
            cur = np.zeros(x.dims)
            cur[tuple(sd.subs.T)] = sd.vals
            acc += cur
            acc2 += cur * cur
        mean = acc / batches
        var = acc2 / batches - mean ** 2
        se = np.sqrt(np.maximum(var, 1e-30) / batches)
        z = np.abs(mean - y) / np.maximum(se, 1e-12)
        assert np.max(z) < 5.0


class TestStratifiedSampling:
    def test_scaling_formulas(self):
        rng = np.random.default_rng(3)
        x, m = make_sparse_instance(rng, density=0.4)
        loss = get_loss("poisson")
        cfg = SamplerConfig(kind="stratified", p=5, q=9, rng_seed=11)
        sd = sample_stratified(cfg, loss, x, m)
        total, nnz = x.size, x.nnz
        mv = model_entries(m, sd.subs)
        xv = x.values_at(sd.subs)
        derivs = loss.deriv(xv, mv)
        stored = x.contains(sd.subs)
        # nonzero entries scaled by nnz/p, zeros by (T - nnz)/q
        unit = np.where(stored, nnz / cfg.p, (total - nnz) / cfg.q)
        counts = sd.vals / (unit * derivs)
        np.testing.assert_allclose(counts, np.round(counts), atol=1e-9)

    def test_zero_draws_never_hit_nonzeros(self):
        rng = np.random.default_rng(4)
        x, m = make_sparse_instance(rng, density=0.5)
        cfg = SamplerConfig(kind="stratified", p=0, q=30, rng_seed=5)
        sd = sample_stratified(cfg, get_loss("poisson"), x, m)
        assert not np.any(x.contains(sd.subs))

    def test_rejection_budget_error(self):
        # fully dense sparse tensor: no zeros to find
        rng = np.random.default_rng(5)
        data = rng.uniform(0.5, 1.0, size=(2, 2))
        x = sparsify(DenseTensor(data))
        m = random_model(rng, [2], [2], 1, scale=0.5)
        cfg = SamplerConfig(kind="stratified", p=1, q=1, max_rejection_iters=3)
        with pytest.raises(RejectionBudgetExhausted):
            sample_stratified(cfg, get_loss("least-squares"), x, m)

    def test_uncorrected_scale_flag(self):
        rng = np.random.default_rng(6)
        x, m = make_sparse_instance(rng, density=0.2)
        loss = get_loss("poisson")
        corrected = sample_stratified(
            SamplerConfig(kind="stratified", p=0, q=5, rng_seed=9), loss, x, m
        )
        uncorrected = sample_stratified(
            SamplerConfig(
                kind="stratified", p=0, q=5, rng_seed=9, uncorrected_zero_scale=True
            ),
            loss,
            x,
            m,
        )
        ratio = corrected.vals / uncorrected.vals
        np.testing.assert_allclose(ratio, (x.size - x.nnz) / (1.0 - x.nnz))

    def test_unbiased_mean(self):
        rng = np.random.default_rng(7)
        x, m = make_sparse_instance(rng, density=0.3)
        loss = get_loss("poisson")
        from symgcp.losses import derivative_tensor

        y = derivative_tensor(loss, x, m).data
        cfg = SamplerConfig(kind="stratified", p=8, q=8)
        batches = 10000
        acc = np.zeros(x.dims)
        acc2 = np.zeros(x.dims)
        for _ in range(batches):
            sd = sample_stratified(cfg, loss, x, m, rng=rng)
            cur = np.zeros(x.dims)
            cur[tuple(sd.subs.T)] = sd.vals
            acc += cur
            acc2 += cur * cur
        mean = acc / batches
        var = acc2 / batches - mean ** 2
        se = np.sqrt(np.maximum(var, 1e-30) / batches)
        z = np.abs(mean - y) / np.maximum(se, 1e-12)
        assert np.max(z) < 5.0


class TestStochasticGradient:
    def test_empty_sample_gives_regularizer_only(self):
        rng = np.random.default_rng(8)
        m = random_model(rng, [3], [2], 2)
        sd = SampledDerivative((3, 3), np.empty((0, 2), dtype=np.int64), np.zeros(0), 9, 0, 0)
        b = stochastic_gradient(sd, m, gamma=0.2)
        np.testing.assert_array_equal(b.d_lambda, np.zeros(2))
        from symgcp.objective import regularizer_gradient

        np.testing.assert_allclose(
            b.d_factors[0], regularizer_gradient(0.2, m.factors[0]), atol=1e-15
        )

    def test_single_entry_rank_one_update(self):
        rng = np.random.default_rng(9)
        part = ModePartition([(0, 1), (2,)])
        dims = (3, 3, 2)
        factors = [rng.standard_normal((3, 2)), rng.standard_normal((2, 2))]
        lam = rng.standard_normal(2)
        m = SymKruskal(lam, factors, part)
        idx = np.array([[1, 2, 0]])
        val = np.array([2.5])
        sd = SampledDerivative(dims, idx, val, 18, 1, 1)
        b = stochastic_gradient(sd, m)
        fs = m.factor_sequence()
        # hand formula: row Hadamard products of the non-target modes
        want_lambda = val[0] * fs[0][1] * fs[1][2] * fs[2][0]
        np.testing.assert_allclose(b.d_lambda, want_lambda, atol=1e-13)
        want_cell0 = np.zeros((3, 2))
        want_cell0[1] += val[0] * fs[1][2] * fs[2][0]  # mode 0 contribution
        want_cell0[2] += val[0] * fs[0][1] * fs[2][0]  # mode 1 contribution
        np.testing.assert_allclose(b.d_factors[0], want_cell0 * lam[None, :], atol=1e-13)

    def test_matches_dense_path_on_densified(self):
        rng = np.random.default_rng(10)
        part = ModePartition([(0, 3), (1, 2)])
        dims = (3, 4, 4, 3)
        factors = [rng.standard_normal((3, 3)), rng.standard_normal((4, 3))]
        m = SymKruskal(rng.standard_normal(3), factors, part)
        n_entries = 50
        raw = np.column_stack([rng.integers(0, d, size=n_entries) for d in dims])
        keys = np.ravel_multi_index(raw.T, dims)
        _, first = np.unique(keys, return_index=True)
        subs = raw[first]
        vals = rng.standard_normal(subs.shape[0])
        vals[:3] = 0.0  # sampled estimates may contain exact zeros
        sd = SampledDerivative(dims, subs, vals, int(np.prod(dims)), 10, n_entries)
        for gamma in (0.0, 0.1):
            sparse_b = stochastic_gradient(sd, m, gamma=gamma)
            dense_b = gradient_from_derivative(sd.densify(), m, gamma=gamma)
            np.testing.assert_allclose(sparse_b.d_lambda, dense_b.d_lambda, rtol=1e-12, atol=1e-12)
            for a, c in zip(sparse_b.d_factors, dense_b.d_factors):
                np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)

    def test_gradient_source_draws_fresh_samples(self):
        rng = np.random.default_rng(11)
        x, m = make_sparse_instance(rng)
        cfg = SamplerConfig(kind="stratified", p=4, q=4, rng_seed=1)
        src = make_gradient_source(cfg, get_loss("poisson"), x)
        a = src(m)
        b = src(m)
        assert not np.allclose(a.d_lambda, b.d_lambda)


class TestLossEstimator:
    def test_exhaustive_equals_exact(self):
        rng = np.random.default_rng(12)
        x, m = make_sparse_instance(rng)
        loss = get_loss("poisson")
        est = LossEstimator.exhaustive(loss, x)
        exact = total_loss(loss, x, m)
        assert est.estimate(m) == pytest.approx(exact, rel=1e-12)

    def test_perfect_fit_least_squares_zero(self):
        rng = np.random.default_rng(13)
        m = random_model(rng, [3], [3], 2)
        x = reconstruct(m)
        est = LossEstimator.exhaustive(get_loss("least-squares"), x)
        assert est.estimate(m) == pytest.approx(0.0, abs=1e-18)

    def test_deterministic_given_fixed_set(self):
        rng = np.random.default_rng(14)
        x, m = make_sparse_instance(rng)
        cfg = SamplerConfig(kind="stratified", p=5, q=5, rng_seed=2)
        est = LossEstimator.sampled(cfg, get_loss("poisson"), x)
        assert est.estimate(m) == est.estimate(m)

    def test_mean_over_fresh_sets_near_exact(self):
        rng = np.random.default_rng(15)
        x, m = make_sparse_instance(rng)
        loss = get_loss("poisson")
        exact = total_loss(loss, x, m)
        cfg = SamplerConfig(kind="stratified", p=6, q=6)
        vals = []
        for _ in range(3000):
            est = LossEstimator.sampled(cfg, loss, x, size_factor=1, rng=rng)
            vals.append(est.estimate(m))
        vals = np.array(vals)
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - exact) < 4 * se


class TestSamplerConfigValidation:
    def test_bad_kind(self):
        with pytest.raises(ValueError):
            SamplerConfig(kind="leverage")

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            SamplerConfig(kind="uniform", s=0)
        with pytest.raises(ValueError):
            SamplerConfig(kind="stratified", p=0, q=0)
