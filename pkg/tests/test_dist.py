import math

import numpy as np
import pytest
from scipy import integrate, stats

from marginals.dist import (DistributionSpec, InvalidSpecError, ModelParams, NoClosedFormError,
                            SampleMatrix, ScaledPareto, SymmetricPareto, check_assumptions,
                            exact_moment, exact_tail_moment, gaussian_abs_moment,
                            gaussian_abs_tail_moment, hill_tail_index, moment_mc_oracle,
                            sample_matrix)
from marginals.rng import Stream


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# oracles computed independently of the closed forms

def quad_gaussian_abs_moment(p, B=0.0):
    val, _ = integrate.quad(lambda u: 2 * u ** p * stats.norm.pdf(u), B, np.inf, epsabs=1e-13)
    return val


class TestSampling:
    def test_orthobasis_rows_are_scaled_basis_vectors(self):
        S = sample_matrix(DistributionSpec.orthobasis(4), 10, Stream(1))
        for row in S.rows:
            assert np.count_nonzero(row) == 1
            assert row.max() == 2.0

    def test_constant_rows_equal_v(self):
        v = [1.0, -2.0, 0.5]
        S = sample_matrix(DistributionSpec.constant(v), 7, Stream(0))
        assert np.array_equal(S.rows, np.tile(v, (7, 1)))

    @pytest.mark.parametrize("spec", [DistributionSpec.gaussian(5), DistributionSpec.orthobasis(5),
                                      DistributionSpec.iid_powerlaw(5, 3.5),
                                      DistributionSpec.multidim_pareto(5, 13.0)])
    def test_determinism(self, spec):
        a = sample_matrix(spec, 50, Stream(3).child("x"))
        b = sample_matrix(spec, 50, Stream(3).child("x"))
        assert np.array_equal(a.rows, b.rows)
        assert a.provenance == b.provenance

    def test_invalid_specs(self):
        with pytest.raises(InvalidSpecError):
            DistributionSpec.iid_powerlaw(3, 2.0)
        with pytest.raises(InvalidSpecError):
            DistributionSpec("nope", 3)
        with pytest.raises(InvalidSpecError):
            DistributionSpec("constant", 3, fixed_vector=(1.0,))
        with pytest.raises(ValueError):
            sample_matrix(DistributionSpec.gaussian(2), 0, Stream(0))

    def test_sample_matrix_is_read_only_and_finite(self):
        S = sample_matrix(DistributionSpec.gaussian(3), 4, Stream(0))
        with pytest.raises(ValueError):
            S.rows[0, 0] = 1.0
        with pytest.raises(ValueError):
            SampleMatrix(np.array([[np.inf, 0.0]]))

    @pytest.mark.parametrize("alpha", [3.0, 5.0, 13.0])
    def test_iid_powerlaw_is_standardized(self, alpha):
        law = SymmetricPareto(alpha)
        z = law.sample(np.random.default_rng(1), 400_000)
        assert abs(z.mean()) < 0.02
        assert law.abs_moment(2) == pytest.approx(1.0, rel=1e-7)
        if alpha > 4:
            assert abs(z.var() - 1) < 0.03

    def test_scaled_pareto_unit_second_moment_and_tail(self):
        law = ScaledPareto(13.0)
        assert law.abs_moment(2) == pytest.approx(1.0)
        assert law.abs_moment(13.0) == math.inf
        v, _ = integrate.quad(lambda u: u ** 3 * law.density(u), 1 / law.scale, np.inf)
        assert v == pytest.approx(law.abs_moment(3), rel=1e-7)

    def test_truncated_zeroes_rows_outside_ball(self):
        inner = DistributionSpec.multidim_pareto(4, 2.5)
        spec = DistributionSpec.truncated(inner, 1.5)
        S = sample_matrix(spec, 2000, Stream(2))
        U = sample_matrix(inner, 2000, Stream(2))
        norms = np.linalg.norm(U.rows, axis=1)
        out = norms > 1.5 * 2
        assert out.any()
        assert np.all(S.rows[out] == 0)
        assert np.array_equal(S.rows[~out], U.rows[~out])

    def test_csv_round_trip(self, tmp_path):
        S = sample_matrix(DistributionSpec.gaussian(3), 5, Stream(4).child(1))
        S.to_csv(tmp_path / "s.csv")
        T = SampleMatrix.from_csv(tmp_path / "s.csv")
        assert np.array_equal(S.rows, T.rows)
        assert T.provenance == tuple(str(x) for x in S.provenance)
        assert (tmp_path / "s.csv").read_text().startswith("# provenance: gaussian 3 4 1")


class TestSpecText:
    @pytest.mark.parametrize("spec", [
        DistributionSpec.gaussian(4), DistributionSpec.iid_powerlaw(3, 4.5),
        DistributionSpec.constant([1.0, 0.25]),
        DistributionSpec.truncated(DistributionSpec.multidim_pareto(6, 13.0), 2.0)])
    def test_round_trip(self, spec):
        assert DistributionSpec.from_text(spec.to_text()) == spec

    def test_bad_text(self):
        with pytest.raises(InvalidSpecError, match="line 2"):
            DistributionSpec.from_text("kind = gaussian\nnonsense\n")
        with pytest.raises(InvalidSpecError, match="n: missing"):
            DistributionSpec.from_text("kind = gaussian\n")

    def test_with_n(self):
        spec = DistributionSpec.truncated(DistributionSpec.gaussian(3), 2.0).with_n(5)
        assert spec.n == 5 and spec.inner.n == 5
        with pytest.raises(InvalidSpecError):
            DistributionSpec.constant([1.0]).with_n(2)

    def test_pareto_modes(self):
        assert DistributionSpec.multidim_pareto_mode(4, 12, True).tail_exponent > 12
        assert DistributionSpec.multidim_pareto_mode(4, 12, False).tail_exponent <= 12
        with pytest.raises(InvalidSpecError):
            DistributionSpec.multidim_pareto_mode(4, 12, True, tail_exponent=10)


class TestModelParams:
    def test_defaults(self):
        m = ModelParams(3.0)
        assert m.q == 12.0 and m.main_theorem_hypotheses

    @pytest.mark.parametrize("kw", [dict(q=4.0), dict(K=0.0), dict(epsilon=1.0), dict(delta=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidSpecError):
            ModelParams(3.0, **kw)


class TestExactMoment:
    def test_gaussian_fourth_moment(self):
        x = unit([1, 2, 3])
        assert exact_moment(DistributionSpec.gaussian(3), x, 4) == pytest.approx(3.0, abs=1e-12)

    @pytest.mark.parametrize("p", [2.5, 3.0, 7.3])
    def test_gaussian_against_quadrature(self, p):
        assert gaussian_abs_moment(p) == pytest.approx(quad_gaussian_abs_moment(p), rel=1e-9)
        assert gaussian_abs_tail_moment(p, 1.7) == pytest.approx(
            quad_gaussian_abs_moment(p, 1.7), rel=1e-8)

    def test_orthobasis_against_atoms(self):
        n, p = 16, 4.0
        spec = DistributionSpec.orthobasis(n)
        assert exact_moment(spec, np.eye(n)[0], p) == pytest.approx(16.0)
        x = unit(np.random.default_rng(0).standard_normal(n))
        atoms = math.sqrt(n) * np.eye(n)
        assert exact_moment(spec, x, 3.0) == pytest.approx(np.mean(np.abs(atoms @ x) ** 3))
        # permutation invariance
        assert exact_moment(spec, x[::-1], 3.0) == pytest.approx(exact_moment(spec, x, 3.0))

    def test_constant(self):
        assert exact_moment(DistributionSpec.constant([0.0, 0.0]), [1.0, 0.0], 3) == 0.0
        v = [1.0, 2.0]
        x = unit([1, 1])
        assert exact_moment(DistributionSpec.constant(v), x, 3) == pytest.approx(
            (3 / math.sqrt(2)) ** 3)

    def test_multidim_pareto_product(self):
        spec = DistributionSpec.multidim_pareto(3, 13.0)
        want = gaussian_abs_moment(3) * ScaledPareto(13.0).abs_moment(3)
        assert exact_moment(spec, unit([1, 0, 1]), 3) == pytest.approx(want)

    def test_batch_and_errors(self):
        spec = DistributionSpec.gaussian(2)
        out = exact_moment(spec, np.eye(2), 3)
        assert out.shape == (2,)
        with pytest.raises(ValueError):
            exact_moment(spec, [1.0, 1.0], 3)
        with pytest.raises(NoClosedFormError):
            exact_moment(DistributionSpec.iid_powerlaw(2, 5.0), [1.0, 0.0], 3)

    def test_tail_moment_closed_forms(self):
        spec = DistributionSpec.multidim_pareto(2, 13.0)
        x = np.array([1.0, 0.0])
        assert exact_tail_moment(spec, x, 3, 0.0) == pytest.approx(exact_moment(spec, x, 3),
                                                                   rel=1e-7)
        ortho = DistributionSpec.orthobasis(4)
        assert exact_tail_moment(ortho, x, 3, 1.0) == pytest.approx(8 / 4)
        assert exact_tail_moment(ortho, x, 3, 3.0) == 0.0


class TestMonteCarloOracle:
    def test_constant_has_zero_width(self):
        spec = DistributionSpec.constant([3.0, 4.0])
        est, hw = moment_mc_oracle(spec, [0.6, 0.8], 3, 10_000, Stream(0))
        assert est == pytest.approx(125.0) and hw == pytest.approx(0.0, abs=1e-9)

    def test_gaussian_fourth_moment_within_ci(self):
        est, hw = moment_mc_oracle(DistributionSpec.gaussian(2), [1.0, 0.0], 4, 1_000_000,
                                   Stream(1))
        assert abs(est - 3.0) <= hw

    def test_orthobasis_within_ci(self):
        spec = DistributionSpec.orthobasis(4)
        est, hw = moment_mc_oracle(spec, [1.0, 0, 0, 0], 3, 100_000, Stream(2))
        assert abs(est - exact_moment(spec, [1.0, 0, 0, 0], 3)) <= hw

    def test_calibration(self):
        spec = DistributionSpec.gaussian(3)
        x = unit([1, -1, 2])
        hits = sum(abs(est - gaussian_abs_moment(3)) <= hw for est, hw in
                   (moment_mc_oracle(spec, x, 3, 10_000, Stream(5).child(k)) for k in range(200)))
        assert hits >= 194  # 99% nominal, binomial slack

    def test_needs_enough_draws(self):
        with pytest.raises(ValueError):
            moment_mc_oracle(DistributionSpec.gaussian(2), [1.0, 0.0], 3, 100, Stream(0))


class TestAssumptions:
    def test_constant_norm_sqrt_n(self):
        rep = check_assumptions(DistributionSpec.constant([1.0, 1.0, 1.0, 1.0]), 3, 100, Stream(0))
        assert rep.K_hat == pytest.approx(1.0)

    def test_orthobasis(self):
        K_hat, L_hat, q = check_assumptions(DistributionSpec.orthobasis(8), 3, 500, Stream(0))
        assert K_hat == 1.0 and q == 12.0

    def test_gaussian_L(self):
        rep = check_assumptions(DistributionSpec.gaussian(5), 3, 200_000, Stream(1))
        assert rep.L_hat == pytest.approx(quad_gaussian_abs_moment(12) ** (1 / 12), rel=0.1)
        assert not rep.diverging

    def test_heavy_pareto_flagged(self):
        rep = check_assumptions(DistributionSpec.multidim_pareto(4, 2.5), 3, 50_000, Stream(1))
        assert rep.diverging

    def test_minkowski_norm_moment(self):
        # (E||X||^q)^(2/q) <= L^2 n for the gaussian, using the exact L
        n, q = 6, 12.0
        L = quad_gaussian_abs_moment(q) ** (1 / q)
        X = sample_matrix(DistributionSpec.gaussian(n), 200_000, Stream(3)).rows
        lhs = np.mean(np.linalg.norm(X, axis=1) ** q) ** (2 / q)
        assert lhs <= L * L * n * 1.02

    def test_hill_index(self):
        z = ScaledPareto(3.0).sample(np.random.default_rng(0), 200_000)
        assert hill_tail_index(z) == pytest.approx(3.0, rel=0.15)
        assert hill_tail_index(np.ones(5)) == math.inf
