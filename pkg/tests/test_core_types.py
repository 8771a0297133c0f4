import numpy as np
import pytest

from slacc.datatypes import (ConnectivityDataset, DataValidationError, FitConfig,
                             ParameterSet, n_pairs, pattern_matrix, rank1_vector,
                             unvectorize, unvectorize_rows, validate, vectorize)


class TestVectorize:
    def test_2x2_include(self):
        assert np.array_equal(vectorize([[1, 2], [2, 3]], "include"), [1, 2, 3])

    def test_p_for_v50_include(self):
        assert n_pairs(50, "include") == 1275

    def test_2x2_exclude(self):
        assert np.array_equal(vectorize([[0, 5], [5, 0]], "exclude"), [5])
        assert n_pairs(2, "exclude") == 1

    def test_row_major_ordering(self):
        Y = np.arange(9).reshape(3, 3)
        Y = Y + Y.T
        got = vectorize(Y, "include")
        expect = [Y[0, 0], Y[0, 1], Y[0, 2], Y[1, 1], Y[1, 2], Y[2, 2]]
        assert np.array_equal(got, expect)

    def test_rejects_asymmetric(self):
        with pytest.raises(DataValidationError):
            vectorize([[0, 1], [2, 0]])

    def test_rejects_nonsquare(self):
        with pytest.raises(DataValidationError):
            vectorize(np.zeros((2, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(DataValidationError):
            vectorize([[np.inf, 0], [0, 0]])

    @pytest.mark.parametrize("mode", ["include", "exclude"])
    def test_p_formula(self, mode):
        for V in (2, 3, 7, 20):
            expect = V * (V + 1) // 2 if mode == "include" else V * (V - 1) // 2
            assert n_pairs(V, mode) == expect


class TestUnvectorize:
    def test_include_inverse(self):
        assert np.array_equal(unvectorize([1, 2, 3], 2, "include"), [[1, 2], [2, 3]])

    def test_exclude_zero_diagonal(self):
        assert np.array_equal(unvectorize([5], 2, "exclude"), [[0, 5], [5, 0]])

    def test_length_mismatch(self):
        with pytest.raises(DataValidationError):
            unvectorize([1, 2], 2, "include")

    @pytest.mark.parametrize("mode", ["include", "exclude"])
    def test_round_trip_bit_exact(self, mode):
        rng = np.random.default_rng(7)
        for V in (2, 5, 11):
            for _ in range(50):
                y = rng.standard_normal(n_pairs(V, mode))
                back = vectorize(unvectorize(y, V, mode), mode)
                assert np.array_equal(back, y)

    def test_matrix_round_trip_include(self):
        rng = np.random.default_rng(11)
        A = rng.standard_normal((6, 6))
        Y = A + A.T
        assert np.array_equal(unvectorize(vectorize(Y, "include"), 6, "include"), Y)

    def test_rows_helper_matches_single(self):
        rng = np.random.default_rng(3)
        vecs = rng.standard_normal((4, n_pairs(5, "exclude")))
        stack = unvectorize_rows(vecs, 5, "exclude")
        for j in range(4):
            assert np.array_equal(stack[j], unvectorize(vecs[j], 5, "exclude"))


class TestRank1Vector:
    def test_unit_basis(self):
        assert np.array_equal(rank1_vector([1.0, 0.0], "include"), [1, 0, 0])

    def test_flat_vector(self):
        u = np.array([1.0, 1.0]) / np.sqrt(2)
        np.testing.assert_allclose(rank1_vector(u, "include"), [0.5, 0.5, 0.5])

    @pytest.mark.parametrize("mode", ["include", "exclude"])
    def test_matches_outer_product_oracle(self, mode):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            u = rng.standard_normal(6)
            direct = vectorize(np.outer(u, u), mode)
            assert np.max(np.abs(rank1_vector(u, mode) - direct)) < 1e-14

    def test_pattern_matrix_stacks_columns(self):
        rng = np.random.default_rng(0)
        U = rng.standard_normal((7, 3))
        S = pattern_matrix(U, "exclude")
        for l in range(3):
            assert np.array_equal(S[:, l], rank1_vector(U[:, l], "exclude"))


def _toy_dataset(n=6, V=4, q=3, seed=0, mode="include"):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, V, V))
    Y = A + A.transpose(0, 2, 1)
    sites = ["a", "b"] * (n // 2)
    X = rng.standard_normal((n, q))
    return ConnectivityDataset(Y, sites, X, diagonal_mode=mode)


class TestConnectivityDataset:
    def test_site_codes_first_appearance(self):
        ds = _toy_dataset()
        assert ds.site_labels == ("a", "b")
        assert np.array_equal(ds.sites[:2], [0, 1])

    def test_exclude_zeroes_diagonal(self):
        ds = _toy_dataset(mode="exclude")
        assert np.all(np.diagonal(ds.matrices, axis1=1, axis2=2) == 0)

    def test_rejects_asymmetric_without_flag(self):
        Y = np.zeros((1, 3, 3))
        Y[0, 0, 1] = 1e-6
        with pytest.raises(DataValidationError):
            ConnectivityDataset(Y, ["a"], np.zeros((1, 1)))

    def test_symmetrize_flag(self):
        Y = np.zeros((1, 3, 3))
        Y[0, 0, 1] = 1e-6
        ds = ConnectivityDataset(Y, ["a"], np.zeros((1, 1)), symmetrize=True)
        assert ds.matrices[0, 0, 1] == ds.matrices[0, 1, 0] == 5e-7

    def test_immutability(self):
        ds = _toy_dataset()
        with pytest.raises(ValueError):
            ds.matrices[0, 0, 0] = 1.0

    def test_vectors_match_vectorize(self):
        ds = _toy_dataset(mode="exclude")
        for j in range(ds.n):
            assert np.array_equal(ds.vectors[j], vectorize(ds.matrices[j], "exclude"))

    def test_site_order_param(self):
        ds = _toy_dataset()
        ds2 = ConnectivityDataset(ds.matrices, ["b"] * ds.n, ds.covariates,
                                  site_order=["a", "b"])
        assert np.all(ds2.sites == 1)
        assert ds2.site_sizes.tolist() == [0, ds.n]

    def test_unknown_site_with_order(self):
        ds = _toy_dataset()
        with pytest.raises(DataValidationError):
            ConnectivityDataset(ds.matrices, ["c"] * ds.n, ds.covariates,
                                site_order=["a", "b"])


class TestValidate:
    def test_clean_dataset(self):
        assert validate(_toy_dataset()).ok

    def test_duplicated_covariate_column_flagged(self):
        ds = _toy_dataset()
        X = ds.covariates.copy()
        X[:, 1] = X[:, 0]
        bad = ConnectivityDataset(ds.matrices, ["a"] * ds.n, X)
        report = validate(bad)
        assert not report.ok
        assert any("rank" in v for v in report.violations)

    def test_factor_count_bound(self):
        report = validate(_toy_dataset(), L=4)
        assert any("A.1" in v for v in report.violations)

    def test_small_factor_count_flagged(self):
        report = validate(_toy_dataset(), L=1)
        assert any("A.1" in v for v in report.violations)


class TestParameterSet:
    def test_requires_positive_variances(self):
        with pytest.raises(DataValidationError):
            ParameterSet(U=np.eye(3, 2), B=np.zeros((2, 2)),
                         sigma2=np.array([[1.0, 0.0]]), phi2=np.array([1.0]))

    def test_shape_checks(self):
        with pytest.raises(DataValidationError):
            ParameterSet(U=np.eye(3, 2), B=np.zeros((2, 3)),
                         sigma2=np.ones((1, 2)), phi2=np.ones(1))

    def test_dims(self):
        theta = ParameterSet(U=np.eye(4, 2), B=np.ones((3, 2)),
                             sigma2=np.ones((2, 2)), phi2=np.ones(2))
        assert (theta.V, theta.L, theta.q, theta.n_sites) == (4, 2, 3, 2)


class TestFitConfig:
    def test_default_tau_formula(self):
        cfg = FitConfig()
        assert cfg.default_tau(50, 5, 500) == pytest.approx(
            0.5 * np.sqrt(np.log(250) / 500))

    def test_default_lambda(self):
        assert FitConfig().default_lambda_max(500) == pytest.approx(np.log(500) / 2)

    def test_invalid_tolerances(self):
        with pytest.raises(ValueError):
            FitConfig(em_tol=0.0)
        with pytest.raises(ValueError):
            FitConfig(anneal_iters=10, max_em_iter=5)
