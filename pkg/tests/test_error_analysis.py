import numpy as np
import pytest

import aquant.error_analysis as ea
from aquant.exceptions import DegenerateWeightError, ShapeError
from aquant.quantizer import BorderFunction, QuantParams, analytic_border


class TestElementwiseError:
    def test_hand_value(self):
        # (w + dw) * dx + dw * x
        assert ea.elementwise_error(2.0, 0.5, 3.0, -0.25) == pytest.approx(0.875, abs=1e-15)

    def test_zero_perturbations_zero_error(self):
        assert ea.elementwise_error(1.7, 0.0, -2.3, 0.0) == 0.0


class TestDotProductError:
    def test_two_element_instance(self):
        w = [3.2, 2.8]
        x = [5.4, -3.0]
        total, recs = ea.dot_product_error([3.0, 3.0], [5.0, -3.0], w, x)
        assert total == pytest.approx(-2.88, abs=1e-12)
        assert recs[0].error == pytest.approx(-2.28, abs=1e-12)
        assert recs[1].error == pytest.approx(-0.6, abs=1e-12)

    def test_flipping_one_activation_fixes_the_instance(self):
        total, _ = ea.dot_product_error([3.0, 3.0], [6.0, -3.0], [3.2, 2.8],
                                        [5.4, -3.0])
        assert total == pytest.approx(0.12, abs=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_records_sum_to_total(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=50)
        x = rng.normal(size=50) * 4
        w_hat = np.round(w * 2) / 2
        x_hat = np.round(x)
        total, recs = ea.dot_product_error(w_hat, x_hat, w, x)
        assert abs(total - sum(r.error for r in recs)) < 1e-12

    def test_rejects_mismatched_vectors(self):
        with pytest.raises(ShapeError):
            ea.dot_product_error([1.0], [1.0, 2.0], [1.0], [1.0])


class TestExpectedError:
    def test_analytic_border_is_unbiased(self):
        w, dw, x_int = 3.2, -0.2, 5
        border = lambda x: analytic_border(w, dw, x)
        mean, stderr = ea.expected_ew_error(w, dw, border, x_int, seed=3,
                                            with_stderr=True)
        assert abs(mean) <= 3 * stderr

    def test_nearest_border_bias_is_dw_times_midpoint(self):
        w, dw, x_int = 3.2, -0.2, 5
        mean, stderr = ea.expected_ew_error(w, dw, 0.5, x_int, seed=4,
                                            with_stderr=True)
        assert abs(mean - dw * (x_int + 0.5)) <= 3 * stderr

    @pytest.mark.parametrize("b", [0.3, 0.0, 1.4, -0.2])
    def test_monte_carlo_matches_closed_form(self, b):
        w, dw, x_int = 1.5, 0.3, -2
        mean, stderr = ea.expected_ew_error(w, dw, b, x_int, seed=5,
                                            with_stderr=True)
        want = ea.expected_ew_error_closed_form(w, dw, b, x_int)
        assert abs(mean - want) <= 4 * stderr + 1e-12

    def test_closed_form_piecewise_values(self):
        assert ea.expected_ew_error_closed_form(1.0, 0.0, 0.25, 0) == pytest.approx(0.25)
        assert ea.expected_ew_error_closed_form(1.0, 0.0, 2.0, 0) == -0.5
        assert ea.expected_ew_error_closed_form(1.0, 0.0, -1.0, 0) == 0.5

    def test_small_sample_count_rejected(self):
        with pytest.raises(ValueError):
            ea.expected_ew_error(1.0, 0.1, 0.5, 0, n_samples=10)

    def test_nan_border_rejected(self):
        with pytest.raises(ValueError):
            ea.expected_ew_error(1.0, 0.1, float("nan"), 0)


class TestAnalyticBorderVec:
    def test_matches_scalar_formula(self):
        x = np.linspace(-4, 4, 9)
        got = ea.analytic_border_vec(3.2, -0.2, x)
        want = [analytic_border(3.2, -0.2, float(v)) for v in x]
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateWeightError):
            ea.analytic_border_vec(1.0, -1.0, np.array([1.0]))


class TestTheorem1:
    def test_holds_on_reference_instance(self):
        rep = ea.verify_theorem1(3.2, -0.2, np.linspace(-8, 8, 1001))
        assert rep.ok
        assert rep.checked + rep.skipped == 1001
        assert rep.violations == 0

    @pytest.mark.parametrize("w,dw", [(2.0, 0.0), (1.0, 0.45), (-1.5, 0.3),
                                      (0.2, -0.15)])
    def test_holds_across_weight_regimes(self, w, dw):
        rep = ea.verify_theorem1(w, dw, np.linspace(-6, 6, 501))
        assert rep.violations == 0

    def test_checker_catches_a_wrong_border(self, monkeypatch):
        # mirroring the border about 1/2 must produce detected violations
        true_border = ea.analytic_border_vec

        def mirrored(w, dw, x):
            return 1.0 - true_border(w, dw, x)

        monkeypatch.setattr(ea, "analytic_border_vec", mirrored)
        rep = ea.verify_theorem1(3.2, -0.2, np.linspace(-8, 8, 1001))
        assert rep.violations > 0
        assert rep.violating_x


def test_propagated_border_reduces_to_analytic_without_noise():
    got = ea.propagated_border(3.2, -0.2, 5.4, 0.0)
    assert got == pytest.approx(analytic_border(3.2, -0.2, 5.4), abs=1e-15)


def test_propagated_border_shifts_with_upstream_error():
    # w=2, dw=0: border = (w/(w+dw)) * e + 1/2 = e + 1/2
    assert ea.propagated_border(2.0, 0.0, 7.0, 1.0) == pytest.approx(1.5)
    with pytest.raises(DegenerateWeightError):
        ea.propagated_border(1.0, -1.0, 0.0, 0.0)


class TestSuperiorPairs:
    def _instance(self, seed, hidden=4, cols=64):
        rng = np.random.default_rng(seed)
        w = rng.uniform(1.0, 2.0, size=(1, hidden)) * rng.choice([-1, 1], size=(1, hidden))
        dw = rng.uniform(0.1, 0.3, size=(1, hidden)) * rng.choice([-1, 1], size=(1, hidden))
        w_hat = w + dw
        x = rng.uniform(-6.0, 6.0, size=(hidden, cols))
        return w, w_hat, x

    def test_counts_equal_direction_flips_for_exact_borders(self):
        # with one output channel the element-linear border is exact, so the
        # superior pairs are precisely those whose direction differs from
        # nearest (Theorem 1), never the ties
        w, w_hat, x = self._instance(seed=11)
        dw = w_hat - w
        slope = (dw / w_hat).ravel()
        bf = BorderFunction.element_linear(b1=slope, b0=np.full(len(slope), 0.5))
        p = QuantParams.signed_symmetric(step=1.0, bits=8)
        n_sup, n_tot = ea.superior_pairs(w, w_hat, x, p, bf)
        border = slope[:, None] * x + 0.5
        frac = x - np.floor(x)
        dir_bf = frac >= border
        dir_nr = frac >= 0.5
        assert n_tot == x.size
        assert n_sup == int((dir_bf != dir_nr).sum())
        assert n_sup > 0

    def test_identical_border_yields_zero_superior(self):
        w, w_hat, x = self._instance(seed=12)
        bf = BorderFunction.constant(x.shape[0], 0.5)
        p = QuantParams.signed_symmetric(step=1.0, bits=8)
        n_sup, _ = ea.superior_pairs(w, w_hat, x, p, bf)
        assert n_sup == 0

    def test_ratio_matches_pair_counts(self):
        w, w_hat, x = self._instance(seed=13)
        dw = w_hat - w
        slope = (dw / w_hat).ravel()
        bf = BorderFunction.element_linear(b1=slope, b0=np.full(len(slope), 0.5))
        p = QuantParams.signed_symmetric(step=1.0, bits=8)
        n_sup, n_tot = ea.superior_pairs(w, w_hat, x, p, bf)
        assert ea.superior_ratio(w, w_hat, x, p, bf) == pytest.approx(n_sup / n_tot)

    def test_chunking_does_not_change_counts(self):
        w, w_hat, x = self._instance(seed=14, cols=100)
        dw = w_hat - w
        slope = (dw / w_hat).ravel()
        bf = BorderFunction.element_linear(b1=slope, b0=np.full(len(slope), 0.5))
        p = QuantParams.signed_symmetric(step=1.0, bits=8)
        assert (ea.superior_pairs(w, w_hat, x, p, bf, chunk=7)
                == ea.superior_pairs(w, w_hat, x, p, bf, chunk=4096))

    def test_rejects_empty_batch(self):
        p = QuantParams.signed_symmetric(step=1.0, bits=8)
        bf = BorderFunction.constant(2, 0.5)
        with pytest.raises(ShapeError):
            ea.superior_pairs(np.ones((1, 2)), np.ones((1, 2)),
                              np.zeros((2, 0)), p, bf)


class TestBruteForceOracle:
    def test_single_element_prefers_smaller_error(self):
        p = QuantParams.signed_symmetric(step=1.0, bits=8)
        flags, err = ea.brute_force_rounding_oracle(np.array([2.0]),
                                                    np.array([0.6]), p)
        assert flags.tolist() == [True]
        assert err == pytest.approx(0.8, abs=1e-12)

    def test_tie_keeps_all_down(self):
        p = QuantParams.signed_symmetric(step=1.0, bits=8)
        flags, err = ea.brute_force_rounding_oracle(np.array([1.0]),
                                                    np.array([0.5]), p)
        assert flags.tolist() == [False]
        assert err == pytest.approx(0.5, abs=1e-12)

    def test_explicit_quantized_weights_enter_the_error(self):
        p = QuantParams.signed_symmetric(step=1.0, bits=8)
        flags, err = ea.brute_force_rounding_oracle(
            np.array([1.0]), np.array([0.3]), p, w_hat_row=np.array([2.0]))
        assert flags.tolist() == [False]
        assert err == pytest.approx(0.3, abs=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_dominates_nearest_rounding(self, seed):
        rng = np.random.default_rng(seed)
        k = 8
        w = rng.normal(size=k)
        x = rng.uniform(-4, 4, size=k)
        p = QuantParams.signed_symmetric(step=0.5, bits=6)
        _, best = ea.brute_force_rounding_oracle(w, x, p)
        x_near = 0.5 * np.clip(np.ceil(x / 0.5 - 0.5), p.q_min, p.q_max)
        near_err = abs(float(np.dot(w, x_near) - np.dot(w, x)))
        assert best <= near_err + 1e-12

    def test_chunked_enumeration_matches_wide_chunks(self):
        rng = np.random.default_rng(9)
        k = 10
        w = rng.normal(size=k)
        x = rng.uniform(-4, 4, size=k)
        p = QuantParams.signed_symmetric(step=1.0, bits=6)
        f1, e1 = ea.brute_force_rounding_oracle(w, x, p, chunk_bits=4)
        f2, e2 = ea.brute_force_rounding_oracle(w, x, p, chunk_bits=16)
        assert e1 == e2 and f1.tolist() == f2.tolist()

    def test_refuses_oversized_search(self):
        p = QuantParams.signed_symmetric(step=1.0, bits=6)
        with pytest.raises(ValueError):
            ea.brute_force_rounding_oracle(np.ones(21), np.ones(21), p)

    def test_refuses_empty_vectors(self):
        p = QuantParams.signed_symmetric(step=1.0, bits=6)
        with pytest.raises(ShapeError):
            ea.brute_force_rounding_oracle(np.ones(0), np.ones(0), p)
