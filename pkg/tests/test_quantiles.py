"""Tests for quantile post-processing: monotonize, bands, PDFs, masks."""

import numpy as np
import pytest

from rainquant.quantiles import (
    cdf_at,
    confidence_band,
    monotonize,
    pdf_from_cdf,
    point_estimate,
    rain_mask,
)
from rainquant.swath import QUANTILE_LEVELS, QuantileField


def make_qf(q, granule_id="q"):
    q = np.asarray(q, dtype=np.float32)
    n_scan, n_pix = q.shape[1:]
    lat = np.full((n_scan, n_pix), 45.0)
    lon = np.full((n_scan, n_pix), 5.0)
    return QuantileField(granule_id, q, lat, lon, np.zeros(n_scan))


def linear_qf(scale=0.1):
    """Pixel whose quantiles are q_j = scale * j (uniform CDF)."""
    q = (np.arange(1, 100, dtype=np.float64) * scale)[:, None, None]
    return make_qf(q)


def random_monotone_qf(rng, n_scan=4, n_pix=5, low=0.0, high=10.0):
    q = np.sort(rng.uniform(low, high, (99, n_scan, n_pix)), axis=0)
    return make_qf(q)


class TestMonotonize:
    def test_sorts_values(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(2.0, 3.0, (99, 3, 3))
        qf = monotonize(make_qf(raw))
        assert np.all(np.diff(qf.q, axis=0) >= 0)

    def test_preserves_multiset_before_clamp(self):
        rng = np.random.default_rng(1)
        raw = rng.uniform(0.5, 9.0, (99, 2, 2))  # positive: clamp is a no-op
        qf = monotonize(make_qf(raw))
        np.testing.assert_allclose(np.sort(raw, axis=0), qf.q, rtol=1e-6)

    def test_clamps_negatives(self):
        raw = np.linspace(-1.0, 1.0, 99)[:, None, None]
        qf = monotonize(make_qf(raw))
        assert qf.q.min() == 0.0
        assert np.all(np.diff(qf.q, axis=0) >= 0)

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        qf = monotonize(make_qf(rng.normal(1, 2, (99, 3, 2))))
        again = monotonize(qf)
        np.testing.assert_array_equal(qf.q, again.q)


class TestPointEstimate:
    def test_linear_cdf_median(self):
        qf = linear_qf(scale=10.0 / 100.0)  # quantiles (j/100)*10
        assert point_estimate(qf, 0.50).rain[0, 0] == pytest.approx(5.0)

    def test_degenerate_distribution(self):
        qf = make_qf(np.full((99, 1, 1), 3.25))
        assert point_estimate(qf).rain[0, 0] == pytest.approx(3.25)

    def test_top_level(self):
        qf = linear_qf(0.1)
        assert point_estimate(qf, 0.99).rain[0, 0] == pytest.approx(9.9)

    def test_bad_level(self):
        qf = linear_qf()
        with pytest.raises(ValueError):
            point_estimate(qf, 0.995)
        with pytest.raises(ValueError):
            point_estimate(qf, 0.0)

    def test_provenance_tag(self):
        assert point_estimate(linear_qf()).provenance == "retrieval"


class TestConfidenceBand:
    def test_ninety_band_of_linear(self):
        qf = linear_qf(0.1)
        band = confidence_band(qf, 0.90)
        assert band.lower.rain[0, 0] == pytest.approx(0.5)
        assert band.upper.rain[0, 0] == pytest.approx(9.5)

    def test_fifty_band_of_linear(self):
        qf = linear_qf(0.1)
        band = confidence_band(qf, 0.50)
        assert band.lower.rain[0, 0] == pytest.approx(2.5)
        assert band.upper.rain[0, 0] == pytest.approx(7.5)

    def test_degenerate(self):
        qf = make_qf(np.full((99, 1, 1), 2.0))
        band = confidence_band(qf, 0.90)
        assert band.lower.rain[0, 0] == band.upper.rain[0, 0] == 2.0

    def test_unsupported_level(self):
        with pytest.raises(ValueError):
            confidence_band(linear_qf(), 0.8)

    def test_nesting_on_random_fields(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            qf = random_monotone_qf(rng)
            b50 = confidence_band(qf, 0.50)
            b90 = confidence_band(qf, 0.90)
            assert np.all(b90.lower.rain <= b50.lower.rain)
            assert np.all(b50.upper.rain <= b90.upper.rain)
            med = point_estimate(qf).rain
            assert np.all((b50.lower.rain <= med) & (med <= b50.upper.rain))


class TestPdfFromCdf:
    def test_uniform_distribution(self):
        qf = linear_qf(0.1)  # quantiles 0.1 ... 9.9, uniform
        edges = np.arange(0.0, 11.0)
        pdf = pdf_from_cdf(qf, edges)
        # interior bins fully inside (0.1, 9.9) have density 0.01/0.1 = 0.1
        np.testing.assert_allclose(pdf[1:9, 0, 0], 0.098 / 0.98, atol=1e-6)
        total = float((pdf[:, 0, 0] * np.diff(edges)).sum())
        assert total == pytest.approx(0.98, abs=1e-9)

    def test_degenerate_mass_in_one_bin(self):
        qf = make_qf(np.full((99, 1, 1), 2.5))
        edges = np.arange(0.0, 6.0)
        pdf = pdf_from_cdf(qf, edges)
        masses = pdf[:, 0, 0] * np.diff(edges)
        assert masses[2] == pytest.approx(0.98, abs=1e-9)
        assert masses.sum() == pytest.approx(0.98, abs=1e-9)

    def test_mass_conservation_random(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            qf = random_monotone_qf(rng, 3, 3, low=0.0, high=8.0)
            edges = np.linspace(-1.0, 10.0, 23)
            pdf = pdf_from_cdf(qf, edges)
            mass = (pdf * np.diff(edges)[:, None, None]).sum(axis=0)
            np.testing.assert_allclose(mass, 0.98, atol=1e-6)
            assert pdf.min() >= 0

    def test_bad_edges(self):
        with pytest.raises(ValueError):
            pdf_from_cdf(linear_qf(), [1.0, 1.0, 2.0])

    def test_cdf_flat_tails(self):
        qf = linear_qf(0.1)
        assert cdf_at(qf.q, -5.0)[0, 0] == pytest.approx(0.01)
        assert cdf_at(qf.q, 50.0)[0, 0] == pytest.approx(0.99)


class TestRainMask:
    def test_zero_is_dry(self):
        assert rain_mask(np.array([0.0]))[0] == False  # noqa: E712

    def test_small_rate_above_default_threshold(self):
        assert rain_mask(np.array([2e-4]))[0] == True  # noqa: E712

    def test_nan_is_dry(self):
        assert rain_mask(np.array([np.nan]))[0] == False  # noqa: E712

    def test_threshold_strict(self):
        assert rain_mask(np.array([1e-4]))[0] == False  # noqa: E712
