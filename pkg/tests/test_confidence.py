import math

import mpmath
import numpy as np
import pytest

from lidarchange.confidence import (ConfidenceParams, cross_confidence,
                                    sample_pairs, confidence_of)
from lidarchange.errors import (EmptyInputError, InvalidInputError,
                                InvalidParameterError)
from lidarchange.geometry import PointCloud
from lidarchange.rng import make_rng

mpmath.mp.dps = 50


def conf_oracle(d, lam=10.0, tau_vox=0.1, tau_ocl=3.0):
    # high-precision reference, evaluated branch by branch
    if d <= tau_vox:
        return 1.0
    if d >= tau_ocl:
        return 0.0
    return float(mpmath.exp(-mpmath.mpf(lam) * (mpmath.mpf(d) - mpmath.mpf(tau_vox))))


class TestConfidenceOf:
    def test_branch_boundaries(self):
        p = ConfidenceParams()
        assert confidence_of(0.0, p) == 1.0
        assert confidence_of(0.1, p) == 1.0                   # inner edge inclusive
        assert confidence_of(3.0, p) == 0.0                   # outer edge inclusive
        assert confidence_of(3.0 + 1e-12, p) == 0.0
        just_in = confidence_of(np.nextafter(0.1, 1.0), p)
        assert 0.0 < just_in < 1.0 and just_in > 1.0 - 1e-9

    def test_matches_oracle(self):
        rng = make_rng(0)
        p = ConfidenceParams()
        ds = np.concatenate([rng.uniform(0, 3.5, 2000),
                             [0.0, 0.1, 0.1 + 1e-15, 2.999999, 3.0, 10.0]])
        got = confidence_of(ds, p)
        for d, g in zip(ds, got):
            assert abs(g - conf_oracle(d)) < 1e-12

    def test_half_confidence_distance(self):
        # exp(-10 (d - 0.1)) = 0.5  at  d = 0.1 + ln 2 / 10
        d = 0.1 + math.log(2.0) / 10.0
        assert abs(confidence_of(d) - 0.5) < 1e-12
        d7 = 0.1 + math.log(1.0 / 0.7) / 10.0
        assert abs(confidence_of(d7) - 0.7) < 1e-12

    def test_monotone_nonincreasing(self):
        ds = np.linspace(0.0, 3.2, 5000)
        c = confidence_of(ds)
        assert (np.diff(c) <= 1e-15).all()

    def test_scalar_and_array_shapes(self):
        assert isinstance(confidence_of(0.5), float)
        out = confidence_of(np.array([0.0, 0.5, 4.0]))
        assert isinstance(out, np.ndarray) and out.shape == (3,)
        assert confidence_of(np.empty(0)).shape == (0,)

    def test_custom_params(self):
        p = ConfidenceParams(lam=2.0, tau_vox=0.5, tau_ocl=1.5)
        assert confidence_of(0.5, p) == 1.0
        assert abs(confidence_of(1.0, p) - math.exp(-1.0)) < 1e-12
        assert confidence_of(1.5, p) == 0.0

    def test_rejects_bad_distances(self):
        with pytest.raises(InvalidInputError):
            confidence_of(-0.1)
        with pytest.raises(InvalidInputError):
            confidence_of(np.array([0.1, np.nan]))
        with pytest.raises(InvalidInputError):
            confidence_of(np.inf)

    def test_param_validation(self):
        with pytest.raises(InvalidParameterError):
            ConfidenceParams(lam=0.0)
        with pytest.raises(InvalidParameterError):
            ConfidenceParams(tau_vox=3.0, tau_ocl=3.0)
        with pytest.raises(InvalidParameterError):
            ConfidenceParams(tau_vox=-0.1)


class TestCrossConfidence:
    def test_against_double_loop(self):
        rng = make_rng(1)
        m = PointCloud(rng.uniform(-2, 2, size=(40, 3)))
        s = PointCloud(rng.uniform(-2, 2, size=(30, 3)))
        cm, cs = cross_confidence(m, s)
        for i in range(len(m)):
            d = min(np.linalg.norm(m.points[i] - s.points[j]) for j in range(len(s)))
            assert abs(cm[i] - conf_oracle(d)) < 1e-12
        for j in range(len(s)):
            d = min(np.linalg.norm(s.points[j] - m.points[i]) for i in range(len(m)))
            assert abs(cs[j] - conf_oracle(d)) < 1e-12

    def test_identical_clouds_full_confidence(self):
        pts = make_rng(2).normal(size=(25, 3))
        cm, cs = cross_confidence(PointCloud(pts), PointCloud(pts))
        assert (cm == 1.0).all() and (cs == 1.0).all()

    def test_far_clouds_zero(self):
        m = PointCloud([[0.0, 0, 0]])
        s = PointCloud([[100.0, 0, 0]])
        cm, cs = cross_confidence(m, s)
        assert cm[0] == 0.0 and cs[0] == 0.0

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            cross_confidence(PointCloud(np.empty((0, 3))), PointCloud([[0.0, 0, 0]]))


class TestSamplePairs:
    def _clouds(self, seed=3):
        rng = make_rng(seed)
        return (PointCloud(rng.uniform(-1, 1, size=(50, 3))),
                PointCloud(rng.uniform(-1, 1, size=(35, 3))))

    def test_deterministic(self):
        m, s = self._clouds()
        a = sample_pairs(m, s, 30, seed=7)
        b = sample_pairs(m, s, 30, seed=7)
        assert a == b
        c = sample_pairs(m, s, 30, seed=8)
        assert a != c

    def test_no_replacement_and_count(self):
        m, s = self._clouds()
        out = sample_pairs(m, s, 40, seed=1)
        assert len(out) == 40
        assert len({(p.domain, p.index) for p in out}) == 40

    def test_targets_and_matches(self):
        m, s = self._clouds()
        for p in sample_pairs(m, s, 60, seed=2):
            src = m.points[p.index] if p.domain == 0 else s.points[p.index]
            opp = s.points if p.domain == 0 else m.points
            d2 = ((opp - src) ** 2).sum(axis=1)
            assert abs(p.distance - math.sqrt(d2.min())) < 1e-12
            assert abs(d2[p.match_index] - d2.min()) < 1e-24
            assert abs(p.target - conf_oracle(p.distance)) < 1e-12

    def test_full_population(self):
        m, s = self._clouds()
        out = sample_pairs(m, s, 85, seed=0)
        doms = [p.domain for p in out]
        assert doms.count(0) == 50 and doms.count(1) == 35

    def test_count_exceeds_population(self):
        m, s = self._clouds()
        with pytest.raises(InvalidParameterError):
            sample_pairs(m, s, 86, seed=0)
