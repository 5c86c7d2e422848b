import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from demorph.biometric import Comparator
from demorph.errors import DimensionError, MetricError
from demorph.imaging import IdentityParams, render_bonafide
from demorph.metrics import (component_leakage, fid, fid_from_features, frechet_distance,
                             gaussian_window, iqa, match_accuracy, psnr, restoration_accuracy,
                             ssim)
from demorph.nets import DESK_NETWORK, init_params

from oracles import psnr_loop, ssim_naive


def face(seed, res=64):
    return render_bonafide(IdentityParams.from_seed(seed), 0, res)


# -- SSIM / PSNR ----------------------------------------------------------------

def test_ssim_identical_is_one():
    a = face(1)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_naive_oracle():
    rng = np.random.default_rng(0)
    a = rng.random((3, 16, 18))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_naive(a, b), abs=1e-6)


def test_ssim_symmetric_and_bounded():
    a, b = face(1, 32), face(2, 32)
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= s < 1


def test_ssim_too_small():
    with pytest.raises(MetricError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_gaussian_window_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.array_equal(w, w.T)


def test_psnr_identical_is_capped():
    a = face(3)
    assert psnr(a, a) == 100.0


def test_psnr_known_value():
    a = np.zeros((3, 4, 4))
    b = np.full((3, 4, 4), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_psnr_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((3, 4, 4)), rng.random((3, 4, 4))
    assert psnr(a, b) == pytest.approx(psnr_loop(torch.tensor(a), torch.tensor(b)), abs=1e-9)


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


# -- FID --------------------------------------------------------------------------

def test_fid_same_set_is_zero():
    feats = np.random.default_rng(1).standard_normal((40, 6))
    assert abs(fid_from_features(feats, feats)) <= 1e-6


def test_fid_mean_shift_equal_covariance():
    rng = np.random.default_rng(2)
    feats = rng.standard_normal((50, 5))
    d = np.array([0.5, -1.0, 0.25, 0.0, 2.0])
    assert fid_from_features(feats, feats + d) == pytest.approx(d @ d, abs=1e-4)


def test_frechet_distance_closed_form_diagonal():
    c1, c2 = np.diag([1.0, 4.0]), np.diag([9.0, 1.0])
    # (sqrt(1)-sqrt(9))^2 + (sqrt(4)-sqrt(1))^2 = 4 + 1
    assert frechet_distance(np.zeros(2), c1, np.zeros(2), c2) == pytest.approx(5.0, abs=1e-10)


def test_frechet_distance_symmetric_nonnegative():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    c1, c2 = x @ x.T, y @ y.T
    m1, m2 = rng.standard_normal(4), rng.standard_normal(4)
    d12 = frechet_distance(m1, c1, m2, c2)
    assert d12 >= 0
    assert d12 == pytest.approx(frechet_distance(m2, c2, m1, c1), abs=1e-8)


def test_fid_requires_enough_samples():
    with pytest.raises(MetricError):
        fid_from_features(np.zeros((4, 8)), np.zeros((20, 8)))


def test_fid_toy_embedder_same_set():
    images = [face(s, 32) for s in range(70)]
    assert abs(fid(images, images)) <= 1e-6


def test_iqa_skips_fid_for_small_sets():
    refs = [face(s, 32) for s in range(3)]
    report = iqa(refs, refs)
    assert report.fid is None
    assert report.ssim == pytest.approx(1.0) and report.psnr == 100.0


# -- biometric protocols ----------------------------------------------------------

class Blind(Comparator):
    name = "blind"

    def embed(self, image):
        return None


def test_match_accuracy_basic():
    a, b = face(1), face(2)
    assert match_accuracy([(a, a), (a, b)]) == 0.5


def test_match_accuracy_not_found_handling():
    a = face(1)
    assert match_accuracy([(a, a)], Blind()) == 0.0
    with pytest.raises(MetricError):
        match_accuracy([(a, a)], Blind(), exclude_not_found=True)


def test_match_accuracy_empty():
    with pytest.raises(MetricError):
        match_accuracy([])


def test_restoration_exact_recovery():
    b1, b2 = face(1), face(2)
    acc1, acc2, records = restoration_accuracy([(b1, b2, b1, b2), (b2, b1, b1, b2)])
    assert (acc1, acc2) == (1.0, 1.0)
    assert [r.pairing for r in records] == ["natural", "swapped"]


def test_restoration_duplicate_output_fails_other_subject():
    b1, b2 = face(1), face(2)
    acc1, acc2, _ = restoration_accuracy([(b1, b1, b1, b2)])
    assert acc1 == 1.0 and acc2 == 0.0


def test_restoration_output_matching_both_is_failure():
    b1, b2 = face(1), face(2)
    morph = 0.5 * (b1 + b2)
    acc1, acc2, _ = restoration_accuracy([(morph, morph, b1, b2)])
    assert acc1 == 0.0 and acc2 == 0.0


def test_restoration_not_found_counts_as_failure():
    b1, b2 = face(1), face(2)
    acc1, acc2, records = restoration_accuracy([(b1, b2, b1, b2)], Blind())
    assert (acc1, acc2) == (0.0, 0.0)
    assert records[0].not_found == ("o1", "o2", "b1", "b2")


def test_restoration_empty():
    with pytest.raises(MetricError):
        restoration_accuracy([])


def test_leakage_untrained_floor():
    dec, mer = init_params(DESK_NETWORK, seed=0)
    images = [face(s) for s in range(10)]
    report = component_leakage(dec, mer, images)
    assert len(report.rates) == 3
    assert report.reconstruction_rate < 0.2
    assert all(0 <= r <= 1 for r in report.rates)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_restoration_invariant_to_output_swap(seed):
    rng = np.random.default_rng(seed)
    b1, b2 = face(int(rng.integers(1000)), 32), face(int(rng.integers(1000, 2000)), 32)
    o1 = np.clip(b1 + 0.2 * rng.standard_normal(b1.shape), 0, 1)
    o2 = np.clip(0.5 * (b1 + b2) + 0.2 * rng.standard_normal(b1.shape), 0, 1)
    a = restoration_accuracy([(o1, o2, b1, b2)])
    b = restoration_accuracy([(o2, o1, b1, b2)])
    assert a[:2] == b[:2]


def test_fid_symmetric():
    rng = np.random.default_rng(5)
    fa, fb = rng.standard_normal((30, 4)), 2 * rng.standard_normal((40, 4)) + 1
    assert fid_from_features(fa, fb) == pytest.approx(fid_from_features(fb, fa), abs=1e-8)
    assert fid_from_features(fa, fb) >= -1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ssim_psnr_maximal_only_at_equality(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((3, 16, 16))
    b = a.copy()
    c, r, col = rng.integers(3), rng.integers(16), rng.integers(16)
    b[c, r, col] = (b[c, r, col] + 0.3) % 1.0
    assert ssim(a, b) < 1.0 and psnr(a, b) < 100.0
