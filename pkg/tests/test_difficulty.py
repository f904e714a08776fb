import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import build_fragment, random_fragment, simple_fragment
from oracles import gnb_log_posterior_brute, lz76_brute
from sightgen.corpus import transpose
from sightgen.difficulty import (
    DESCRIPTOR_NAMES,
    DescriptorVector,
    GnbModel,
    InsufficientData,
    Normalizer,
    extract_descriptors,
    fit_normalizer,
    gnb_fit,
    gnb_log_posterior,
    gnb_predict,
    group_level,
    lz76,
    read_descriptor_csv,
    write_descriptor_csv,
)
from sightgen.errors import ClassTooSmall, NegativeLevel
from sightgen.score import ScoreFragment


class TestLz76:
    def test_repeated_symbol(self):
        assert lz76("aaaa") == 2

    def test_singletons(self):
        assert lz76("") == 0
        assert lz76("a") == 1
        assert lz76("ab") == 2

    def test_classic_binary_string(self):
        assert lz76("0001101001000101") == lz76_brute("0001101001000101")

    @given(st.text(alphabet="abc", max_size=40))
    @settings(max_examples=200)
    def test_matches_brute_scanner(self, s):
        assert lz76(s) == lz76_brute(s)

    @given(st.lists(st.integers(0, 5), max_size=30))
    def test_works_on_arbitrary_symbols(self, seq):
        assert lz76(seq) == lz76_brute(seq)


class TestExtractDescriptors:
    def test_worked_example(self):
        # RH = C4, E4, G4 quarters; LH silent
        frag = simple_fragment(rh=((1, "C4"), (1, "E4"), (1, "G4"), (1, None)))
        d = extract_descriptors(frag)
        assert abs(d["pitch_entropy_RH"] - math.log2(3)) < 1e-9
        assert d["pitch_range_RH"] == 7.0
        assert abs(d["avg_pitch_RH"] - (60 + 64 + 67) / 3) < 1e-9
        assert abs(d["displacement_RH"] - 3.5) < 1e-9
        assert d["avg_ioi_RH"] == 1.0

    def test_silent_hand_convention(self):
        frag = simple_fragment()     # LH silent, fragment length 4
        d = extract_descriptors(frag)
        for name in ("pitch_entropy_LH", "pitch_range_LH", "avg_pitch_LH",
                     "displacement_LH", "pitch_set_lz_LH"):
            assert d[name] == 0.0
        assert d["avg_ioi_LH"] == 4.0

    def test_single_repeated_note(self):
        frag = simple_fragment(rh=((1, "C4"),) * 4)
        d = extract_descriptors(frag)
        assert d["pitch_entropy_RH"] == 0.0
        assert d["pitch_range_RH"] == 0.0
        assert d["displacement_RH"] == 0.0
        assert d["avg_pitch_RH"] == 60.0
        assert d["avg_ioi_RH"] == 1.0
        assert d["pitch_set_lz_RH"] == 2.0    # lz76 of aaaa

    def test_alternating_pitches(self):
        frag = simple_fragment(rh=((1, "C4"), (1, "E4"), (1, "C4"), (1, "E4")))
        d = extract_descriptors(frag)
        assert abs(d["pitch_entropy_RH"] - 1.0) < 1e-9
        assert d["pitch_range_RH"] == 4.0
        assert abs(d["avg_pitch_RH"] - 62.0) < 1e-9
        assert abs(d["displacement_RH"] - 4.0) < 1e-9
        assert d["avg_ioi_RH"] == 1.0
        assert d["pitch_set_lz_RH"] == float(lz76_brute("abab"))

    def test_chords_average_and_multiset(self):
        frag = simple_fragment(rh=((1, ["C4", "E4"]), (1, ["C4", "E4"]),
                                   (1, "G4"), (1, None)))
        d = extract_descriptors(frag)
        # multiset {60, 64, 60, 64, 67}
        expected_entropy = -(0.4 * math.log2(0.4) * 2 + 0.2 * math.log2(0.2))
        assert abs(d["pitch_entropy_RH"] - expected_entropy) < 1e-9
        assert abs(d["avg_pitch_RH"] - 63.0) < 1e-9
        assert abs(d["displacement_RH"] - 2.5) < 1e-9      # |62-62|, |67-62|
        assert d["pitch_set_lz_RH"] == float(lz76_brute("aab"))

    def test_voices_merge_within_onset(self):
        frag = build_fragment([{(1, 1): [(4, "C4")], (1, 2): [(4, "E4")],
                                (2, 1): [(4, None)]}])
        d = extract_descriptors(frag)
        assert d["pitch_range_RH"] == 4.0
        assert d["avg_pitch_RH"] == 62.0
        assert d["avg_ioi_RH"] == 4.0      # single onset: fragment length

    def test_ioi_across_measures(self):
        rows = [{(1, 1): [(4, "C4")], (2, 1): [(4, None)]},
                {(1, 1): [(4, "D4")], (2, 1): [(4, None)]}]
        d = extract_descriptors(build_fragment(rows))
        assert d["avg_ioi_RH"] == 4.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            frag = random_fragment(rng, allow_ties=False)
            shuffled = ScoreFragment(tuple(
                type(m)(m.index, m.time_sig, m.key_fifths,
                        tuple(sorted(m.events, key=lambda e: (e.voice, e.onset))))
                for m in frag.measures))
            a = extract_descriptors(frag).as_array()
            b = extract_descriptors(shuffled).as_array()
            assert np.array_equal(a, b)

    def test_transposition_property(self):
        rng = np.random.default_rng(17)
        moved = {"avg_pitch_RH", "avg_pitch_LH"}
        lz_names = {"pitch_set_lz_RH", "pitch_set_lz_LH"}
        for i in range(30):
            frag = random_fragment(rng, naturals_only=True, allow_ties=False)
            k = 6 if i % 2 == 0 else -6
            shifted = transpose(frag, k)
            a = extract_descriptors(frag)
            b = extract_descriptors(shifted)
            for j, name in enumerate(DESCRIPTOR_NAMES):
                if name in lz_names:
                    continue
                if name in moved and a[j] != 0.0:
                    assert abs(b[j] - a[j] - k) < 1e-9, name
                else:
                    assert abs(b[j] - a[j]) < 1e-9, name


class TestNormalizer:
    def test_boundaries_and_clamp(self):
        rows = np.array([[0.0] * 12, [2.0] * 12])
        norm = fit_normalizer(rows)
        assert np.allclose(norm.apply(np.zeros(12)), 0.0)
        assert np.allclose(norm.apply(np.full(12, 3.0)), 1.0)
        assert np.allclose(norm.apply(np.full(12, 0.5)), 0.25)

    def test_degenerate_feature_maps_to_half(self):
        rows = np.array([[1.0] + [0.0] * 11, [1.0] + [2.0] * 11])
        norm = fit_normalizer(rows)
        assert norm.apply(np.ones(12))[0] == 0.5

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            fit_normalizer(np.zeros((1, 12)))


class TestGnb:
    def test_hand_fit_example(self):
        X = np.array([[0.0], [1.0], [0.4], [0.6]])
        y = [0, 0, 1, 1]
        m = gnb_fit(X, y)
        assert m.means[0][0] == pytest.approx(0.5)
        assert m.variances[0][0] == pytest.approx(0.25)
        assert m.priors == (0.5, 0.5)

    def test_identical_classes_fall_back_to_priors(self):
        X = np.array([[0.3], [0.7], [0.3], [0.7], [0.3], [0.7]])
        y = [0, 0, 0, 0, 1, 1]
        m = gnb_fit(X, y)
        lp = m.log_posterior(np.array([0.5]))
        assert np.allclose(np.exp(lp), m.priors, atol=1e-12)

    def test_balanced_priors(self):
        X = np.random.default_rng(0).random((9, 2))
        m = gnb_fit(X, [0, 0, 0, 1, 1, 1, 2, 2, 2])
        assert m.priors == (pytest.approx(1 / 3),) * 3

    def test_prior_only_argmax(self):
        m = GnbModel(classes=(0, 1, 2), priors=(0.7, 0.2, 0.1),
                     means=((0.5,), (0.5,), (0.5,)),
                     variances=((0.1,), (0.1,), (0.1,)), epsilon=1e-9)
        for v in ([0.1], [0.5], [0.9]):
            assert m.predict(np.array(v)) == 0

    def test_two_class_example_against_oracle(self):
        m = GnbModel(classes=(0, 1), priors=(0.5, 0.5),
                     means=((0.0,), (1.0,)),
                     variances=((0.25,), (0.25,)), epsilon=1e-9)
        got = m.log_posterior(np.array([0.4]))
        want = gnb_log_posterior_brute(m.priors, m.means, m.variances, [0.4])
        assert np.allclose(got, want, atol=1e-12)
        assert m.predict(np.array([0.4])) == 0

    def test_posteriors_normalize(self):
        rng = np.random.default_rng(1)
        m = gnb_fit(rng.random((30, 12)), rng.integers(0, 3, 30).tolist())
        for _ in range(20):
            lp = m.log_posterior(rng.random(12))
            assert abs(np.exp(lp).sum() - 1.0) < 1e-9

    def test_log_prior_shift_invariance(self):
        rng = np.random.default_rng(2)
        m = gnb_fit(rng.random((30, 4)), rng.integers(0, 3, 30).tolist())
        shifted = GnbModel(m.classes, tuple(p * 7.0 for p in m.priors),
                           m.means, m.variances, m.epsilon)
        for _ in range(20):
            v = rng.random(4)
            assert m.predict(v) == shifted.predict(v)

    def test_tie_breaks_toward_lower_class(self):
        m = GnbModel(classes=(0, 1), priors=(0.5, 0.5),
                     means=((0.0,), (1.0,)), variances=((0.25,), (0.25,)),
                     epsilon=1e-9)
        assert m.predict(np.array([0.5])) == 0

    def test_class_too_small(self):
        with pytest.raises(ClassTooSmall):
            gnb_fit(np.zeros((3, 2)), [0, 0, 1])

    def test_variance_floor(self):
        X = np.array([[0.5, 0.1], [0.5, 0.9], [0.5, 0.2], [0.5, 0.8]])
        m = gnb_fit(X, [0, 0, 1, 1])
        assert m.variances[0][0] >= m.epsilon > 0


class TestGroupLevel:
    def test_easy(self):
        assert group_level(0) == 0

    def test_medium(self):
        assert group_level(1) == 1

    def test_advanced_collapses(self):
        assert group_level(2) == 2
        assert group_level(7) == 2

    def test_negative_rejected(self):
        with pytest.raises(NegativeLevel):
            group_level(-1)


class TestCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        rows = [(DescriptorVector(tuple(rng.random(12).round(6).tolist())), i % 3)
                for i in range(5)]
        path = tmp_path / "d.csv"
        write_descriptor_csv(path, rows)
        back = read_descriptor_csv(path)
        assert len(back) == 5
        for (va, la), (vb, lb) in zip(rows, back):
            assert la == lb
            assert np.allclose(va.as_array(), vb.as_array(), atol=5e-7)
        header = path.read_text().splitlines()[0]
        assert header.split(",") == list(DESCRIPTOR_NAMES) + ["label"]
