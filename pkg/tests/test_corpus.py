import numpy as np
import pytest

from helpers import build_fragment, ev, random_fragment
from oracles import midi_of, tonal_pitch_class
from sightgen.corpus import (
    DatasetConfig,
    Discarded,
    build_dataset,
    read_manifest,
    segment,
    transpose,
    write_manifest,
)
from sightgen.difficulty import extract_descriptors, fit_normalizer, gnb_fit
from sightgen.errors import EmptySplit
from sightgen.score import (
    Measure,
    NoteEvent,
    ScoreFragment,
    fragments_equal,
    midi_number,
    spell,
    validate,
)
from sightgen.tokenizer import detokenize
from sightgen import synthetic


def long_score(n_measures, pitch="C4"):
    rows = [{(1, 1): [(4, pitch)], (2, 1): [(4, None)]}] * n_measures
    return build_fragment(rows)


class TestSegment:
    def test_thirty_five_measures(self):
        frags = segment(long_score(35))
        assert len(frags) == 2
        assert all(len(f.measures) == 16 for f in frags)
        assert all(validate(f) == [] for f in frags)
        # second window is rebased to onset zero
        assert frags[1].measures[0].events[0].onset == 0

    def test_exact_sixteen(self):
        score = long_score(16)
        frags = segment(score)
        assert len(frags) == 1
        assert fragments_equal(frags[0], score)

    def test_fifteen_measures_too_short(self):
        assert segment(long_score(15)) == []

    def test_boundary_tie_cut(self):
        rows = []
        for i in range(32):
            tie = i in (15, 16)
            rows.append({(1, 1): [(4, "C4", i == 15)], (2, 1): [(4, None)]})
        score = build_fragment(rows)
        # manually mark the tie stop in measure 16
        measures = list(score.measures)
        m16 = measures[16]
        fixed = tuple(
            NoteEvent(e.onset, e.duration, e.pitches, e.voice, e.staff,
                      e.tie_start, True if not e.is_rest else e.tie_stop)
            for e in m16.events)
        measures[16] = Measure(m16.index, m16.time_sig, m16.key_fifths, fixed)
        score = ScoreFragment(tuple(measures))
        assert validate(score) == []
        frags = segment(score)
        assert validate(frags[0]) == [] and validate(frags[1]) == []
        assert not any(e.tie_start for e in frags[0].measures[-1].events)
        assert not any(e.tie_stop for e in frags[1].measures[0].events)


class TestTranspose:
    def test_c_major_up_tritone_prefers_flats(self):
        frag = build_fragment([{(1, 1): [(4, "C4")], (2, 1): [(4, None)]}])
        out = transpose(frag, +6)
        assert not isinstance(out, Discarded)
        assert out.measures[0].key_fifths == -6
        note = next(e for e in out.events() if not e.is_rest)
        assert spell(note.pitches[0]) == "Gb4"

    def test_f_sharp_major_up_tritone_lands_on_c(self):
        frag = build_fragment([{(1, 1): [(4, "F#4")], (2, 1): [(4, None)]}],
                              key=6)
        out = transpose(frag, +6)
        assert out.measures[0].key_fifths == 0
        note = next(e for e in out.events() if not e.is_rest)
        assert spell(note.pitches[0]) == "C5"

    def test_double_accidental_discarded(self):
        # Ab4 sits six fifths flatward of the naturals; down six more is Ebb
        frag = build_fragment([{(1, 1): [(4, "Ab4")], (2, 1): [(4, None)]}])
        out = transpose(frag, +6)
        assert isinstance(out, Discarded)

    def test_direction_down(self):
        frag = build_fragment([{(1, 1): [(4, "C4")], (2, 1): [(4, None)]}])
        out = transpose(frag, -6)
        note = next(e for e in out.events() if not e.is_rest)
        assert spell(note.pitches[0]) == "Gb3"
        assert midi_number(note.pitches[0]) == 54

    def test_midi_and_fifths_oracle(self):
        rng = np.random.default_rng(31)
        checked = 0
        for i in range(60):
            frag = random_fragment(rng, naturals_only=(i % 3 != 0))
            semis = 6 if i % 2 == 0 else -6
            out = transpose(frag, semis)
            if isinstance(out, Discarded):
                continue
            delta = out.measures[0].key_fifths - frag.measures[0].key_fifths
            assert delta in (-6, 6)
            for ea, eb in zip(frag.events(), out.events()):
                for pa, pb in zip(ea.pitches, eb.pitches):
                    assert midi_of(pb.step, pb.alter, pb.octave) == \
                        midi_of(pa.step, pa.alter, pa.octave) + semis
                    assert tonal_pitch_class(pb.step, pb.alter) == \
                        tonal_pitch_class(pa.step, pa.alter) + delta
                    assert abs(pb.alter) <= 1
            checked += 1
        assert checked >= 30

    def test_validates_and_preserves_rhythm(self):
        rng = np.random.default_rng(8)
        frag = random_fragment(rng, naturals_only=True)
        out = transpose(frag, +6)
        assert validate(out) == []
        for ea, eb in zip(frag.events(), out.events()):
            assert (ea.onset, ea.duration, ea.voice, ea.staff) == \
                (eb.onset, eb.duration, eb.voice, eb.staff)

    def test_non_tritone_rejected(self):
        frag = build_fragment([{(1, 1): [(4, "C4")], (2, 1): [(4, None)]}])
        with pytest.raises(ValueError):
            transpose(frag, 3)


@pytest.fixture(scope="module")
def gnb_and_norm():
    rows = [(extract_descriptors(f), lab)
            for _, lab, f in synthetic.make_corpus(30, seed=99)]
    raw = np.stack([v.as_array() for v, _ in rows])
    norm = fit_normalizer(raw)
    X = np.stack([norm.apply(v) for v in raw])
    gnb = gnb_fit(X, [l for _, l in rows])
    return gnb, norm


def synth_sources(n, seed=0):
    return [(name, frag) for name, _, frag in synthetic.make_corpus(n, seed=seed)]


class TestBuildDataset:
    def test_split_is_piece_disjoint(self, gnb_and_norm):
        gnb, norm = gnb_and_norm
        split = build_dataset(synth_sources(12), DatasetConfig(seed=1, augment=False),
                              gnb, norm)
        train_pieces = {r.provenance.source for r in split.train}
        val_pieces = {r.provenance.source for r in split.validation}
        assert train_pieces.isdisjoint(val_pieces)
        assert len(val_pieces) >= 1
        total = len(train_pieces) + len(val_pieces)
        assert abs(len(train_pieces) - round(0.8 * total)) <= 1

    def test_balance_downsamples_to_minority(self, gnb_and_norm):
        gnb, norm = gnb_and_norm
        # labels 0,1,2 round-robin over 13 pieces -> unbalanced after split
        split = build_dataset(synth_sources(13), DatasetConfig(seed=0, augment=False),
                              gnb, norm)
        counts = {}
        for r in split.train:
            counts[r.label] = counts.get(r.label, 0) + 1
        assert len(set(counts.values())) == 1

    def test_no_balance_keeps_all(self, gnb_and_norm):
        gnb, norm = gnb_and_norm
        cfg = DatasetConfig(seed=0, augment=False, balance=False)
        split = build_dataset(synth_sources(13), cfg, gnb, norm)
        assert len(split.train) >= len(
            build_dataset(synth_sources(13), DatasetConfig(seed=0, augment=False),
                          gnb, norm).train)

    def test_augmentation_multiplies_train_only(self, gnb_and_norm):
        gnb, norm = gnb_and_norm
        base = build_dataset(synth_sources(9), DatasetConfig(seed=2, augment=False),
                             gnb, norm)
        aug = build_dataset(synth_sources(9), DatasetConfig(seed=2, augment=True,
                                                            balance=False), gnb, norm)
        base_unbalanced = build_dataset(
            synth_sources(9), DatasetConfig(seed=2, augment=False, balance=False),
            gnb, norm)
        assert len(aug.validation) == len(base.validation)
        assert all(r.provenance.transposition == 0 for r in aug.validation)
        ratio = len(aug.train) / len(base_unbalanced.train)
        assert 1.0 < ratio <= 3.0
        transposed = [r for r in aug.train if r.provenance.transposition != 0]
        assert transposed and all(r.provenance.transposition in (-6, 6)
                                  for r in transposed)

    def test_records_satisfy_invariants(self, gnb_and_norm):
        gnb, norm = gnb_and_norm
        split = build_dataset(synth_sources(6), DatasetConfig(seed=3, augment=True),
                              gnb, norm)
        for r in split.train[:10] + split.validation[:5]:
            frag = detokenize(list(r.tokens)).fragment
            assert fragments_equal(frag, r.fragment)
            feats = norm.apply(extract_descriptors(r.fragment))
            assert np.allclose(feats, np.asarray(r.features), atol=1e-12)
            assert gnb.predict(feats) == r.label

    def test_too_few_pieces(self, gnb_and_norm):
        gnb, norm = gnb_and_norm
        with pytest.raises(EmptySplit):
            build_dataset(synth_sources(2), DatasetConfig(), gnb, norm)

    def test_missing_class_raises(self, gnb_and_norm):
        gnb, norm = gnb_and_norm
        sources = [(n, f) for n, lab, f in synthetic.make_corpus(8, seed=0, labels=(0,))]
        with pytest.raises(EmptySplit):
            build_dataset(sources, DatasetConfig(seed=0, augment=False), gnb, norm)

    def test_seeded_determinism(self, gnb_and_norm, tmp_path):
        gnb, norm = gnb_and_norm
        for run in ("a", "b"):
            split = build_dataset(synth_sources(12), DatasetConfig(seed=5), gnb, norm)
            write_manifest(tmp_path / f"{run}.jsonl", split.train, seed=5)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


class TestManifest:
    def test_round_trip(self, gnb_and_norm, tmp_path):
        gnb, norm = gnb_and_norm
        split = build_dataset(synth_sources(6), DatasetConfig(seed=4, augment=False),
                              gnb, norm)
        cfg = DatasetConfig(seed=4, augment=False)
        write_manifest(tmp_path / "m.jsonl", split.train, seed=4, config=cfg)
        header, records = read_manifest(tmp_path / "m.jsonl")
        assert header["format"] == "sightgen-dataset v1"
        assert header["config"]["augment"] is False
        assert len(records) == len(split.train)
        for a, b in zip(split.train, records):
            assert a.tokens == b.tokens
            assert a.label == b.label
            assert a.provenance == b.provenance
            assert np.allclose(a.features, b.features)
