"""Synthetic 16-bar piano fragments in three difficulty styles.

A stand-in corpus for demos and desk-scale experiments when no MusicXML
collection is at hand. The styles are deliberately far apart on every
descriptor axis (range, entropy, rhythmic density, displacement), so a
descriptor-based labeler separates them almost perfectly:

    easy      narrow diatonic melody in quarters/halves over slow bass
    medium    wider white-key melody in eighths/quarters, moving bass
    advanced  fast wide-register lines with accidentals, chords, leaps
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .score import Measure, NoteEvent, Pitch, ScoreFragment

MEASURES = 16
CAPACITY = Fraction(4)

# (step, alter, octave) pools per class, ordered by pitch height
_EASY_RH = [("C", 0, 4), ("D", 0, 4), ("E", 0, 4), ("F", 0, 4), ("G", 0, 4)]
_EASY_LH = [("C", 0, 3), ("G", 0, 2), ("F", 0, 2)]
_MED_RH = [("C", 0, 4), ("D", 0, 4), ("E", 0, 4), ("F", 0, 4), ("G", 0, 4),
           ("A", 0, 4), ("B", 0, 4), ("C", 0, 5), ("D", 0, 5), ("E", 0, 5),
           ("F", 0, 5), ("G", 0, 5)]
_MED_LH = [("C", 0, 2), ("E", 0, 2), ("G", 0, 2), ("A", 0, 2), ("C", 0, 3),
           ("E", 0, 3), ("G", 0, 3)]
_ADV_RH = [("C", 0, 3), ("D", 0, 3), ("E", 0, 3), ("F", 1, 3), ("G", 0, 3),
           ("A", 0, 3), ("B", -1, 3), ("B", 0, 3), ("C", 0, 4), ("C", 1, 4),
           ("D", 0, 4), ("E", -1, 4), ("E", 0, 4), ("F", 0, 4), ("F", 1, 4),
           ("G", 0, 4), ("G", 1, 4), ("A", 0, 4), ("B", -1, 4), ("B", 0, 4),
           ("C", 0, 5), ("C", 1, 5), ("D", 0, 5), ("E", -1, 5), ("E", 0, 5),
           ("F", 0, 5), ("F", 1, 5), ("G", 0, 5), ("A", 0, 5), ("B", 0, 5),
           ("C", 0, 6), ("D", 0, 6), ("E", 0, 6)]
_ADV_LH = [("C", 0, 1), ("G", 0, 1), ("A", 0, 1), ("B", -1, 1), ("C", 0, 2),
           ("D", 0, 2), ("E", -1, 2), ("E", 0, 2), ("F", 0, 2), ("F", 1, 2),
           ("G", 0, 2), ("A", 0, 2), ("B", -1, 2), ("C", 0, 3), ("D", 0, 3),
           ("E", 0, 3), ("G", 0, 3)]

# (durations in quarters, weights), per class and hand
_STYLES = {
    0: dict(rh_pool=_EASY_RH, lh_pool=_EASY_LH,
            rh_durs=([Fraction(1), Fraction(2)], [0.7, 0.3]),
            lh_durs=([Fraction(2), Fraction(4)], [0.4, 0.6]),
            rh_step=1, lh_step=1, chord_p=0.0, lh_chord_p=0.0),
    1: dict(rh_pool=_MED_RH, lh_pool=_MED_LH,
            rh_durs=([Fraction(1, 2), Fraction(1), Fraction(3, 2)], [0.4, 0.5, 0.1]),
            lh_durs=([Fraction(1), Fraction(2)], [0.6, 0.4]),
            rh_step=3, lh_step=2, chord_p=0.1, lh_chord_p=0.0),
    2: dict(rh_pool=_ADV_RH, lh_pool=_ADV_LH,
            rh_durs=([Fraction(1, 4), Fraction(1, 2), Fraction(1)], [0.3, 0.5, 0.2]),
            lh_durs=([Fraction(1, 2), Fraction(1)], [0.4, 0.6]),
            rh_step=7, lh_step=5, chord_p=0.3, lh_chord_p=0.2),
}


def _walk(pool, durs, weights, step, chord_p, rng, measures):
    """Random walk over the pitch pool, one voice, filling each measure."""
    values, probs = durs, np.asarray(weights) / np.sum(weights)
    idx = int(rng.integers(0, len(pool)))
    events_by_measure = []
    onset = Fraction(0)
    for _ in range(measures):
        remaining = CAPACITY
        events = []
        while remaining > 0:
            choices = [d for d in values if d <= remaining]
            if not choices:
                dur = remaining
            else:
                p = np.asarray([probs[values.index(d)] for d in choices])
                dur = choices[int(rng.choice(len(choices), p=p / p.sum()))]
            idx = int(np.clip(idx + rng.integers(-step, step + 1), 0, len(pool) - 1))
            pitches = [Pitch(*pool[idx])]
            if rng.random() < chord_p and idx + 2 < len(pool):
                pitches.append(Pitch(*pool[idx + 2]))
            events.append((onset, dur, tuple(pitches)))
            onset += dur
            remaining -= dur
        events_by_measure.append(events)
    return events_by_measure


def make_fragment(label: int, rng: np.random.Generator,
                  source_id: str | None = None) -> ScoreFragment:
    """One 16-measure 4/4 fragment in the style of the given class."""
    style = _STYLES[label]
    rh = _walk(style["rh_pool"], *style["rh_durs"], style["rh_step"],
               style["chord_p"], rng, MEASURES)
    lh = _walk(style["lh_pool"], *style["lh_durs"], style["lh_step"],
               style["lh_chord_p"], rng, MEASURES)
    measures = []
    for i in range(MEASURES):
        events = [NoteEvent(onset, dur, pitches, 1, 1) for onset, dur, pitches in rh[i]]
        events += [NoteEvent(onset, dur, pitches, 1, 2) for onset, dur, pitches in lh[i]]
        measures.append(Measure(i, (4, 4), 0, tuple(events)))
    return ScoreFragment(tuple(measures), source_id=source_id)


def make_corpus(n_pieces: int, seed: int = 0,
                labels: tuple[int, ...] = (0, 1, 2)) -> list[tuple[str, int, ScoreFragment]]:
    """(name, true_label, fragment) triples, classes round-robin."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_pieces):
        label = labels[i % len(labels)]
        name = f"synth_{label}_{i:05d}.musicxml"
        out.append((name, label, make_fragment(label, rng, source_id=name)))
    return out
