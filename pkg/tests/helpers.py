"""Shared fragment builders for the test suite."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from sightgen.score import Measure, NoteEvent, ScoreFragment, parse_spelling


def ev(onset, duration, content, voice=1, staff=1, tie_start=False, tie_stop=False):
    """NoteEvent shorthand: content is None (rest), a spelling, or a list."""
    if content is None:
        pitches = ()
    elif isinstance(content, str):
        pitches = (parse_spelling(content),)
    else:
        pitches = tuple(parse_spelling(s) for s in content)
    return NoteEvent(Fraction(onset), Fraction(duration), pitches, voice, staff,
                     tie_start, tie_stop)


def measure_from_rows(index, start, time_sig, key, rows):
    """rows: {(staff, voice): [(duration, content) or (duration, content, tie_start)]}
    Each voice fills the measure from its start; ties are flagged pairwise
    by the caller via 3-tuples."""
    events = []
    for (staff, voice), entries in sorted(rows.items()):
        onset = Fraction(start)
        pending_tie = False
        for entry in entries:
            duration, content, *rest = entry
            tie_start = bool(rest[0]) if rest else False
            events.append(ev(onset, duration, content, voice, staff,
                             tie_start=tie_start, tie_stop=pending_tie))
            pending_tie = tie_start
            onset += Fraction(duration)
    return Measure(index, time_sig, key, tuple(events))


def build_fragment(measure_rows, time_sig=(4, 4), key=0):
    """measure_rows: list of row dicts (see measure_from_rows); every measure
    uses the same signature unless a (time_sig, key, rows) triple is given."""
    measures = []
    start = Fraction(0)
    for i, item in enumerate(measure_rows):
        if isinstance(item, tuple):
            sig, k, rows = item
        else:
            sig, k, rows = time_sig, key, item
        m = measure_from_rows(i, start, sig, k, rows)
        measures.append(m)
        if m.events:
            start = max(e.end for e in m.events)
        else:
            start += Fraction(sig[0] * 4, sig[1])
    return ScoreFragment(tuple(measures))


def simple_fragment(rh=((1, "C4"), (3, None)), lh=((4, None),), time_sig=(4, 4), key=0):
    """One-measure fragment from (duration, content) rows per hand."""
    return build_fragment([{(1, 1): list(rh), (2, 1): list(lh)}],
                          time_sig=time_sig, key=key)


_POOL_NATURAL = ["C3", "D3", "E3", "F3", "G3", "A3", "B3", "C4", "D4", "E4",
                 "F4", "G4", "A4", "B4", "C5", "D5", "E5"]
_POOL_SPELLED = _POOL_NATURAL + ["F#4", "Bb3", "C#5", "Eb4", "G#3"]
_DUR_CHOICES = [Fraction(1, 4), Fraction(1, 3), Fraction(1, 2), Fraction(2, 3),
                Fraction(1), Fraction(3, 2), Fraction(2)]
_SIGS = [(4, 4), (3, 4), (2, 4), (6, 8)]


def random_fragment(rng: np.random.Generator, n_measures=2, naturals_only=False,
                    allow_ties=True, allow_pickup=False):
    """A random valid fragment: random signature, one or two voices per
    staff, capacity-exact voices, occasional chords, rests, and ties."""
    pool = _POOL_NATURAL if naturals_only else _POOL_SPELLED
    sig = _SIGS[rng.integers(0, len(_SIGS))]
    cap = Fraction(sig[0] * 4, sig[1])
    key = int(rng.integers(-3, 4))
    pickup = allow_pickup and rng.random() < 0.3 and n_measures > 1
    measures = []
    start = Fraction(0)
    for mi in range(n_measures):
        mcap = cap
        if pickup and mi == 0:
            mcap = cap / 2
        events = []
        for staff in (1, 2):
            n_voices = 2 if rng.random() < 0.2 else 1
            for voice in range(1, n_voices + 1):
                onset = start
                remaining = mcap
                while remaining > 0:
                    choices = [d for d in _DUR_CHOICES if d <= remaining]
                    dur = choices[rng.integers(0, len(choices))] if choices else remaining
                    if rng.random() < 0.85:
                        k = 1 + (rng.random() < 0.25) + (rng.random() < 0.1)
                        idx = sorted(set(rng.integers(0, len(pool), size=k).tolist()))
                        content = [pool[i] for i in idx]
                    else:
                        content = None
                    events.append(ev(onset, dur, content, voice, staff))
                    onset += dur
                    remaining -= dur
        measures.append(Measure(mi, sig, key, tuple(events)))
        start += mcap

    frag = ScoreFragment(tuple(measures))
    if allow_ties:
        frag = _add_random_ties(frag, rng)
    return frag


def _add_random_ties(frag: ScoreFragment, rng) -> ScoreFragment:
    chains: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for mi, m in enumerate(frag.measures):
        for eidx, e in enumerate(m.events):
            chains.setdefault((e.staff, e.voice), []).append((mi, eidx))
    marks: dict[tuple[int, int], list[bool]] = {}
    for refs in chains.values():
        refs.sort(key=lambda r: frag.measures[r[0]].events[r[1]].onset)
        for a, b in zip(refs, refs[1:]):
            ea = frag.measures[a[0]].events[a[1]]
            eb = frag.measures[b[0]].events[b[1]]
            if not ea.is_rest and not eb.is_rest and ea.end == eb.onset \
                    and rng.random() < 0.2:
                marks.setdefault(a, [False, False])[0] = True
                marks.setdefault(b, [False, False])[1] = True
    if not marks:
        return frag
    measures = []
    for mi, m in enumerate(frag.measures):
        events = []
        for eidx, e in enumerate(m.events):
            ts, tp = marks.get((mi, eidx), (False, False))
            events.append(NoteEvent(e.onset, e.duration, e.pitches, e.voice, e.staff,
                                    e.tie_start or ts, e.tie_stop or tp))
        measures.append(Measure(m.index, m.time_sig, m.key_fifths, tuple(events)))
    return ScoreFragment(tuple(measures))
