"""In-memory model of a two-staff piano score fragment.

Staff 1 is the right hand, staff 2 the left hand; voice numbers are scoped
per staff (voice 1 on staff 1 and voice 1 on staff 2 are distinct voices).
All onsets and durations are exact `fractions.Fraction` values in
quarter-note units, measured from the start of the fragment, so round trips
through other representations never accumulate floating point drift.

Fragments are immutable after construction and safe to share across
threads or processes.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Literal

STEP_SEMITONES = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}
VALID_TIME_DENOMS = (1, 2, 4, 8, 16)
MAX_VOICE = 4

Hand = Literal["RH", "LH"]
HAND_STAFF: dict[str, int] = {"RH": 1, "LH": 2}


@dataclass(frozen=True)
class Pitch:
    """A spelled pitch: letter step, semitone alteration, octave (C4 = middle C)."""

    step: str
    alter: int = 0
    octave: int = 4


def midi_number(p: Pitch) -> int:
    """MIDI note number of a spelled pitch (C4 -> 60, F#4 -> 66)."""
    return 12 * (p.octave + 1) + STEP_SEMITONES[p.step] + p.alter


def pitch_sort_key(p: Pitch) -> tuple[int, str, int]:
    return (midi_number(p), p.step, p.alter)


def spell(p: Pitch) -> str:
    """Text spelling, e.g. C4, F#4, Bb3, C##5."""
    acc = "#" * p.alter if p.alter > 0 else "b" * (-p.alter)
    return f"{p.step}{acc}{p.octave}"


def parse_spelling(text: str) -> Pitch:
    """Inverse of :func:`spell`. Raises ValueError on anything else."""
    step = text[0]
    if step not in STEP_SEMITONES or len(text) < 2:
        raise ValueError(f"bad pitch spelling {text!r}")
    body, octave_char = text[1:-1], text[-1]
    if not octave_char.isdigit():
        raise ValueError(f"bad pitch spelling {text!r}")
    if body == "":
        alter = 0
    elif body in ("#", "##"):
        alter = len(body)
    elif body in ("b", "bb"):
        alter = -len(body)
    else:
        raise ValueError(f"bad pitch spelling {text!r}")
    return Pitch(step, alter, int(octave_char))


@dataclass(frozen=True)
class NoteEvent:
    """A timed note, chord, or rest within one (staff, voice).

    `pitches` is empty for a rest; chord members are kept sorted by
    (midi, step, alter). Tie flags apply to the event as a whole.
    """

    onset: Fraction
    duration: Fraction
    pitches: tuple[Pitch, ...]
    voice: int
    staff: int
    tie_start: bool = False
    tie_stop: bool = False

    def __post_init__(self):
        object.__setattr__(self, "onset", Fraction(self.onset))
        object.__setattr__(self, "duration", Fraction(self.duration))
        object.__setattr__(
            self, "pitches", tuple(sorted(self.pitches, key=pitch_sort_key))
        )

    @property
    def is_rest(self) -> bool:
        return not self.pitches

    @property
    def end(self) -> Fraction:
        return self.onset + self.duration


@dataclass(frozen=True)
class Measure:
    index: int
    time_sig: tuple[int, int]
    key_fifths: int
    events: tuple[NoteEvent, ...]

    def __post_init__(self):
        object.__setattr__(self, "time_sig", tuple(self.time_sig))
        object.__setattr__(
            self,
            "events",
            tuple(sorted(self.events, key=lambda e: (e.staff, e.voice, e.onset))),
        )


@dataclass(frozen=True)
class ScoreFragment:
    """An ordered list of measures plus parse-time metadata.

    Training fragments hold at most 16 measures; the type itself allows
    longer scores so the same model covers whole parsed pieces.
    """

    measures: tuple[Measure, ...]
    divisions: int = 1
    title: str | None = None
    source_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "measures", tuple(self.measures))

    def events(self) -> Iterator[NoteEvent]:
        for m in self.measures:
            yield from m.events


def nominal_capacity(time_sig: tuple[int, int]) -> Fraction:
    """Quarter notes that fill a measure of the given signature."""
    return Fraction(time_sig[0] * 4, time_sig[1])


def _voice_sums(measure: Measure) -> dict[tuple[int, int], Fraction]:
    sums: dict[tuple[int, int], Fraction] = {}
    for e in measure.events:
        key = (e.staff, e.voice)
        sums[key] = sums.get(key, Fraction(0)) + e.duration
    return sums


def fragment_layout(f: ScoreFragment) -> list[tuple[Fraction, Fraction]]:
    """(start, length) per measure. Measure 0 may be a shorter pickup; its
    length is then its actual content length."""
    layout = []
    start = Fraction(0)
    for m in f.measures:
        cap = nominal_capacity(m.time_sig)
        if m.index == 0 and m.events:
            content = max(e.end for e in m.events) - start
            if Fraction(0) < content < cap:
                cap = content
        layout.append((start, cap))
        start += cap
    return layout


def total_quarters(f: ScoreFragment) -> Fraction:
    """Total duration of the fragment in quarter notes."""
    return sum((length for _, length in fragment_layout(f)), Fraction(0))


@dataclass(frozen=True)
class Violation:
    measure: int | None
    staff: int | None
    voice: int | None
    rule: str
    message: str


def validate(f: ScoreFragment) -> list[Violation]:
    """Check every structural invariant; returns one record per violation.

    Never raises: downstream modules may rely on `validate(f) == []` as the
    single precondition for accepting a fragment.
    """
    out: list[Violation] = []

    def bad(measure, staff, voice, rule, message):
        out.append(Violation(measure, staff, voice, rule, message))

    for i, m in enumerate(f.measures):
        if m.index != i:
            bad(i, None, None, "measure_index", f"index {m.index}, expected {i}")
        num, den = m.time_sig
        if num < 1 or den not in VALID_TIME_DENOMS:
            bad(i, None, None, "time_sig", f"unsupported signature {num}/{den}")
        if not -7 <= m.key_fifths <= 7:
            bad(i, None, None, "key_range", f"key fifths {m.key_fifths}")

    layout = fragment_layout(f)
    total = sum((length for _, length in layout), Fraction(0))

    for m, (start, cap) in zip(f.measures, layout):
        staves_seen = set()
        by_voice: dict[tuple[int, int], list[NoteEvent]] = {}
        for e in m.events:
            staves_seen.add(e.staff)
            by_voice.setdefault((e.staff, e.voice), []).append(e)
            if e.staff not in (1, 2):
                bad(m.index, e.staff, e.voice, "staff_value", f"staff {e.staff}")
            if not 1 <= e.voice <= MAX_VOICE:
                bad(m.index, e.staff, e.voice, "voice_range", f"voice {e.voice}")
            if e.duration <= 0:
                bad(m.index, e.staff, e.voice, "duration_positive", str(e.duration))
            if e.onset < start or e.end > start + cap:
                bad(m.index, e.staff, e.voice, "bounds",
                    f"event [{e.onset}, {e.end}) outside measure [{start}, {start + cap})")
            if e.end > total:
                bad(m.index, e.staff, e.voice, "fragment_bounds",
                    f"event ends at {e.end}, fragment ends at {total}")
            if e.is_rest and (e.tie_start or e.tie_stop):
                bad(m.index, e.staff, e.voice, "rest_tie", "rest carries a tie flag")
            seen_midi: set[tuple[int, str, int]] = set()
            for p in e.pitches:
                if p.step not in STEP_SEMITONES or abs(p.alter) > 2 or not 0 <= p.octave <= 8:
                    bad(m.index, e.staff, e.voice, "pitch_range", spell(p))
                elif not 0 <= midi_number(p) <= 127:
                    bad(m.index, e.staff, e.voice, "pitch_range", spell(p))
                k = (midi_number(p), p.step, p.alter)
                if k in seen_midi:
                    bad(m.index, e.staff, e.voice, "duplicate_pitch", spell(p))
                seen_midi.add(k)

        for staff in (1, 2):
            if staff not in staves_seen:
                bad(m.index, staff, None, "staff_coverage",
                    "staff has no voice in this measure (rests must be explicit)")

        for (staff, voice), events in sorted(by_voice.items()):
            cursor = start
            for e in events:
                if e.onset < cursor:
                    bad(m.index, staff, voice, "overlap",
                        f"event at {e.onset} overlaps previous ending at {cursor}")
                elif e.onset > cursor:
                    bad(m.index, staff, voice, "gap",
                        f"gap [{cursor}, {e.onset}) without an explicit rest")
                cursor = max(cursor, e.end)
            voiced = sum((e.duration for e in events), Fraction(0))
            if voiced != cap:
                bad(m.index, staff, voice, "capacity",
                    f"voice sums to {voiced}, measure capacity is {cap}")

    # Tie pairing: a tie start needs a contiguous successor in the same
    # (staff, voice) marked tie_stop, and vice versa.
    chains: dict[tuple[int, int], list[NoteEvent]] = {}
    for m in f.measures:
        for e in m.events:
            chains.setdefault((e.staff, e.voice), []).append(e)
    for (staff, voice), events in sorted(chains.items()):
        events.sort(key=lambda e: e.onset)
        for i, e in enumerate(events):
            nxt = events[i + 1] if i + 1 < len(events) else None
            prev = events[i - 1] if i > 0 else None
            if e.tie_start and not (nxt is not None and nxt.onset == e.end and nxt.tie_stop):
                bad(None, staff, voice, "tie_pairing",
                    f"tie start at {e.onset} has no contiguous tie stop")
            if e.tie_stop and not (prev is not None and prev.end == e.onset and prev.tie_start):
                bad(None, staff, voice, "tie_pairing",
                    f"tie stop at {e.onset} has no contiguous tie start")
    return out


def hand_onsets(f: ScoreFragment, hand: Hand) -> list[tuple[Fraction, frozenset[int]]]:
    """Distinct onsets with sounding notes for one hand.

    Pitch sets merge simultaneous voices on the hand's staff; the list is
    sorted by onset and empty for a silent hand.
    """
    staff = HAND_STAFF[hand]
    merged: dict[Fraction, set[int]] = {}
    for e in f.events():
        if e.staff == staff and not e.is_rest:
            merged.setdefault(e.onset, set()).update(midi_number(p) for p in e.pitches)
    return [(onset, frozenset(merged[onset])) for onset in sorted(merged)]


def fragments_equal(a: ScoreFragment, b: ScoreFragment) -> bool:
    """Content equality: onsets, durations, pitch spelling, voice, staff,
    tie flags, time and key signatures. Metadata (divisions, title) is
    ignored."""
    if len(a.measures) != len(b.measures):
        return False
    for ma, mb in zip(a.measures, b.measures):
        if ma.time_sig != mb.time_sig or ma.key_fifths != mb.key_fifths:
            return False
        if ma.events != mb.events:
            return False
    return True
