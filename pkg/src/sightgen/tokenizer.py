"""Linear token grammar for score fragments and the token vocabulary.

A fragment is flattened measure by measure:

    time_4/4 key_0 bar staff_1 voice_1 dur_12 note_C4 dur_36 rest
                       staff_2 voice_1 dur_48 rest ... END

`time_N/D` and `key_K` appear before measure 0 and again before any measure
where they change. Inside a measure, staff 1 precedes staff 2; voices are
listed in ascending per-staff number; each event is `dur_<twelfths>`
followed by ascending `note_<spelling>` tokens (or one `rest`), with `tie`
directly after the notes of an event that starts a tie. Durations resolve
to 1/12 of a quarter note, so `dur_12` is a quarter and `dur_48` a 4/4
whole measure.

Detokenization is deliberately lenient: model output is repaired (rests
padded, overfull measures truncated, stray tokens skipped) with one warning
per repair, so the evaluation harness can score imperfect samples.
"""

from __future__ import annotations

import bisect
import hashlib
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import DurationNotRepresentable, EmptyCorpus, UnknownId, Unparseable
from .score import (
    Measure,
    NoteEvent,
    Pitch,
    ScoreFragment,
    midi_number,
    nominal_capacity,
    parse_spelling,
    pitch_sort_key,
    spell,
    MAX_VOICE,
    VALID_TIME_DENOMS,
)

PAD, UNK, END, SEP = "PAD", "UNK", "END", "SEP"
RESERVED = (PAD, UNK, END, SEP)

TWELFTHS = 12          # duration grid: twelfths of a quarter note
MAX_DUR = 192          # dur token values are 1..192 (16 quarters)
MAX_MEASURES = 16

_NOTE_RE = re.compile(r"note_([A-G])(#{1,2}|b{1,2})?([0-8])$")
_TIME_RE = re.compile(r"time_(\d+)/(\d+)$")
_KEY_RE = re.compile(r"key_(-?\d+)$")
_VOICE_RE = re.compile(r"voice_([1-9]\d*)$")
_DUR_RE = re.compile(r"dur_([1-9]\d*)$")
_STAFF_RE = re.compile(r"staff_([12])$")


@dataclass(frozen=True)
class TokenInfo:
    """Classification of one token text."""

    kind: str                       # bar, rest, tie, end, time, key, staff, voice, dur, note, other
    value: object = None            # payload per kind


def classify(text: str) -> TokenInfo:
    if text == "bar":
        return TokenInfo("bar")
    if text == "rest":
        return TokenInfo("rest")
    if text == "tie":
        return TokenInfo("tie")
    if text == END:
        return TokenInfo("end")
    m = _TIME_RE.match(text)
    if m:
        num, den = int(m.group(1)), int(m.group(2))
        if num >= 1 and den in VALID_TIME_DENOMS:
            return TokenInfo("time", (num, den))
    m = _KEY_RE.match(text)
    if m and -7 <= int(m.group(1)) <= 7:
        return TokenInfo("key", int(m.group(1)))
    m = _STAFF_RE.match(text)
    if m:
        return TokenInfo("staff", int(m.group(1)))
    m = _VOICE_RE.match(text)
    if m:
        return TokenInfo("voice", int(m.group(1)))
    m = _DUR_RE.match(text)
    if m and 1 <= int(m.group(1)) <= MAX_DUR:
        return TokenInfo("dur", int(m.group(1)))
    m = _NOTE_RE.match(text)
    if m:
        pitch = parse_spelling(text[5:])
        if 0 <= midi_number(pitch) <= 127:
            return TokenInfo("note", pitch)
    return TokenInfo("other")


def structural_inventory() -> list[str]:
    """Closed token set that is always kept in the vocabulary, so that
    constrained sampling can always fill a measure exactly."""
    tokens = ["bar", "rest", "tie", "staff_1", "staff_2"]
    tokens += [f"voice_{v}" for v in range(1, MAX_VOICE + 1)]
    tokens += [f"dur_{d}" for d in range(1, MAX_DUR + 1)]
    tokens += [f"key_{k}" for k in range(-7, 8)]
    tokens += [f"time_{n}/{d}" for n in range(1, 17) for d in VALID_TIME_DENOMS]
    return tokens


def tokenize(f: ScoreFragment) -> list[str]:
    """Flatten a valid fragment (at most 16 measures) into token texts."""
    if len(f.measures) > MAX_MEASURES:
        raise ValueError(f"fragment has {len(f.measures)} measures, limit is {MAX_MEASURES}")
    out: list[str] = []
    prev_time: tuple[int, int] | None = None
    prev_key: int | None = None
    for m in f.measures:
        if m.time_sig != prev_time:
            out.append(f"time_{m.time_sig[0]}/{m.time_sig[1]}")
            prev_time = m.time_sig
        if m.key_fifths != prev_key:
            out.append(f"key_{m.key_fifths}")
            prev_key = m.key_fifths
        out.append("bar")
        by_voice: dict[tuple[int, int], list[NoteEvent]] = {}
        for e in m.events:
            by_voice.setdefault((e.staff, e.voice), []).append(e)
        for staff in (1, 2):
            out.append(f"staff_{staff}")
            voices = sorted(v for s, v in by_voice if s == staff)
            for voice in voices:
                out.append(f"voice_{voice}")
                for e in sorted(by_voice[(staff, voice)], key=lambda e: e.onset):
                    twelfths = e.duration * TWELFTHS
                    if twelfths.denominator != 1 or not 1 <= twelfths.numerator <= MAX_DUR:
                        raise DurationNotRepresentable(
                            f"duration {e.duration} is not on the 1/12-quarter grid")
                    out.append(f"dur_{twelfths.numerator}")
                    if e.is_rest:
                        out.append("rest")
                    else:
                        out.extend("note_" + spell(p) for p in e.pitches)
                        if e.tie_start:
                            out.append("tie")
    out.append(END)
    return out


@dataclass
class DetokenizeResult:
    fragment: ScoreFragment
    warnings: list[str] = field(default_factory=list)


@dataclass
class _VoiceRun:
    events: list[tuple[int, list[Pitch] | None, bool]] = field(default_factory=list)
    # (twelfths, pitches or None for rest, tie_start)


def detokenize(tokens: Sequence[str]) -> DetokenizeResult:
    """Greedy, repairing parse of token texts back into a fragment.

    Raises :class:`Unparseable` only when not a single measure can be
    recovered.
    """
    warnings: list[str] = []
    measures: list[Measure] = []
    time_sig = (4, 4)
    saw_time = False
    key = 0
    saw_key = False

    staff: int | None = None
    voice: int | None = None
    runs: dict[tuple[int, int], _VoiceRun] = {}
    pending_dur: int | None = None
    in_measure = False
    last_event: tuple[int, int] | None = None  # (staff, voice) of the open event
    start = Fraction(0)
    saw_end = False

    def warn(msg: str) -> None:
        warnings.append(msg)

    def close_measure() -> None:
        nonlocal runs, staff, voice, pending_dur, in_measure, last_event, start
        if not in_measure:
            return
        midx = len(measures)
        if pending_dur is not None:
            warn(f"measure {midx}: dangling dur token dropped")
        cap_q = nominal_capacity(time_sig)
        cap = int(cap_q * TWELFTHS) if (cap_q * TWELFTHS).denominator == 1 else None
        if cap is None:
            warn(f"measure {midx}: capacity off the 1/12 grid; coerced")
            cap = round(float(cap_q * TWELFTHS))
        events: list[NoteEvent] = []
        is_first = midx == 0
        lengths = {k: sum(t for t, _, _ in r.events) for k, r in runs.items()}
        target = cap
        if is_first and lengths and max(lengths.values()) < cap and min(lengths.values()) > 0:
            target = max(lengths.values())  # pickup measure
        for s in (1, 2):
            voices = sorted(v for ss, v in runs if ss == s)
            if not voices:
                warn(f"measure {midx}: staff {s} missing; padded with rest")
                other = [v for ss, v in runs if ss != s]
                pad_voice = min(v for v in range(1, 6) if v not in other)
                runs[(s, pad_voice)] = _VoiceRun()
                voices = [pad_voice]
            for v in voices:
                run = runs[(s, v)]
                cursor = 0
                evs: list[tuple[int, list[Pitch] | None, bool]] = []
                for twelfths, pitches, tie in run.events:
                    if cursor >= target:
                        warn(f"measure {midx}: staff {s} voice {v} overfull; truncated")
                        break
                    if cursor + twelfths > target:
                        warn(f"measure {midx}: staff {s} voice {v} overfull; event shortened")
                        twelfths = target - cursor
                        tie = False
                    evs.append((twelfths, pitches, tie))
                    cursor += twelfths
                if cursor < target:
                    if run.events:
                        warn(f"measure {midx}: staff {s} voice {v} underfull; padded with rest")
                    evs.append((target - cursor, None, False))
                onset = start
                for twelfths, pitches, tie in evs:
                    dur = Fraction(twelfths, TWELFTHS)
                    events.append(NoteEvent(onset, dur, tuple(pitches) if pitches else (),
                                            min(v, MAX_VOICE), s, tie and pitches is not None, False))
                    onset += dur
        measures.append(Measure(midx, time_sig, key, tuple(events)))
        start += Fraction(target, TWELFTHS)
        runs = {}
        staff = voice = None
        pending_dur = None
        in_measure = False
        last_event = None

    for text in tokens:
        info = classify(text)
        kind = info.kind
        if kind == "end":
            saw_end = True
            break
        if kind == "time":
            close_measure()
            time_sig = info.value
            saw_time = True
        elif kind == "key":
            close_measure()
            key = info.value
            saw_key = True
        elif kind == "bar":
            close_measure()
            if len(measures) >= MAX_MEASURES:
                warn(f"bar {len(measures) + 1} beyond the 16-measure limit; ignored remainder")
                break
            if not saw_time:
                warn("no time signature before first bar; assuming 4/4")
                saw_time = True
            if not saw_key:
                warn("no key signature before first bar; assuming key_0")
                saw_key = True
            in_measure = True
        elif not in_measure:
            warn(f"token {text!r} outside a measure; skipped")
        elif kind == "staff":
            staff = info.value
            voice = None
            pending_dur = None
            last_event = None
        elif kind == "voice":
            if staff is None:
                warn(f"voice token before any staff; skipped")
                continue
            voice = min(info.value, MAX_VOICE)
            if info.value > MAX_VOICE:
                warn(f"voice_{info.value} clamped to {MAX_VOICE}")
            if (staff, voice) in runs:
                warn(f"voice {voice} repeated on staff {staff}; events merged")
            runs.setdefault((staff, voice), _VoiceRun())
            pending_dur = None
            last_event = None
        elif kind == "dur":
            if staff is None or voice is None:
                warn(f"dur token without staff/voice; skipped")
                continue
            if pending_dur is not None:
                warn("dur token replacing an unused dur; previous dropped")
            pending_dur = info.value
            last_event = None
        elif kind == "note":
            if pending_dur is None and last_event is None:
                warn("note token without a duration; skipped")
                continue
            run = runs[(staff, voice)]
            if pending_dur is not None:
                run.events.append((pending_dur, [info.value], False))
                pending_dur = None
                last_event = (staff, voice)
            else:
                pitches = run.events[-1][1]
                if pitches is None:
                    warn("note token after rest; skipped")
                    continue
                if any(pitch_sort_key(p) == pitch_sort_key(info.value) for p in pitches):
                    warn(f"duplicate chord pitch {text}; skipped")
                    continue
                pitches.append(info.value)
        elif kind == "rest":
            if pending_dur is None:
                warn("rest token without a duration; skipped")
                continue
            runs[(staff, voice)].events.append((pending_dur, None, False))
            pending_dur = None
            last_event = None
        elif kind == "tie":
            if last_event is None:
                warn("tie token without an open note event; skipped")
                continue
            run = runs[last_event]
            twelfths, pitches, _ = run.events[-1]
            run.events[-1] = (twelfths, pitches, True)
            last_event = None
        else:
            warn(f"unrecognized token {text!r}; skipped")

    if in_measure:
        close_measure()
    if not saw_end and measures:
        warnings.append("sequence ended without END")
    if not measures:
        raise Unparseable("no complete measure could be recovered")

    measures = _derive_tie_stops(measures, warnings)
    return DetokenizeResult(ScoreFragment(tuple(measures)), warnings)


def _derive_tie_stops(measures: list[Measure], warnings: list[str]) -> list[Measure]:
    """tie_stop is implied: the contiguous successor of a tie_start event in
    the same (staff, voice) stops the tie. Dangling starts are dropped."""
    chains: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for mi, m in enumerate(measures):
        for ei, e in enumerate(m.events):
            chains.setdefault((e.staff, e.voice), []).append((mi, ei))
    stops: set[tuple[int, int]] = set()
    drops: set[tuple[int, int]] = set()
    for (s, v), refs in chains.items():
        refs.sort(key=lambda r: measures[r[0]].events[r[1]].onset)
        for i, (mi, ei) in enumerate(refs):
            e = measures[mi].events[ei]
            if not e.tie_start:
                continue
            nxt = refs[i + 1] if i + 1 < len(refs) else None
            if nxt is None:
                drops.add((mi, ei))
                warnings.append(f"measure {mi}: dangling tie dropped")
                continue
            ne = measures[nxt[0]].events[nxt[1]]
            if ne.onset != e.end or ne.is_rest:
                drops.add((mi, ei))
                warnings.append(f"measure {mi}: tie into a rest or gap dropped")
            else:
                stops.add(nxt)
    out = []
    for mi, m in enumerate(measures):
        events = []
        for ei, e in enumerate(m.events):
            tie_start = e.tie_start and (mi, ei) not in drops
            tie_stop = (mi, ei) in stops
            if (tie_start, tie_stop) != (e.tie_start, e.tie_stop):
                e = NoteEvent(e.onset, e.duration, e.pitches, e.voice, e.staff,
                              tie_start, tie_stop)
            events.append(e)
        out.append(Measure(m.index, m.time_sig, m.key_fifths, tuple(events)))
    return out


def write_token_file(path, sequences: Iterable[Sequence[str]]) -> None:
    """One sequence per line, tokens separated by single spaces."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(" ".join(seq) + "\n")


def read_token_file(path) -> list[list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines() if line.strip()]


# --- vocabulary ---

VOCAB_HEADER = "SIGHTGEN-VOCAB v1"


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int]
    counts: dict[str, int]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self.token_to_id[UNK]
        return [self.token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise UnknownId(f"id {i} outside vocabulary of size {len(self)}")
            out.append(self.id_to_token[i])
        return out

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def end_id(self) -> int:
        return self.token_to_id[END]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    def to_bytes(self) -> bytes:
        lines = [VOCAB_HEADER]
        for i, tok in enumerate(self.id_to_token):
            lines.append(f"{tok}\t{i}\t{self.counts.get(tok, 0)}")
        return ("\n".join(lines) + "\n").encode("utf-8")

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != VOCAB_HEADER:
            raise UnknownId(f"{path}: not a {VOCAB_HEADER} file")
        id_to_token: list[str] = []
        counts: dict[str, int] = {}
        for line in lines[1:]:
            tok, idx, count = line.split("\t")
            if int(idx) != len(id_to_token):
                raise UnknownId(f"{path}: ids out of order")
            id_to_token.append(tok)
            counts[tok] = int(count)
        return cls(id_to_token, {t: i for i, t in enumerate(id_to_token)}, counts)


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 50,
                extra_tokens: Iterable[str] = ()) -> Vocabulary:
    """Count tokens over the corpus and keep music tokens seen at least
    `min_count` times. Reserved, structural, prompt-template, and
    `extra_tokens` entries are always kept; ids are reserved-first, then
    lexicographic."""
    from .prompt import prompt_token_inventory

    counts: dict[str, int] = {}
    n_seqs = 0
    for seq in corpus:
        n_seqs += 1
        for tok in seq:
            counts[tok] = counts.get(tok, 0) + 1
    if n_seqs == 0:
        raise EmptyCorpus("vocabulary construction needs at least one sequence")

    keep: set[str] = set(structural_inventory())
    keep.update(prompt_token_inventory())
    keep.update(extra_tokens)
    for tok, count in counts.items():
        if tok in RESERVED:
            continue
        kind = classify(tok).kind
        if kind not in ("note", "other"):
            keep.add(tok)      # structural by pattern, never pruned
        elif count >= min_count:
            keep.add(tok)
    keep.difference_update(RESERVED)

    id_to_token = list(RESERVED) + sorted(keep)
    return Vocabulary(
        id_to_token=id_to_token,
        token_to_id={t: i for i, t in enumerate(id_to_token)},
        counts={t: counts.get(t, 0) for t in id_to_token},
    )



# --- legal-successor relation for constrained sampling ---

class GrammarState:
    """Token-by-token automaton over the grammar above.

    Tracks the grammar phase, the remaining twelfths of the open voice, and
    the chord ordering constraint. :meth:`legal_kinds` names exactly the
    successor tokens that keep the sequence well formed and measure-exact,
    which is what the sampler's grammar filter applies; `bar_limit` caps the
    measure count by masking everything but END once reached.
    """

    def __init__(self, bar_limit: int = MAX_MEASURES):
        self.bar_limit = bar_limit
        self.phase = "seq_time"   # seq_time seq_key pre_measure staff voice dur event chord voice_done
        self.meta_sub = "any"     # pre_measure sub-state: any, after_time, after_key
        self.capacity = 48        # twelfths per measure under the current signature
        self.bars = 0             # completed measures
        self.staff = 0
        self.voice = 0
        self.remaining = 0
        self.event_dur = 0
        self.last_pitch_key: tuple[int, str, int] | None = None
        self.complete = False

    def measure_complete(self) -> bool:
        return self.phase == "pre_measure" and self.bars > 0

    def _continuations(self, after: int) -> list[tuple[str, object]]:
        if after > 0:
            return [("dur", min(after, MAX_DUR))]
        out: list[tuple[str, object]] = []
        if self.voice < MAX_VOICE:
            out.append(("voice", self.voice + 1))
        if self.staff == 1:
            out.append(("staff", 2))
        else:
            if self.bars + 1 >= self.bar_limit:
                out.append(("end", None))
            else:
                out.extend([("time", None), ("key", None), ("bar", None), ("end", None)])
        return out

    def legal_kinds(self, for_sampling: bool = False) -> list[tuple[str, object]]:
        """(kind, constraint) pairs. Constraint meaning: dur -> max value;
        voice -> min value; staff -> exact value; note -> exclusive lower
        sort key or None; other kinds -> None.

        `for_sampling` restricts ties to positions with room left in the
        voice: a cross-measure tie is grammatical when tokenizing real
        scores, but a sampler must not open one it cannot guarantee to
        close."""
        if self.complete:
            return []
        p = self.phase
        if p == "seq_time":
            return [("time", None)]
        if p == "seq_key":
            return [("key", None)]
        if p == "pre_measure":
            if self.bars >= self.bar_limit:
                return [("end", None)]
            if self.meta_sub == "after_key":
                return [("bar", None)]
            if self.meta_sub == "after_time":
                return [("key", None), ("bar", None)]
            out = [("time", None), ("key", None), ("bar", None)]
            if self.bars >= 1:
                out.append(("end", None))
            return out
        if p == "staff":
            return [("staff", self.staff + 1)]
        if p == "voice":
            return [("voice", self.voice + 1)]
        if p == "dur":
            return [("dur", min(self.remaining, MAX_DUR))]
        if p == "event":
            return [("note", None), ("rest", None)]
        if p == "chord":
            after = self.remaining - self.event_dur
            out = [("note", self.last_pitch_key)]
            if after > 0 or not for_sampling:
                out.append(("tie", None))
            out.extend(self._continuations(after))
            return out
        if p == "voice_done":
            return self._continuations(0)
        raise AssertionError(p)

    def allows(self, text: str, for_sampling: bool = False) -> bool:
        info = classify(text)
        for kind, constraint in self.legal_kinds(for_sampling):
            if kind != info.kind:
                continue
            if kind == "dur":
                if info.value <= constraint:
                    return True
            elif kind == "voice":
                if constraint <= info.value <= MAX_VOICE:
                    return True
            elif kind == "staff":
                if info.value == constraint:
                    return True
            elif kind == "note":
                if constraint is None or pitch_sort_key(info.value) > constraint:
                    return True
            else:
                return True
        return False

    def feed(self, text: str) -> None:
        """Advance by one token; raises ValueError on an illegal one."""
        if not self.allows(text):
            raise ValueError(f"token {text!r} illegal in phase {self.phase}")
        info = classify(text)
        kind = info.kind
        if self.phase == "chord" and kind not in ("note", "tie"):
            self._close_event()
        if self.phase == "voice_done" and kind in ("time", "key", "bar", "end"):
            self.bars += 1
            self.meta_sub = "any"
            self.phase = "pre_measure"
        if kind == "time":
            cap = nominal_capacity(info.value) * TWELFTHS
            self.capacity = cap.numerator if cap.denominator == 1 else int(cap)
            if self.phase == "seq_time":
                self.phase = "seq_key"
            else:
                self.meta_sub = "after_time"
        elif kind == "key":
            if self.phase == "seq_key":
                self.phase = "pre_measure"
                self.meta_sub = "after_key"
            else:
                self.meta_sub = "after_key"
        elif kind == "bar":
            self.phase = "staff"
            self.staff = 0
            self.voice = 0
        elif kind == "staff":
            self.staff = info.value
            self.voice = 0
            self.phase = "voice"
        elif kind == "voice":
            self.voice = info.value
            self.remaining = self.capacity
            self.phase = "dur"
        elif kind == "dur":
            self.event_dur = info.value
            self.last_pitch_key = None
            self.phase = "event"
        elif kind == "rest":
            self._close_event()
        elif kind == "note":
            self.last_pitch_key = pitch_sort_key(info.value)
            self.phase = "chord"
        elif kind == "tie":
            self._close_event()
        elif kind == "end":
            self.complete = True

    def _close_event(self) -> None:
        self.remaining -= self.event_dur
        self.event_dur = 0
        self.last_pitch_key = None
        self.phase = "dur" if self.remaining > 0 else "voice_done"


class GrammarMasker:
    """Vocabulary-indexed view of :class:`GrammarState` successor sets.

    Beyond the grammar itself, the mask keeps sampling inside the trained
    support: tokens the corpus never contained (count 0, e.g. most of the
    fixed dur inventory) are excluded, since the model has never seen them
    and sampling them shreds measures into noise. One escape keeps the
    automaton live: the duration that exactly fills the rest of a voice is
    always admitted, so every voice can close. Per-kind id tables are
    precomputed; building a mask per sampling step is cheap.
    """

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.size = len(vocab)
        dur_pairs: list[tuple[int, int]] = []
        voice_pairs: list[tuple[int, int]] = []
        staff_pairs: list[tuple[int, int]] = []
        note_pairs: list[tuple[tuple[int, str, int], int]] = []
        plain: dict[str, list[int]] = {}
        self._all_durs: dict[int, int] = {}
        for idx, tok in enumerate(vocab.id_to_token):
            info = classify(tok)
            if tok in (PAD, UNK, SEP):
                continue
            if info.kind == "dur":
                self._all_durs[info.value] = idx
            if tok != END and vocab.counts.get(tok, 0) == 0:
                continue
            if info.kind == "dur":
                dur_pairs.append((info.value, idx))
            elif info.kind == "voice":
                voice_pairs.append((info.value, idx))
            elif info.kind == "staff":
                staff_pairs.append((info.value, idx))
            elif info.kind == "note":
                note_pairs.append((pitch_sort_key(info.value), idx))
            elif info.kind != "other":
                plain.setdefault(info.kind, []).append(idx)
        dur_pairs.sort()
        note_pairs.sort()
        self._dur_values = np.array([v for v, _ in dur_pairs], dtype=np.int64)
        self._dur_ids = np.array([i for _, i in dur_pairs], dtype=np.int64)
        self._voice = {v: i for v, i in voice_pairs}
        self._staff = {v: i for v, i in staff_pairs}
        self._note_keys = [k for k, _ in note_pairs]
        self._note_ids = np.array([i for _, i in note_pairs], dtype=np.int64)
        self._plain = {k: np.array(v, dtype=np.int64) for k, v in plain.items()}

    def mask(self, state: GrammarState) -> np.ndarray:
        """Boolean array over vocabulary ids that are legal next."""
        out = np.zeros(self.size, dtype=bool)
        for kind, constraint in state.legal_kinds(for_sampling=True):
            if kind == "dur":
                hi = int(np.searchsorted(self._dur_values, constraint, side="right"))
                out[self._dur_ids[:hi]] = True
                if constraint in self._all_durs:    # exact fill always possible
                    out[self._all_durs[constraint]] = True
            elif kind == "voice":
                for v in range(constraint, MAX_VOICE + 1):
                    if v in self._voice:
                        out[self._voice[v]] = True
            elif kind == "staff":
                if constraint in self._staff:
                    out[self._staff[constraint]] = True
            elif kind == "note":
                lo = 0 if constraint is None else bisect.bisect_right(self._note_keys, constraint)
                out[self._note_ids[lo:]] = True
            elif kind in self._plain:
                out[self._plain[kind]] = True
        return out
