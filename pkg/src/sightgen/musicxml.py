"""MusicXML (uncompressed score-partwise) parsing and serialization.

Supported subset: one piano part with exactly two staves; note elements
(pitch/rest/chord/duration/voice/staff/tie), attributes (divisions, key,
time, staves, clef), backup/forward, barline. Display-only children that
our own serializer emits (type, dot, stem, beam, accidental, tied
notations) are consumed silently; everything else is skipped and counted,
with a warning carrying the measure number. Padding silent gaps with rests
is done silently because it adds no information and loses none.

Voices are renumbered per staff in rank order (1..k); the serializer writes
staff-2 voices with the conventional +4 offset and the parser removes it,
so parse(serialize(f)) is exact on voice numbers for pipeline fragments.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import InconsistentTiming, MalformedXml, NonRepresentable, UnsupportedStructure
from .score import (
    Measure,
    NoteEvent,
    Pitch,
    ScoreFragment,
    nominal_capacity,
    fragment_layout,
    STEP_SEMITONES,
    VALID_TIME_DENOMS,
)

XML_DECL = '<?xml version="1.0" encoding="UTF-8"?>'
DOCTYPE = ('<!DOCTYPE score-partwise PUBLIC "-//Recordare//DTD MusicXML 4.0 '
           'Partwise//EN" "http://www.musicxml.org/dtds/partwise.dtd">')

# note children that duplicate information we already keep, or that are
# display-only and re-derivable; consumed without a warning
_SILENT_NOTE_CHILDREN = {"type", "dot", "stem", "beam", "accidental", "instrument"}
_SILENT_MEASURE_CHILDREN = {"barline"}

# duration (in quarters) -> note type name, plain and single-dotted
_TYPE_BY_DURATION: dict[Fraction, tuple[str, int]] = {}
for _name, _q in [("breve", 8), ("whole", 4), ("half", 2), ("quarter", 1),
                  ("eighth", Fraction(1, 2)), ("16th", Fraction(1, 4)),
                  ("32nd", Fraction(1, 8)), ("64th", Fraction(1, 16))]:
    _TYPE_BY_DURATION[Fraction(_q)] = (_name, 0)
    _TYPE_BY_DURATION[Fraction(_q) * Fraction(3, 2)] = (_name, 1)


@dataclass
class ParseReport:
    fragment: ScoreFragment
    warnings: list[tuple[str, str]] = field(default_factory=list)
    skipped_elements: Counter = field(default_factory=Counter)


@dataclass
class _PendingNote:
    onset: Fraction
    duration: Fraction
    pitches: list[Pitch]
    voice: int
    staff: int
    tie_start: bool
    tie_stop: bool


def _text(elem: ET.Element, tag: str, default: str | None = None) -> str | None:
    child = elem.find(tag)
    if child is None or child.text is None:
        return default
    return child.text.strip()


def _int_text(elem: ET.Element, tag: str, default: int | None = None) -> int | None:
    t = _text(elem, tag)
    return default if t is None else int(t)


def parse(document: bytes) -> ParseReport:
    """Parse MusicXML bytes into a validated :class:`ScoreFragment`."""
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root.tag != "score-partwise":
        raise UnsupportedStructure(f"root element is {root.tag!r}, expected score-partwise")

    part_list = root.find("part-list")
    score_parts = part_list.findall("score-part") if part_list is not None else []
    parts = root.findall("part")
    if len(parts) != 1 or (score_parts and len(score_parts) != 1):
        raise UnsupportedStructure(f"expected exactly one part, found {len(parts)}")

    title = _text(root, "movement-title") or _text(root, "work/work-title")

    warnings: list[tuple[str, str]] = []
    skipped: Counter = Counter()
    divisions = 1
    divisions_seen: list[int] = []
    staves_declared: int | None = None
    time_sig: tuple[int, int] | None = None
    key_fifths: int | None = None

    raw_measures: list[list[_PendingNote]] = []
    measure_sigs: list[tuple[tuple[int, int], int]] = []

    for midx, measure in enumerate(parts[0].findall("measure")):
        loc = f"measure {midx + 1}"
        cursor = Fraction(0)
        pending: list[_PendingNote] = []
        last_note: _PendingNote | None = None

        for child in measure:
            if child.tag == "attributes":
                for attr in child:
                    if attr.tag == "divisions":
                        divisions = int(attr.text)
                        if divisions < 1:
                            raise UnsupportedStructure("divisions must be positive")
                        divisions_seen.append(divisions)
                    elif attr.tag == "key":
                        fifths = _int_text(attr, "fifths")
                        if fifths is None or not -7 <= fifths <= 7:
                            raise UnsupportedStructure(f"bad key signature in {loc}")
                        key_fifths = fifths
                    elif attr.tag == "time":
                        num = _int_text(attr, "beats")
                        den = _int_text(attr, "beat-type")
                        if not num or den not in VALID_TIME_DENOMS:
                            raise UnsupportedStructure(f"unsupported time signature in {loc}")
                        time_sig = (num, den)
                    elif attr.tag == "staves":
                        staves_declared = int(attr.text)
                    elif attr.tag == "transpose":
                        raise UnsupportedStructure("transposing instruments are not supported")
                    elif attr.tag == "clef":
                        pass
                    else:
                        skipped[attr.tag] += 1
                        warnings.append((loc, f"skipped attributes/{attr.tag}"))
            elif child.tag == "note":
                is_chord = (child.find("chord") is not None
                            and child.find("grace") is None and child.find("cue") is None)
                if is_chord:
                    if last_note is None:
                        warnings.append((loc, "skipped chord member without a base note"))
                        skipped["note"] += 1
                    else:
                        _read_note(child, cursor, divisions, loc, warnings, skipped,
                                   chord_base=last_note)
                    continue
                note, advance = _read_note(child, cursor, divisions, loc, warnings, skipped)
                if note is None:
                    continue
                pending.append(note)
                last_note = note
                cursor += advance
            elif child.tag == "backup":
                dur = _int_text(child, "duration", 0)
                cursor -= Fraction(dur, divisions)
                if cursor < 0:
                    raise InconsistentTiming(f"backup below measure start in {loc}")
                last_note = None
            elif child.tag == "forward":
                dur = _int_text(child, "duration", 0)
                cursor += Fraction(dur, divisions)
                last_note = None
            elif child.tag in _SILENT_MEASURE_CHILDREN:
                pass
            else:
                skipped[child.tag] += 1
                warnings.append((loc, f"skipped {child.tag}"))

        if time_sig is None:
            raise UnsupportedStructure("no time signature before the first notes")
        if key_fifths is None:
            key_fifths = 0
            warnings.append((loc, "no key signature; assuming 0 fifths"))
        raw_measures.append(pending)
        measure_sigs.append((time_sig, key_fifths))

    if staves_declared is None:
        raise UnsupportedStructure("part does not declare its staff count")
    if staves_declared != 2:
        raise UnsupportedStructure(f"expected exactly two staves, found {staves_declared}")
    if not raw_measures:
        raise UnsupportedStructure("part contains no measures")

    for pending in raw_measures:
        for n in pending:
            if n.staff not in (1, 2):
                raise UnsupportedStructure(f"note on staff {n.staff}, expected 1 or 2")

    # Reject voices that cross staves within a measure, then renumber them
    # per staff in rank order over the whole piece.
    voices_by_staff: dict[int, set[int]] = {1: set(), 2: set()}
    for midx, pending in enumerate(raw_measures):
        staff_of_voice: dict[int, int] = {}
        for n in pending:
            if staff_of_voice.setdefault(n.voice, n.staff) != n.staff:
                raise UnsupportedStructure(
                    f"voice {n.voice} appears on both staves in measure {midx + 1}")
            voices_by_staff[n.staff].add(n.voice)
    voice_map: dict[tuple[int, int], int] = {}
    for staff, voices in voices_by_staff.items():
        if len(voices) > 4:
            raise UnsupportedStructure(f"staff {staff} uses more than four voices")
        normalized = [v - 4 if staff == 2 and v >= 5 else v for v in sorted(voices)]
        for xml_voice, rank in zip(sorted(voices), _rank(normalized)):
            voice_map[(staff, xml_voice)] = rank

    measures = _assemble_measures(raw_measures, measure_sigs, voice_map, warnings)
    _normalize_ties(measures, warnings)

    frag = ScoreFragment(
        measures=tuple(measures),
        divisions=math.lcm(*divisions_seen) if divisions_seen else 1,
        title=title,
    )
    return ParseReport(fragment=frag, warnings=warnings, skipped_elements=skipped)


def _rank(normalized: list[int]) -> list[int]:
    order = sorted(range(len(normalized)), key=lambda i: normalized[i])
    ranks = [0] * len(normalized)
    for rank, i in enumerate(order, start=1):
        ranks[i] = rank
    return ranks


def _read_note(elem, cursor, divisions, loc, warnings, skipped, chord_base=None):
    """Returns (pending_note_or_marker_or_None, cursor_advance)."""
    if elem.find("grace") is not None:
        skipped["grace"] += 1
        warnings.append((loc, "skipped grace note"))
        return None, Fraction(0)
    if elem.find("cue") is not None:
        skipped["cue"] += 1
        warnings.append((loc, "skipped cue note"))
        return None, Fraction(0)

    dur_divs = _int_text(elem, "duration")
    if dur_divs is None or dur_divs <= 0:
        warnings.append((loc, "skipped note without a positive duration"))
        skipped["note"] += 1
        return None, Fraction(0)
    duration = Fraction(dur_divs, divisions)

    tie_start = tie_stop = False
    for tie in elem.findall("tie"):
        if tie.get("type") == "start":
            tie_start = True
        elif tie.get("type") == "stop":
            tie_stop = True
    for notations in elem.findall("notations"):
        for n in notations:
            if n.tag == "tied":
                continue
            skipped[f"notations/{n.tag}"] += 1
            warnings.append((loc, f"skipped notations/{n.tag}"))

    for child in elem:
        if child.tag in ("pitch", "rest", "chord", "duration", "voice", "staff",
                         "tie", "notations") or child.tag in _SILENT_NOTE_CHILDREN:
            continue
        skipped[f"note/{child.tag}"] += 1
        warnings.append((loc, f"skipped note/{child.tag}"))

    pitch_elem = elem.find("pitch")
    if pitch_elem is not None:
        step = _text(pitch_elem, "step")
        alter = _int_text(pitch_elem, "alter", 0)
        octave = _int_text(pitch_elem, "octave")
        if step not in STEP_SEMITONES or octave is None or not 0 <= octave <= 8 \
                or abs(alter) > 2:
            warnings.append((loc, f"skipped note with bad pitch {step}/{alter}/{octave}"))
            skipped["note"] += 1
            return None, Fraction(0)
        pitch = Pitch(step, alter, octave)
    elif elem.find("rest") is None:
        warnings.append((loc, "skipped note with neither pitch nor rest"))
        skipped["note"] += 1
        return None, Fraction(0)
    else:
        pitch = None

    if chord_base is not None:
        if pitch is None:
            warnings.append((loc, "skipped chord member without a pitch"))
            skipped["note"] += 1
        else:
            if duration != chord_base.duration:
                warnings.append((loc, "chord member duration differs; using base duration"))
            chord_base.pitches.append(pitch)
            chord_base.tie_start = chord_base.tie_start or tie_start
            chord_base.tie_stop = chord_base.tie_stop or tie_stop
        return None, Fraction(0)

    voice = _int_text(elem, "voice", 1)
    staff = _int_text(elem, "staff", 1)
    note = _PendingNote(
        onset=cursor,
        duration=duration,
        pitches=[pitch] if pitch is not None else [],
        voice=voice,
        staff=staff,
        tie_start=tie_start,
        tie_stop=tie_stop,
    )
    return note, duration


def _assemble_measures(raw_measures, measure_sigs, voice_map, warnings):
    """Turn per-measure pending notes into validated Measure values:
    sort voices, drop overlaps, pad gaps with rests, resolve the pickup."""
    measures: list[Measure] = []
    start = Fraction(0)
    for midx, (pending, (time_sig, key_fifths)) in enumerate(zip(raw_measures, measure_sigs)):
        loc = f"measure {midx + 1}"
        cap = nominal_capacity(time_sig)
        by_voice: dict[tuple[int, int], list[_PendingNote]] = {}
        for n in pending:
            by_voice.setdefault((n.staff, voice_map[(n.staff, n.voice)]), []).append(n)

        if midx == 0 and pending:
            content = max(n.onset + n.duration for n in pending)
            if Fraction(0) < content < cap:
                cap = content

        events: list[NoteEvent] = []
        for (staff, voice), notes in sorted(by_voice.items()):
            notes.sort(key=lambda n: n.onset)
            cursor = Fraction(0)
            for n in notes:
                if n.onset < cursor:
                    warnings.append((loc, f"dropped overlapping note in staff {staff} voice {voice}"))
                    continue
                if n.onset > cursor:
                    events.append(NoteEvent(start + cursor, n.onset - cursor, (), voice, staff))
                    cursor = n.onset
                duration = n.duration
                tie_start = n.tie_start
                if cursor + duration > cap:
                    warnings.append((loc, f"truncated note past capacity in staff {staff} voice {voice}"))
                    duration = cap - cursor
                    tie_start = False
                    if duration <= 0:
                        continue
                # deduplicate unison chord members
                seen, uniq = set(), []
                for p in sorted(n.pitches, key=lambda p: (p.step, p.alter, p.octave)):
                    if (p.step, p.alter, p.octave) in seen:
                        warnings.append((loc, "dropped duplicate chord pitch"))
                        continue
                    seen.add((p.step, p.alter, p.octave))
                    uniq.append(p)
                events.append(NoteEvent(start + cursor, duration, tuple(uniq),
                                        voice, staff, tie_start, n.tie_stop))
                cursor += duration
            if cursor < cap:
                events.append(NoteEvent(start + cursor, cap - cursor, (), voice, staff))

        for staff in (1, 2):
            if not any(e.staff == staff for e in events):
                other = {e.voice for e in events if e.staff != staff}
                voice = min(v for v in range(1, 6) if v not in other)
                events.append(NoteEvent(start, cap, (), voice, staff))

        measures.append(Measure(midx, time_sig, key_fifths, tuple(events)))
        start += cap
    return measures


def _normalize_ties(measures: list[Measure], warnings) -> None:
    """Drop dangling tie flags so tie_pairing always validates."""
    chains: dict[tuple[int, int], list[tuple[int, int, NoteEvent]]] = {}
    for mi, m in enumerate(measures):
        for ei, e in enumerate(m.events):
            chains.setdefault((e.staff, e.voice), []).append((mi, ei, e))
    fixes: dict[tuple[int, int], tuple[bool, bool]] = {}
    for (_staff, _voice), entries in chains.items():
        entries.sort(key=lambda t: t[2].onset)
        flags = [[e.tie_start and not e.is_rest, e.tie_stop and not e.is_rest]
                 for _, _, e in entries]
        for i, (mi, ei, e) in enumerate(entries):
            prev = entries[i - 1][2] if i > 0 else None
            prev_start = flags[i - 1][0] if i > 0 else False
            if flags[i][1] and not (prev is not None and prev.end == e.onset and prev_start):
                flags[i][1] = False
                warnings.append((f"measure {mi + 1}", "dropped dangling tie stop"))
        for i, (mi, ei, e) in enumerate(entries):
            nxt = entries[i + 1][2] if i + 1 < len(entries) else None
            nxt_stop = flags[i + 1][1] if i + 1 < len(entries) else False
            if flags[i][0] and not (nxt is not None and nxt.onset == e.end and nxt_stop):
                flags[i][0] = False
                warnings.append((f"measure {mi + 1}", "dropped dangling tie start"))
        for (mi, ei, e), (ts, tp) in zip(entries, flags):
            if (e.tie_start, e.tie_stop) != (ts, tp):
                fixes[(mi, ei)] = (ts, tp)
    if not fixes:
        return
    for mi, m in enumerate(measures):
        if not any((mi, ei) in fixes for ei in range(len(m.events))):
            continue
        new_events = []
        for ei, e in enumerate(m.events):
            if (mi, ei) in fixes:
                ts, tp = fixes[(mi, ei)]
                e = NoteEvent(e.onset, e.duration, e.pitches, e.voice, e.staff, ts, tp)
            new_events.append(e)
        measures[mi] = Measure(m.index, m.time_sig, m.key_fifths, tuple(new_events))


# --- serialization ---

def serialize(f: ScoreFragment) -> bytes:
    """Emit deterministic score-partwise 4.0 bytes for a valid fragment."""
    layout = fragment_layout(f)
    denoms = {1}
    for m, (start, cap) in zip(f.measures, layout):
        denoms.add(cap.denominator)
        for e in m.events:
            denoms.add(e.duration.denominator)
            denoms.add((e.onset - start).denominator)
    divisions = math.lcm(*denoms)
    if divisions > 2**31 - 1:
        raise NonRepresentable(f"divisions {divisions} exceeds XML integer range")

    root = ET.Element("score-partwise", version="4.0")
    if f.title:
        ET.SubElement(root, "movement-title").text = f.title
    part_list = ET.SubElement(root, "part-list")
    score_part = ET.SubElement(part_list, "score-part", id="P1")
    ET.SubElement(score_part, "part-name").text = "Piano"
    part = ET.SubElement(root, "part", id="P1")

    prev_time: tuple[int, int] | None = None
    prev_key: int | None = None
    for m, (start, cap) in zip(f.measures, layout):
        is_pickup = m.index == 0 and cap < nominal_capacity(m.time_sig)
        number = "0" if is_pickup else str(m.index + (0 if _has_pickup(f, layout) else 1))
        attrs = {"number": number}
        if is_pickup:
            attrs["implicit"] = "yes"
        mel = ET.SubElement(part, "measure", **attrs)

        need_attrs = m.index == 0 or m.time_sig != prev_time or m.key_fifths != prev_key
        if need_attrs:
            ael = ET.SubElement(mel, "attributes")
            if m.index == 0:
                ET.SubElement(ael, "divisions").text = str(divisions)
            if m.index == 0 or m.key_fifths != prev_key:
                kel = ET.SubElement(ael, "key")
                ET.SubElement(kel, "fifths").text = str(m.key_fifths)
            if m.index == 0 or m.time_sig != prev_time:
                tel = ET.SubElement(ael, "time")
                ET.SubElement(tel, "beats").text = str(m.time_sig[0])
                ET.SubElement(tel, "beat-type").text = str(m.time_sig[1])
            if m.index == 0:
                ET.SubElement(ael, "staves").text = "2"
                clef1 = ET.SubElement(ael, "clef", number="1")
                ET.SubElement(clef1, "sign").text = "G"
                ET.SubElement(clef1, "line").text = "2"
                clef2 = ET.SubElement(ael, "clef", number="2")
                ET.SubElement(clef2, "sign").text = "F"
                ET.SubElement(clef2, "line").text = "4"
        prev_time, prev_key = m.time_sig, m.key_fifths

        groups: dict[tuple[int, int], list[NoteEvent]] = {}
        for e in m.events:
            groups.setdefault((e.staff, e.voice), []).append(e)
        ordered = sorted(groups.items())
        for gi, ((staff, voice), events) in enumerate(ordered):
            if gi > 0:
                span = sum((e.duration for e in ordered[gi - 1][1]), Fraction(0))
                bel = ET.SubElement(mel, "backup")
                ET.SubElement(bel, "duration").text = str(_ticks(span, divisions))
            xml_voice = voice + 4 if staff == 2 else voice
            for e in sorted(events, key=lambda e: e.onset):
                _write_event(mel, e, xml_voice, divisions)

        if m.index == len(f.measures) - 1:
            bar = ET.SubElement(mel, "barline", location="right")
            ET.SubElement(bar, "bar-style").text = "light-heavy"

    ET.indent(root, space="  ")
    body = ET.tostring(root, encoding="unicode")
    return (XML_DECL + "\n" + DOCTYPE + "\n" + body + "\n").encode("utf-8")


def _has_pickup(f: ScoreFragment, layout) -> bool:
    if not f.measures:
        return False
    return layout[0][1] < nominal_capacity(f.measures[0].time_sig)


def _ticks(duration: Fraction, divisions: int) -> int:
    t = duration * divisions
    if t.denominator != 1:
        raise NonRepresentable(f"duration {duration} at divisions {divisions}")
    return t.numerator


def _write_event(mel, e: NoteEvent, xml_voice: int, divisions: int) -> None:
    ticks = _ticks(e.duration, divisions)
    type_info = _TYPE_BY_DURATION.get(e.duration)
    if e.is_rest:
        nel = ET.SubElement(mel, "note")
        ET.SubElement(nel, "rest")
        ET.SubElement(nel, "duration").text = str(ticks)
        ET.SubElement(nel, "voice").text = str(xml_voice)
        ET.SubElement(nel, "staff").text = str(e.staff)
        return
    for i, p in enumerate(e.pitches):
        nel = ET.SubElement(mel, "note")
        if i > 0:
            ET.SubElement(nel, "chord")
        pel = ET.SubElement(nel, "pitch")
        ET.SubElement(pel, "step").text = p.step
        if p.alter != 0:
            ET.SubElement(pel, "alter").text = str(p.alter)
        ET.SubElement(pel, "octave").text = str(p.octave)
        ET.SubElement(nel, "duration").text = str(ticks)
        if e.tie_stop:
            ET.SubElement(nel, "tie", type="stop")
        if e.tie_start:
            ET.SubElement(nel, "tie", type="start")
        ET.SubElement(nel, "voice").text = str(xml_voice)
        if type_info is not None:
            ET.SubElement(nel, "type").text = type_info[0]
            for _ in range(type_info[1]):
                ET.SubElement(nel, "dot")
        ET.SubElement(nel, "staff").text = str(e.staff)
        if e.tie_start or e.tie_stop:
            notations = ET.SubElement(nel, "notations")
            if e.tie_stop:
                ET.SubElement(notations, "tied", type="stop")
            if e.tie_start:
                ET.SubElement(notations, "tied", type="start")
