from fractions import Fraction

import numpy as np
import pytest

from helpers import build_fragment, ev, random_fragment, simple_fragment
from sightgen import musicxml
from sightgen.errors import InconsistentTiming, MalformedXml, UnsupportedStructure
from sightgen.score import fragments_equal, spell, validate


def doc(measures_xml: str, staves: int = 2, extra_attrs: str = "") -> bytes:
    import re

    head = """<?xml version="1.0" encoding="UTF-8"?>
<score-partwise version="4.0">
  <part-list><score-part id="P1"><part-name>Piano</part-name></score-part></part-list>
  <part id="P1">
"""
    # inject shared attributes right after the first measure's opening tag
    attrs = f"""<attributes><divisions>4</divisions><key><fifths>0</fifths></key>
      <time><beats>4</beats><beat-type>4</beat-type></time>
      <staves>{staves}</staves>{extra_attrs}</attributes>"""
    body = re.sub(r"(<measure[^>]*>)", lambda m: m.group(1) + attrs, measures_xml, count=1)
    return (head + body + "</part></score-partwise>").encode()


def note_xml(step="C", octave=4, dur=4, voice=1, staff=1, alter=None, chord=False,
             rest=False, ties=(), grace=False):
    parts = ["<note>"]
    if grace:
        parts.append("<grace/>")
    if chord:
        parts.append("<chord/>")
    if rest:
        parts.append("<rest/>")
    else:
        alter_xml = f"<alter>{alter}</alter>" if alter else ""
        parts.append(f"<pitch><step>{step}</step>{alter_xml}<octave>{octave}</octave></pitch>")
    if not grace:
        parts.append(f"<duration>{dur}</duration>")
    for t in ties:
        parts.append(f'<tie type="{t}"/>')
    parts.append(f"<voice>{voice}</voice><staff>{staff}</staff></note>")
    return "".join(parts)


MINIMAL = doc(f"""<measure number="1">{note_xml(dur=4)}
    {note_xml(rest=True, dur=12)}
    <backup><duration>16</duration></backup>
    {note_xml(rest=True, dur=16, voice=5, staff=2)}
  </measure>""")


class TestParse:
    def test_minimal_document(self):
        report = musicxml.parse(MINIMAL)
        frag = report.fragment
        assert validate(frag) == []
        rh = [e for e in frag.events() if e.staff == 1 and not e.is_rest]
        assert len(rh) == 1
        e = rh[0]
        assert (e.onset, e.duration, e.voice, e.staff) == (0, 1, 1, 1)
        assert [spell(p) for p in e.pitches] == ["C4"]

    def test_three_staves_rejected(self):
        with pytest.raises(UnsupportedStructure):
            musicxml.parse(doc(f'<measure number="1">{note_xml(dur=16)}</measure>', staves=3))

    def test_one_staff_rejected(self):
        with pytest.raises(UnsupportedStructure):
            musicxml.parse(doc(f'<measure number="1">{note_xml(dur=16)}</measure>', staves=1))

    def test_malformed_xml(self):
        with pytest.raises(MalformedXml):
            musicxml.parse(b"<score-partwise><part")

    def test_two_parts_rejected(self):
        bad = MINIMAL.replace(b"</part></score-partwise>",
                              b'</part><part id="P2"></part></score-partwise>')
        with pytest.raises(UnsupportedStructure):
            musicxml.parse(bad)

    def test_transposing_instrument_rejected(self):
        with pytest.raises(UnsupportedStructure):
            musicxml.parse(doc(
                f'<measure number="1">{note_xml(dur=16)}</measure>',
                extra_attrs="<transpose><chromatic>-2</chromatic></transpose>"))

    def test_negative_cursor_rejected(self):
        bad = doc(f"""<measure number="1">{note_xml(dur=4)}
            <backup><duration>8</duration></backup></measure>""")
        with pytest.raises(InconsistentTiming):
            musicxml.parse(bad)

    def test_backup_interleaves_staves(self):
        # staff 2 written after a full-measure backup shares onsets with staff 1
        body = f"""<measure number="1">
            {note_xml("C", 4, 8)}{note_xml("D", 4, 8)}
            <backup><duration>16</duration></backup>
            {note_xml("C", 3, 8, voice=5, staff=2)}{note_xml("D", 3, 8, voice=5, staff=2)}
        </measure>"""
        frag = musicxml.parse(doc(body)).fragment
        by_staff = {1: [], 2: []}
        for e in frag.events():
            by_staff[e.staff].append(e.onset)
        assert by_staff[1] == by_staff[2] == [Fraction(0), Fraction(2)]

    def test_chord_parsing(self):
        body = f"""<measure number="1">
            {note_xml("C", 4, 16)}{note_xml("E", 4, 16, chord=True)}{note_xml("G", 4, 16, chord=True)}
            <backup><duration>16</duration></backup>
            {note_xml(rest=True, dur=16, voice=5, staff=2)}
        </measure>"""
        frag = musicxml.parse(doc(body)).fragment
        chord = next(e for e in frag.events() if not e.is_rest)
        assert [spell(p) for p in chord.pitches] == ["C4", "E4", "G4"]

    def test_tie_round_trip_flags(self):
        body = f"""<measure number="1">
            {note_xml("C", 4, 8, ties=("start",))}{note_xml("C", 4, 8, ties=("stop",))}
            <backup><duration>16</duration></backup>
            {note_xml(rest=True, dur=16, voice=5, staff=2)}
        </measure>"""
        frag = musicxml.parse(doc(body)).fragment
        notes = [e for e in frag.events() if not e.is_rest]
        assert notes[0].tie_start and not notes[0].tie_stop
        assert notes[1].tie_stop and not notes[1].tie_start

    def test_dangling_tie_dropped_with_warning(self):
        body = f"""<measure number="1">
            {note_xml("C", 4, 16, ties=("start",))}
            <backup><duration>16</duration></backup>
            {note_xml(rest=True, dur=16, voice=5, staff=2)}
        </measure>"""
        report = musicxml.parse(doc(body))
        assert all(not e.tie_start for e in report.fragment.events())
        assert any("tie" in msg for _, msg in report.warnings)

    def test_grace_note_skipped_with_warning(self):
        body = f"""<measure number="1">
            {note_xml("D", 5, 0, grace=True)}{note_xml("C", 4, 16)}
            <backup><duration>16</duration></backup>
            {note_xml(rest=True, dur=16, voice=5, staff=2)}
        </measure>"""
        report = musicxml.parse(doc(body))
        assert report.skipped_elements["grace"] == 1
        assert any("grace" in msg for _, msg in report.warnings)
        assert validate(report.fragment) == []

    def test_unknown_element_counted(self):
        body = f"""<measure number="1"><direction><sound tempo="90"/></direction>
            {note_xml(dur=16)}
            <backup><duration>16</duration></backup>
            {note_xml(rest=True, dur=16, voice=5, staff=2)}
        </measure>"""
        report = musicxml.parse(doc(body))
        assert report.skipped_elements["direction"] == 1
        assert all(loc.startswith("measure ") for loc, _ in report.warnings)

    def test_voice_on_both_staves_rejected(self):
        body = f"""<measure number="1">
            {note_xml("C", 4, 16, voice=1, staff=1)}
            <backup><duration>16</duration></backup>
            {note_xml("C", 3, 16, voice=1, staff=2)}
        </measure>"""
        with pytest.raises(UnsupportedStructure):
            musicxml.parse(doc(body))

    def test_gap_padded_silently(self):
        # staff 2 only covers the second half of the measure
        body = f"""<measure number="1">{note_xml(dur=16)}
            <backup><duration>8</duration></backup>
            {note_xml("C", 3, 8, voice=5, staff=2)}
        </measure>"""
        frag = musicxml.parse(doc(body)).fragment
        assert validate(frag) == []
        lh = [e for e in frag.events() if e.staff == 2]
        assert lh[0].is_rest and lh[0].duration == 2 and not lh[1].is_rest

    def test_determinism(self):
        a = musicxml.parse(MINIMAL).fragment
        b = musicxml.parse(MINIMAL).fragment
        assert fragments_equal(a, b)

    def test_pickup_measure(self):
        body = f"""<measure number="0" implicit="yes">{note_xml(dur=4)}
            <backup><duration>4</duration></backup>
            {note_xml(rest=True, dur=4, voice=5, staff=2)}
          </measure>
          <measure number="1">{note_xml("D", 4, 16)}
            <backup><duration>16</duration></backup>
            {note_xml(rest=True, dur=16, voice=5, staff=2)}
        </measure>"""
        frag = musicxml.parse(doc(body)).fragment
        assert validate(frag) == []
        from sightgen.score import total_quarters
        assert total_quarters(frag) == 5


class TestSerialize:
    def test_round_trip_simple(self):
        frag = simple_fragment()
        assert fragments_equal(musicxml.parse(musicxml.serialize(frag)).fragment, frag)

    def test_round_trip_no_warnings_on_own_output(self):
        frag = build_fragment([{(1, 1): [(2, "C4", True), (2, "C4")],
                                (1, 2): [(1, None), (3, ["E3", "G3"])],
                                (2, 1): [(4, None)]}])
        report = musicxml.parse(musicxml.serialize(frag))
        assert report.warnings == [] and not report.skipped_elements
        assert fragments_equal(report.fragment, frag)

    def test_spelling_preserved(self):
        frag = simple_fragment(rh=((4, "F#4"),))
        xml = musicxml.serialize(frag)
        assert b"<step>F</step>" in xml and b"<alter>1</alter>" in xml
        back = musicxml.parse(xml).fragment
        assert fragments_equal(back, frag)

    def test_triplet_divisions_multiple_of_three(self):
        frag = simple_fragment(rh=((Fraction(1, 3), "C4"), (Fraction(1, 3), "D4"),
                                   (Fraction(1, 3), "E4"), (3, None)))
        xml = musicxml.serialize(frag)
        report = musicxml.parse(xml)
        assert fragments_equal(report.fragment, frag)
        import re
        divisions = int(re.search(rb"<divisions>(\d+)</divisions>", xml).group(1))
        assert divisions % 3 == 0

    def test_deterministic_bytes(self):
        frag = random_fragment(np.random.default_rng(3), n_measures=4)
        assert musicxml.serialize(frag) == musicxml.serialize(frag)

    def test_round_trip_random_fragments(self):
        rng = np.random.default_rng(23)
        for _ in range(25):
            frag = random_fragment(rng, n_measures=3, allow_pickup=True)
            report = musicxml.parse(musicxml.serialize(frag))
            assert fragments_equal(report.fragment, frag)
            assert report.warnings == []

    def test_time_and_key_changes_round_trip(self):
        frag = build_fragment([
            ((4, 4), 0, {(1, 1): [(4, "C4")], (2, 1): [(4, None)]}),
            ((3, 4), 2, {(1, 1): [(3, "D4")], (2, 1): [(3, None)]}),
            ((3, 4), 2, {(1, 1): [(3, "E4")], (2, 1): [(3, None)]}),
        ])
        assert validate(frag) == []
        back = musicxml.parse(musicxml.serialize(frag)).fragment
        assert fragments_equal(back, frag)
