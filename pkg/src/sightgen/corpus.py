"""Dataset assembly: segmentation, tritone transposition, labeling,
piece-level splitting, and class balancing.

Pieces never leak across the train/validation split; augmentation and
balancing touch the training half only, so validation keeps the natural
distribution. Every stage is seeded and the manifest writer is
deterministic, so identical configs reproduce byte-identical files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .difficulty import GnbModel, Normalizer, extract_descriptors
from .errors import EmptySplit, SightgenError
from . import musicxml
from .score import Measure, NoteEvent, Pitch, ScoreFragment, STEP_SEMITONES, fragment_layout, midi_number
from .tokenizer import tokenize

log = logging.getLogger(__name__)

FRAGMENT_MEASURES = 16

# line-of-fifths positions of the natural steps; sharps add 7, flats subtract 7
_FIFTHS_BASE = {"C": 0, "G": 1, "D": 2, "A": 3, "E": 4, "B": 5, "F": -1}
_STEP_BY_FIFTHS = {v: k for k, v in _FIFTHS_BASE.items()}


@dataclass(frozen=True)
class Discarded:
    """Transposition result that would need a double accidental or an
    unrepresentable key; a value, not an error."""

    reason: str


def segment(score: ScoreFragment) -> list[ScoreFragment]:
    """Non-overlapping 16-measure windows from measure 0; a trailing
    remainder shorter than 16 measures is dropped. Ties across window
    boundaries are cut."""
    layout = fragment_layout(score)
    fragments: list[ScoreFragment] = []
    n_windows = len(score.measures) // FRAGMENT_MEASURES
    for w in range(n_windows):
        lo = w * FRAGMENT_MEASURES
        hi = lo + FRAGMENT_MEASURES
        base = layout[lo][0]
        measures = []
        for i in range(lo, hi):
            m = score.measures[i]
            events = []
            for e in m.events:
                tie_start, tie_stop = e.tie_start, e.tie_stop
                if tie_start and i == hi - 1 and e.end == layout[hi - 1][0] + layout[hi - 1][1]:
                    tie_start = False
                    log.warning("%s: tie cut at segment boundary (measure %d)",
                                score.source_id or score.title or "score", i)
                if tie_stop and i == lo and e.onset == layout[lo][0]:
                    tie_stop = False
                    log.warning("%s: tie cut at segment boundary (measure %d)",
                                score.source_id or score.title or "score", i)
                events.append(NoteEvent(e.onset - base, e.duration, e.pitches,
                                        e.voice, e.staff, tie_start, tie_stop))
            measures.append(Measure(i - lo, m.time_sig, m.key_fifths, tuple(events)))
        fragments.append(ScoreFragment(tuple(measures), divisions=score.divisions,
                                       source_id=score.source_id, title=score.title))
    return fragments


def _transpose_pitch(p: Pitch, fifths_delta: int, semitones: int) -> Pitch | None:
    tpc = _FIFTHS_BASE[p.step] + 7 * p.alter + fifths_delta
    alter = (tpc + 1) // 7
    if abs(alter) >= 2:
        return None
    step = _STEP_BY_FIFTHS[tpc - 7 * alter]
    midi = midi_number(p) + semitones
    octave, rem = divmod(midi - STEP_SEMITONES[step] - alter, 12)
    assert rem == 0
    octave -= 1
    if not 0 <= octave <= 8 or not 0 <= midi <= 127:
        return None
    return Pitch(step, alter, octave)


def transpose(f: ScoreFragment, semitones: int) -> ScoreFragment | Discarded:
    """Transpose by a tritone (+6 or -6 semitones), shifting the key by the
    six fifths that minimize the resulting signature (ties prefer flats).
    Discarded if any pitch would need a double accidental or any measure's
    key would leave [-7, 7]."""
    if semitones not in (-6, 6):
        raise ValueError("tritone transposition only: semitones must be -6 or +6")
    key0 = f.measures[0].key_fifths
    fifths_delta = -6 if abs(key0 - 6) <= abs(key0 + 6) else 6

    measures = []
    for m in f.measures:
        new_key = m.key_fifths + fifths_delta
        if not -7 <= new_key <= 7:
            return Discarded(f"key {m.key_fifths:+d} shifts to {new_key:+d}")
        events = []
        for e in m.events:
            pitches = []
            for p in e.pitches:
                q = _transpose_pitch(p, fifths_delta, semitones)
                if q is None:
                    return Discarded(f"pitch {p.step}{p.alter:+d}{p.octave} needs a double accidental")
                pitches.append(q)
            events.append(NoteEvent(e.onset, e.duration, tuple(pitches),
                                    e.voice, e.staff, e.tie_start, e.tie_stop))
        measures.append(Measure(m.index, m.time_sig, new_key, tuple(events)))
    return ScoreFragment(tuple(measures), divisions=f.divisions,
                         title=f.title, source_id=f.source_id)


@dataclass(frozen=True)
class Provenance:
    source: str
    start_measure: int
    transposition: int


@dataclass
class FragmentRecord:
    tokens: tuple[str, ...]
    features: tuple[float, ...]      # normalized to [0, 1]
    label: int
    provenance: Provenance
    fragment: ScoreFragment | None = None


@dataclass
class DatasetSplit:
    train: list[FragmentRecord]
    validation: list[FragmentRecord]
    seed: int


@dataclass
class DatasetConfig:
    min_count: int = 50
    seed: int = 0
    split_ratio: float = 0.8
    augment: bool = True
    balance: bool = True


def _load_sources(sources: Sequence) -> list[tuple[str, ScoreFragment]]:
    """Sources are paths to MusicXML files or (name, score) pairs."""
    loaded: list[tuple[str, ScoreFragment]] = []
    for item in sources:
        if isinstance(item, tuple):
            name, score = item
            loaded.append((name, score))
            continue
        path = Path(item)
        try:
            report = musicxml.parse(path.read_bytes())
        except SightgenError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        loaded.append((path.name, replace(report.fragment, source_id=path.name)))
    return loaded


def build_dataset(sources: Sequence, config: DatasetConfig,
                  gnb: GnbModel, normalizer: Normalizer) -> DatasetSplit:
    """parse -> split by piece -> segment -> (train only: +-6 augmentation)
    -> tokenize -> extract/normalize -> GNB label -> balance train."""
    loaded = _load_sources(sources)
    if len(loaded) < 3:
        raise EmptySplit(f"need at least 3 parseable pieces, got {len(loaded)}")
    loaded.sort(key=lambda t: t[0])
    names = [name for name, _ in loaded]
    if len(set(names)) != len(names):
        raise EmptySplit("duplicate source names would break piece-level splitting")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(loaded))
    n_train = int(round(config.split_ratio * len(loaded)))
    n_train = min(max(n_train, 1), len(loaded) - 1)
    train_names = {names[i] for i in order[:n_train]}

    train_records: list[FragmentRecord] = []
    val_records: list[FragmentRecord] = []
    for name, score in loaded:
        is_train = name in train_names
        for w, frag in enumerate(segment(score)):
            variants: list[tuple[int, ScoreFragment]] = [(0, frag)]
            if is_train and config.augment:
                for semis in (-6, 6):
                    t = transpose(frag, semis)
                    if isinstance(t, Discarded):
                        log.info("%s +%d: %s", name, semis, t.reason)
                    else:
                        variants.append((semis, t))
            for semis, variant in variants:
                try:
                    tokens = tuple(tokenize(variant))
                except SightgenError as exc:
                    log.warning("%s: %s", name, exc)
                    continue
                feats = normalizer.apply(extract_descriptors(variant))
                record = FragmentRecord(
                    tokens=tokens,
                    features=tuple(feats.tolist()),
                    label=gnb.predict(feats),
                    provenance=Provenance(name, w * FRAGMENT_MEASURES, semis),
                    fragment=variant,
                )
                (train_records if is_train else val_records).append(record)

    present = {r.label for r in train_records}
    missing = set(gnb.classes) - present
    if missing:
        raise EmptySplit(f"classes {sorted(missing)} absent from the training split")

    if config.balance:
        train_records = _balance(train_records, rng)
    return DatasetSplit(train=train_records, validation=val_records, seed=config.seed)


def _balance(records: list[FragmentRecord], rng: np.random.Generator) -> list[FragmentRecord]:
    """Seeded downsampling of every class to the minority count, keeping
    the original record order."""
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.label, []).append(i)
    floor = min(len(v) for v in by_class.values())
    keep: set[int] = set()
    for label in sorted(by_class):
        idx = by_class[label]
        chosen = rng.choice(len(idx), size=floor, replace=False)
        keep.update(idx[i] for i in sorted(chosen.tolist()))
    return [r for i, r in enumerate(records) if i in keep]


# --- manifest files ---

MANIFEST_FORMAT = "sightgen-dataset v1"


def write_manifest(path, records: Sequence[FragmentRecord], *, seed: int,
                   config: DatasetConfig | None = None) -> None:
    header = {"format": MANIFEST_FORMAT, "seed": seed, "records": len(records)}
    if config is not None:
        header["config"] = {
            "min_count": config.min_count, "seed": config.seed,
            "split_ratio": config.split_ratio, "augment": config.augment,
            "balance": config.balance,
        }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps({
                "tokens": " ".join(r.tokens),
                "features": list(r.features),
                "label": r.label,
                "source": r.provenance.source,
                "start_measure": r.provenance.start_measure,
                "transposition": r.provenance.transposition,
            }, sort_keys=True) + "\n")


def read_manifest(path) -> tuple[dict, list[FragmentRecord]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise EmptySplit(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise EmptySplit(f"{path}: not a {MANIFEST_FORMAT} manifest")
    records = []
    for line in lines[1:]:
        obj = json.loads(line)
        records.append(FragmentRecord(
            tokens=tuple(obj["tokens"].split()),
            features=tuple(obj["features"]),
            label=int(obj["label"]),
            provenance=Provenance(obj["source"], int(obj["start_measure"]),
                                  int(obj["transposition"])),
        ))
    return header, records
