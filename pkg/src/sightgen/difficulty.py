"""Interpretable difficulty descriptors and the Gaussian Naive Bayes labeler.

Twelve features, six per hand, in a fixed order: pitch entropy (bits, over
the multiset of sounding MIDI pitches), pitch range (max minus min MIDI),
average pitch, displacement (mean absolute jump between the mean pitches of
consecutive onsets), average inter-onset interval in quarters, and the LZ76
phrase count of the onset-indexed sequence of pitch-class sets.

Silent-hand convention: all six features are 0 except the IOI, which is the
fragment length in quarters; a hand with a single onset uses the same IOI
convention (no gap exists to average).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .errors import ClassTooSmall, InsufficientData, NegativeLevel
from .score import ScoreFragment, hand_onsets, total_quarters

DESCRIPTOR_NAMES = (
    "pitch_entropy_RH", "pitch_entropy_LH",
    "pitch_range_RH", "pitch_range_LH",
    "avg_pitch_RH", "avg_pitch_LH",
    "displacement_RH", "displacement_LH",
    "avg_ioi_RH", "avg_ioi_LH",
    "pitch_set_lz_RH", "pitch_set_lz_LH",
)

EASY, MEDIUM, ADVANCED = 0, 1, 2
CLASS_NAMES = {EASY: "Easy", MEDIUM: "Medium", ADVANCED: "Advanced"}


def group_level(level: int) -> int:
    """Collapse a nonnegative difficulty level onto the three classes:
    0 -> Easy, 1 -> Medium, 2 or higher -> Advanced."""
    if level < 0:
        raise NegativeLevel(f"difficulty level {level} is negative")
    return min(level, ADVANCED)


def lz76(symbols: Sequence[Hashable]) -> int:
    """Phrase count of the Lempel-Ziv 1976 parse of a symbol sequence.

    A run of one repeated symbol of length >= 2 counts 2 phrases; the empty
    sequence counts 0.
    """
    n = len(symbols)
    if n <= 1:
        return n
    c, l, i, k, k_max = 1, 1, 0, 1, 1
    while True:
        if symbols[i + k - 1] == symbols[l + k - 1]:
            k += 1
            if l + k > n:
                c += 1
                break
        else:
            k_max = max(k_max, k)
            i += 1
            if i == l:
                c += 1
                l += k_max
                if l + 1 > n:
                    break
                i, k, k_max = 0, 1, 1
            else:
                k = 1
    return c


@dataclass(frozen=True)
class DescriptorVector:
    """Raw descriptor values in :data:`DESCRIPTOR_NAMES` order."""

    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        assert len(self.values) == 12

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.values[DESCRIPTOR_NAMES.index(key)]
        return self.values[key]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _hand_features(onsets, fragment_length: float) -> tuple[float, ...]:
    if not onsets:
        return (0.0, 0.0, 0.0, 0.0, fragment_length, 0.0)
    pitch_multiset: list[int] = []
    means: list[float] = []
    pc_sets: list[frozenset[int]] = []
    for _, pitch_set in onsets:
        pitches = sorted(pitch_set)
        pitch_multiset.extend(pitches)
        means.append(sum(pitches) / len(pitches))
        pc_sets.append(frozenset(p % 12 for p in pitches))
    counts = np.bincount(np.asarray(pitch_multiset))
    probs = counts[counts > 0] / len(pitch_multiset)
    entropy = float(-(probs * np.log2(probs)).sum())
    rng = float(max(pitch_multiset) - min(pitch_multiset))
    avg_pitch = float(sum(pitch_multiset) / len(pitch_multiset))
    if len(means) >= 2:
        displacement = float(np.mean(np.abs(np.diff(means))))
    else:
        displacement = 0.0
    if len(onsets) >= 2:
        gaps = [float(b[0] - a[0]) for a, b in zip(onsets, onsets[1:])]
        avg_ioi = float(sum(gaps) / len(gaps))
    else:
        avg_ioi = fragment_length
    lz = float(lz76(pc_sets))
    return (entropy, rng, avg_pitch, displacement, avg_ioi, lz)


def extract_descriptors(f: ScoreFragment) -> DescriptorVector:
    """Compute the 12 raw descriptors for a valid fragment."""
    length = float(total_quarters(f))
    rh = _hand_features(hand_onsets(f, "RH"), length)
    lh = _hand_features(hand_onsets(f, "LH"), length)
    values = []
    for i in range(6):
        values.append(rh[i])
        values.append(lh[i])
    return DescriptorVector(tuple(values))


@dataclass(frozen=True)
class Normalizer:
    """Per-feature min-max scaling fitted on training descriptors.

    Output is clamped to [0, 1]; a degenerate feature (max equals min) maps
    to 0.5 everywhere.
    """

    mins: tuple[float, ...]
    maxs: tuple[float, ...]

    def apply(self, v: DescriptorVector | np.ndarray) -> np.ndarray:
        x = v.as_array() if isinstance(v, DescriptorVector) else np.asarray(v, dtype=np.float64)
        mins = np.asarray(self.mins)
        maxs = np.asarray(self.maxs)
        span = maxs - mins
        out = np.where(span > 0, (x - mins) / np.where(span > 0, span, 1.0), 0.5)
        return np.clip(out, 0.0, 1.0)


def fit_normalizer(rows: Sequence[DescriptorVector] | np.ndarray) -> Normalizer:
    X = _as_matrix(rows)
    if X.shape[0] < 2:
        raise InsufficientData("normalizer needs at least two descriptor rows")
    return Normalizer(tuple(X.min(axis=0).tolist()), tuple(X.max(axis=0).tolist()))


def _as_matrix(rows) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        return np.asarray(rows, dtype=np.float64)
    return np.stack([r.as_array() if isinstance(r, DescriptorVector) else np.asarray(r, dtype=np.float64)
                     for r in rows])


@dataclass(frozen=True)
class GnbModel:
    """Class priors plus per-class, per-feature Gaussian parameters."""

    classes: tuple[int, ...]
    priors: tuple[float, ...]
    means: tuple[tuple[float, ...], ...]
    variances: tuple[tuple[float, ...], ...]
    epsilon: float

    def log_posterior(self, v: np.ndarray | DescriptorVector) -> np.ndarray:
        """Normalized log p(class | v) in class order."""
        x = v.as_array() if isinstance(v, DescriptorVector) else np.asarray(v, dtype=np.float64)
        mu = np.asarray(self.means)
        var = np.asarray(self.variances)
        joint = np.log(np.asarray(self.priors))
        joint = joint + (-0.5 * np.log(2.0 * math.pi * var)
                         - (x[None, :] - mu) ** 2 / (2.0 * var)).sum(axis=1)
        m = joint.max()
        return joint - (m + np.log(np.exp(joint - m).sum()))

    def predict(self, v: np.ndarray | DescriptorVector) -> int:
        """Argmax class; exact ties resolve toward the lower class index."""
        return int(self.classes[int(np.argmax(self.log_posterior(v)))])


def gnb_fit(X, y: Sequence[int]) -> GnbModel:
    """Fit with population (divisor N) per-class variance. Variances are
    floored at eps = 1e-9 times the largest per-feature variance of the full
    data (1e-9 if everything is constant)."""
    X = _as_matrix(X)
    y = np.asarray(list(y), dtype=np.int64)
    classes = sorted(set(y.tolist()))
    full_var = X.var(axis=0)
    eps = 1e-9 * float(full_var.max()) if float(full_var.max()) > 0 else 1e-9
    priors, means, variances = [], [], []
    for c in classes:
        Xc = X[y == c]
        if Xc.shape[0] < 2:
            raise ClassTooSmall(f"class {c} has {Xc.shape[0]} samples, need at least 2")
        priors.append(Xc.shape[0] / X.shape[0])
        means.append(tuple(Xc.mean(axis=0).tolist()))
        variances.append(tuple(np.maximum(Xc.var(axis=0), eps).tolist()))
    return GnbModel(tuple(classes), tuple(priors), tuple(means), tuple(variances), eps)


def gnb_log_posterior(m: GnbModel, v) -> np.ndarray:
    return m.log_posterior(v)


def gnb_predict(m: GnbModel, v) -> int:
    return m.predict(v)


# --- persistence ---

GNB_FORMAT = "sightgen-gnb v1"


def save_gnb(path, model: GnbModel, normalizer: Normalizer) -> None:
    payload = {
        "format": GNB_FORMAT,
        "classes": list(model.classes),
        "priors": list(model.priors),
        "means": [list(row) for row in model.means],
        "variances": [list(row) for row in model.variances],
        "epsilon": model.epsilon,
        "normalizer": {"mins": list(normalizer.mins), "maxs": list(normalizer.maxs)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_gnb(path) -> tuple[GnbModel, Normalizer]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != GNB_FORMAT:
        raise InsufficientData(f"{path}: not a {GNB_FORMAT} file")
    model = GnbModel(
        classes=tuple(payload["classes"]),
        priors=tuple(payload["priors"]),
        means=tuple(tuple(r) for r in payload["means"]),
        variances=tuple(tuple(r) for r in payload["variances"]),
        epsilon=payload["epsilon"],
    )
    norm = Normalizer(tuple(payload["normalizer"]["mins"]),
                      tuple(payload["normalizer"]["maxs"]))
    return model, norm


def write_descriptor_csv(path, rows: Sequence[tuple[DescriptorVector, int]]) -> None:
    """One fragment per row: the 12 raw descriptors to six decimals plus a
    label column (-1 marks an unlabeled row)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(DESCRIPTOR_NAMES) + ["label"])
        for vec, label in rows:
            writer.writerow([f"{v:.6f}" for v in vec.values] + [str(label)])


def read_descriptor_csv(path) -> list[tuple[DescriptorVector, int]]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != list(DESCRIPTOR_NAMES) + ["label"]:
            raise InsufficientData(f"{path}: unexpected descriptor CSV header")
        rows = []
        for row in reader:
            rows.append((DescriptorVector(tuple(float(v) for v in row[:12])), int(row[12])))
    return rows
