"""Exception hierarchy shared across the package.

Every error raised by sightgen derives from :class:`SightgenError`, so CLI
entry points can catch one type and map it to a nonzero exit code.
"""


class SightgenError(Exception):
    """Base class for all sightgen errors."""


# --- musicxml ---

class MalformedXml(SightgenError):
    """Input bytes are not well-formed XML."""


class UnsupportedStructure(SightgenError):
    """Document shape outside the supported subset (parts, staves, voices)."""


class InconsistentTiming(SightgenError):
    """backup/forward navigation moved the measure cursor below zero."""


class NonRepresentable(SightgenError):
    """A duration cannot be expressed with an integer divisions value."""


# --- tokenizer ---

class DurationNotRepresentable(SightgenError):
    """Duration is not a multiple of 1/12 quarter note."""


class Unparseable(SightgenError):
    """No complete measure could be recovered from a token sequence."""


class EmptyCorpus(SightgenError):
    """Vocabulary construction received no sequences."""


class UnknownId(SightgenError):
    """Token id outside the vocabulary range."""


# --- difficulty ---

class InsufficientData(SightgenError):
    """Not enough samples to fit (normalizer needs at least two rows)."""


class ClassTooSmall(SightgenError):
    """A class has fewer than two samples; Gaussian fit is undefined."""


class NegativeLevel(SightgenError):
    """Difficulty levels are nonnegative integers."""


# --- corpus ---

class EmptySplit(SightgenError):
    """A difficulty class is absent from the training split."""


# --- prompt ---

class MissingSep(SightgenError):
    """Sequence does not contain exactly one SEP token."""


# --- nn ---

class SequenceTooLong(SightgenError):
    """Sequence length exceeds the model's maximum context."""


class EmptyMask(SightgenError):
    """Loss mask selects no positions."""


class NonFiniteLoss(SightgenError):
    """Training loss became NaN or infinite."""


class CorruptCheckpoint(SightgenError):
    """Checkpoint file is truncated or has a bad header."""


class VocabMismatch(SightgenError):
    """Checkpoint was trained with a different vocabulary."""
