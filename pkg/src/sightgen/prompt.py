"""Conditioning prefixes: four formats, from a bare label to feature-rich
chain-of-thought text, rendered from versioned templates.

Feature values are printed to exactly two decimals with half-up rounding,
in the fixed descriptor order (entropy, range, average pitch, displacement,
IOI, LZ; right hand before left). Prompt text is whitespace-tokenized with
punctuation kept attached to words, except that a two-decimal value keeps
its own token and sheds trailing punctuation ("0.21," becomes "0.21" ",").
A SEP token closes every prompt and separates it from the music tokens.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP
from importlib import resources

import numpy as np

from .errors import MissingSep
from .tokenizer import SEP, Vocabulary

PROMPT_TYPES = ("diff", "diff_cot", "feats", "feats_cot")
TEMPLATE_VERSION = "v1"

# slot names in feature order; the label word for class 1 follows each
# template's own spelling ("Medium" everywhere except diff_cot's "Mid")
_SLOTS = ("entropy", "range", "avg_pitch", "displacement", "ioi", "lz")
_LABEL_WORDS = {
    "diff": ("Easy", "Medium", "Advanced"),
    "diff_cot": ("Easy", "Mid", "Advanced"),
    "feats": ("Easy", "Medium", "Advanced"),
    "feats_cot": ("Easy", "Medium", "Advanced"),
}
_VALUE_TOKEN_RE = re.compile(r"(\d\.\d{2})([.,;:]+)$")


def _load_template(name: str) -> str:
    ref = resources.files("sightgen").joinpath(f"templates/{TEMPLATE_VERSION}/{name}.txt")
    return ref.read_text(encoding="utf-8")


_TEMPLATES: dict[str, str] = {}


def template_text(prompt_type: str) -> str:
    if prompt_type not in PROMPT_TYPES:
        raise ValueError(f"unknown prompt type {prompt_type!r}")
    if prompt_type not in _TEMPLATES:
        _TEMPLATES[prompt_type] = _load_template(prompt_type)
    return _TEMPLATES[prompt_type]


def format_value(x: float) -> str:
    """Two decimals, half-up: 0.005 -> '0.01'."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def value_token_inventory() -> list[str]:
    """The 101 two-decimal strings 0.00 .. 1.00, each a single token."""
    return [format_value(i / 100) for i in range(101)]


def prompt_text_tokens(text: str) -> list[str]:
    out: list[str] = []
    for word in text.split():
        m = _VALUE_TOKEN_RE.match(word)
        if m:
            out.append(m.group(1))
            out.extend(m.group(2))
        else:
            out.append(word)
    return out


@dataclass(frozen=True)
class Prompt:
    type: str
    label: int
    text: str
    tokens: tuple[str, ...]          # text tokens followed by SEP
    ids: tuple[int, ...] | None = None


def build_prompt(features, label: int, prompt_type: str,
                 vocab: Vocabulary | None = None) -> Prompt:
    """Render the template for (features, label, type); features must be
    normalized to [0, 1] and are ignored by the diff formats."""
    feats = np.asarray(features, dtype=np.float64)
    word = _LABEL_WORDS[prompt_type][label]
    fields = {"label": word}
    for i, slot in enumerate(_SLOTS):
        fields[f"{slot}_rh"] = format_value(feats[2 * i])
        fields[f"{slot}_lh"] = format_value(feats[2 * i + 1])
    text = template_text(prompt_type).format(**fields)
    tokens = tuple(prompt_text_tokens(text)) + (SEP,)
    ids = tuple(vocab.encode(tokens)) if vocab is not None else None
    return Prompt(prompt_type, label, text, tokens, ids)


def prompt_token_inventory() -> set[str]:
    """Every token any rendered template can produce, plus the 101 value
    strings. These are always kept in the vocabulary."""
    inventory: set[str] = set(value_token_inventory())
    probe = [0.0] * 12
    for ptype in PROMPT_TYPES:
        for label in (0, 1, 2):
            for tok in build_prompt(probe, label, ptype).tokens:
                if tok != SEP:
                    inventory.add(tok)
    return inventory


def prompt_mask(ids, sep_id: int) -> np.ndarray:
    """Per-position loss mask for a prompt+SEP+music id sequence: False for
    the prompt and the SEP, True for every music position. Requires exactly
    one SEP."""
    arr = np.asarray(ids)
    hits = np.flatnonzero(arr == sep_id)
    if hits.size != 1:
        raise MissingSep(f"expected exactly one SEP, found {hits.size}")
    mask = np.zeros(arr.shape[0], dtype=bool)
    mask[hits[0] + 1:] = True
    return mask
