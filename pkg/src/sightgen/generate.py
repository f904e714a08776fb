"""Difficulty-conditioned sampling and the conditioning evaluation harness.

Sampling is top-k/temperature (or greedy) from prompt + SEP, stopping at
END, at `max_tokens`, or once `bar_limit` measures are complete (the limit
stop closes the sequence with END so the result detokenizes cleanly). With
`grammar_filter` on, logits of grammar-illegal successors are masked to
-inf, which forces exactly-filled measures.

Each sample owns an independent RNG seeded `base_seed + sample_index`;
batches share forward passes but never RNG draws, so a fixed configuration
reproduces the same sample set.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .difficulty import GnbModel, Normalizer, extract_descriptors
from .errors import Unparseable, VocabMismatch
from .model import CheckpointBundle, TransformerLM, loss_ce
from .prompt import Prompt, build_prompt
from .score import ScoreFragment
from .tokenizer import END, GrammarMasker, GrammarState, Vocabulary, detokenize

CLASS_WORDS = {0: "easy", 1: "medium", 2: "advanced"}


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    greedy: bool = False
    top_k: int = 32               # 0 disables top-k truncation
    max_tokens: int = 1024
    seed: int = 0
    bar_limit: int = 16
    grammar_filter: bool = False

    def __post_init__(self):
        if not self.greedy and self.temperature <= 0:
            raise ValueError("temperature must be positive unless greedy")
        if self.bar_limit < 1:
            raise ValueError("bar_limit must be at least 1")


def _check_vocab(model: TransformerLM, vocab: Vocabulary, prompt_ids) -> None:
    if model.cfg.vocab_size != len(vocab):
        raise VocabMismatch(
            f"model vocabulary size {model.cfg.vocab_size} != vocabulary {len(vocab)}")
    if prompt_ids and max(prompt_ids) >= len(vocab):
        raise VocabMismatch("prompt ids outside the vocabulary")


def sample(model: TransformerLM, vocab: Vocabulary, prompt: Prompt,
           cfg: SamplerConfig) -> list[str]:
    """Sample one token sequence (music tokens only, END included when the
    sequence closed cleanly)."""
    return sample_batch(model, vocab, prompt, cfg, [cfg.seed])[0]


def sample_batch(model: TransformerLM, vocab: Vocabulary, prompt: Prompt,
                 cfg: SamplerConfig, seeds: list[int]) -> list[list[str]]:
    """Sample len(seeds) sequences for one prompt, sharing forward passes."""
    ids = list(prompt.ids) if prompt.ids is not None else vocab.encode(prompt.tokens)
    _check_vocab(model, vocab, ids)
    model.eval()

    B = len(seeds)
    gens = []
    for s in seeds:
        g = torch.Generator()
        g.manual_seed(int(s))
        gens.append(g)
    states = [GrammarState(bar_limit=cfg.bar_limit) for _ in range(B)]
    masker = GrammarMasker(vocab) if cfg.grammar_filter else None
    outputs: list[list[str]] = [[] for _ in range(B)]
    bars = [0] * B
    active = list(range(B))
    budget = min(cfg.max_tokens, model.cfg.max_len - len(ids) - 1)

    with torch.no_grad():
        step_ids = torch.tensor([ids] * B, dtype=torch.int64)
        logits, past = model.decode_step(step_ids, None)
        for _ in range(budget):
            next_col = np.full(B, vocab.pad_id, dtype=np.int64)
            for i in list(active):
                row = logits[i]
                if cfg.grammar_filter:
                    legal = masker.mask(states[i])
                    if not legal.any():
                        active.remove(i)
                        continue
                    row = row.masked_fill(~torch.from_numpy(legal), float("-inf"))
                if cfg.greedy:
                    tok_id = int(row.argmax())
                else:
                    row = row / cfg.temperature
                    if cfg.top_k > 0 and cfg.top_k < row.shape[-1]:
                        kth = torch.topk(row, cfg.top_k).values[-1]
                        row = torch.where(row < kth, torch.full_like(row, float("-inf")), row)
                    probs = torch.softmax(row, dim=-1)
                    tok_id = int(torch.multinomial(probs, 1, generator=gens[i]))
                text = vocab.id_to_token[tok_id]

                if text == "bar" and bars[i] >= cfg.bar_limit:
                    outputs[i].append(END)      # close instead of a 17th measure
                    active.remove(i)
                    continue
                outputs[i].append(text)
                next_col[i] = tok_id
                if text == "bar":
                    bars[i] += 1
                if cfg.grammar_filter:
                    states[i].feed(text)
                if text == END:
                    active.remove(i)
            if not active:
                break
            logits, past = model.decode_step(
                torch.from_numpy(next_col).view(B, 1), past)
    return outputs


@dataclass
class GeneratedExercise:
    label: int
    tokens: list[str]
    fragment: ScoreFragment | None    # None marks a degenerate sample
    warnings: list[str]
    seed: int
    prompt_text: str


def class_prompt(bundle: CheckpointBundle, label: int, vocab: Vocabulary) -> Prompt:
    """The conditioning prompt for a class: feats formats use the
    class-conditional mean feature vector stored in the checkpoint."""
    if bundle.class_feature_means:
        features = bundle.class_feature_means[label]
    else:
        features = [0.0] * 12
    return build_prompt(features, label, bundle.train_cfg.prompt_type, vocab)


def generate_exercises(bundle: CheckpointBundle, vocab: Vocabulary, label: int,
                       n: int, cfg: SamplerConfig, *, max_retries: int = 3,
                       batch_size: int = 32) -> list[GeneratedExercise]:
    """Generate n exercises for a class; unparseable samples are resampled
    up to `max_retries` times with fresh seeds, then kept as degenerate."""
    prompt = class_prompt(bundle, label, vocab)
    out: list[GeneratedExercise] = []
    seeds = [cfg.seed + i for i in range(n)]
    retry_base = cfg.seed + n

    for lo in range(0, n, batch_size):
        chunk = seeds[lo: lo + batch_size]
        tokens = sample_batch(bundle.model, vocab, prompt, cfg, chunk)
        for j, toks in enumerate(tokens):
            seed = chunk[j]
            frag, warnings = _try_detokenize(toks)
            retries = 0
            while frag is None and retries < max_retries:
                seed = retry_base + (lo + j) * max_retries + retries
                toks = sample_batch(bundle.model, vocab, prompt, cfg, [seed])[0]
                frag, warnings = _try_detokenize(toks)
                retries += 1
            out.append(GeneratedExercise(
                label=label, tokens=toks, fragment=frag,
                warnings=warnings, seed=seed, prompt_text=prompt.text))
    return out


def _try_detokenize(tokens: list[str]):
    try:
        result = detokenize(tokens)
        return result.fragment, result.warnings
    except Unparseable as exc:
        return None, [str(exc)]


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: dict[str, float]
    mse: float
    n_samples: int
    n_per_class: int
    degeneration: float
    val_ce: float | None = None
    sampler: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def eval_conditioning(bundle: CheckpointBundle, vocab: Vocabulary, gnb: GnbModel,
                      normalizer: Normalizer, n_per_class: int,
                      cfg: SamplerConfig, val_ce: float | None = None) -> EvalReport:
    """Generate a balanced sample per class and score it with the same GNB
    pipeline that labeled the training data. Degenerate samples count as
    wrong with squared error 4 (the worst class distance, squared)."""
    correct_by_class: dict[int, int] = {}
    sqerr_total = 0.0
    degenerate = 0
    for label in (0, 1, 2):
        per_class_cfg = SamplerConfig(**{**asdict(cfg), "seed": cfg.seed + label * n_per_class})
        exercises = generate_exercises(bundle, vocab, label, n_per_class, per_class_cfg)
        hits = 0
        for ex in exercises:
            if ex.fragment is None:
                degenerate += 1
                sqerr_total += 4.0
                continue
            pred = gnb.predict(normalizer.apply(extract_descriptors(ex.fragment)))
            if pred == label:
                hits += 1
            sqerr_total += float((pred - label) ** 2)
        correct_by_class[label] = hits
    n_total = 3 * n_per_class
    return EvalReport(
        accuracy=sum(correct_by_class.values()) / n_total,
        per_class_accuracy={CLASS_WORDS[c]: correct_by_class[c] / n_per_class
                            for c in (0, 1, 2)},
        mse=sqerr_total / n_total,
        n_samples=n_total,
        n_per_class=n_per_class,
        degeneration=degenerate / n_total,
        val_ce=val_ce,
        sampler=asdict(cfg),
    )


def eval_val_loss(model: TransformerLM, vocab: Vocabulary, records,
                  prompt_type: str, batch_size: int = 32) -> float:
    """Masked mean cross entropy over a validation manifest (token mean
    across all music target positions)."""
    from .model import encode_training_sequences, _pad_batch

    if model.cfg.vocab_size != len(vocab):
        raise VocabMismatch(
            f"model vocabulary size {model.cfg.vocab_size} != vocabulary {len(vocab)}")
    seqs, masks, _labels = encode_training_sequences(records, vocab, prompt_type)
    model.eval()
    total_nll, total_tok = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(seqs), batch_size):
            chunk_seqs = seqs[lo: lo + batch_size]
            chunk_masks = masks[lo: lo + batch_size]
            ids, _lens = _pad_batch(chunk_seqs, vocab.pad_id)
            mask = np.zeros(ids.shape, dtype=bool)
            for i, m in enumerate(chunk_masks):
                mask[i, : len(m)] = m
            mask_t = torch.from_numpy(mask)
            logits, _ = model(ids)
            n = int(mask_t[:, 1:].sum())
            if n:
                total_nll += float(loss_ce(logits[:, :-1, :], ids[:, 1:], mask_t[:, 1:])) * n
                total_tok += n
    return total_nll / max(total_tok, 1)


def write_exercise_files(outdir, exercises: list[GeneratedExercise],
                         gnb: GnbModel, normalizer: Normalizer) -> list[str]:
    """One MusicXML file plus one JSON sidecar per parseable exercise,
    named <class>_<index>.musicxml."""
    from pathlib import Path

    from . import musicxml

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    index: dict[int, int] = {}
    for ex in exercises:
        i = index.get(ex.label, 0)
        index[ex.label] = i + 1
        stem = f"{CLASS_WORDS[ex.label]}_{i:03d}"
        sidecar = {
            "class": CLASS_WORDS[ex.label],
            "prompt": ex.prompt_text,
            "seed": ex.seed,
            "degenerate": ex.fragment is None,
            "warnings": ex.warnings,
        }
        if ex.fragment is not None:
            (outdir / f"{stem}.musicxml").write_bytes(musicxml.serialize(ex.fragment))
            desc = extract_descriptors(ex.fragment)
            normalized = normalizer.apply(desc)
            sidecar["descriptors"] = dict(zip(
                ("pitch_entropy_RH", "pitch_entropy_LH", "pitch_range_RH", "pitch_range_LH",
                 "avg_pitch_RH", "avg_pitch_LH", "displacement_RH", "displacement_LH",
                 "avg_ioi_RH", "avg_ioi_LH", "pitch_set_lz_RH", "pitch_set_lz_LH"),
                [round(v, 6) for v in desc.values]))
            sidecar["gnb_log_posterior"] = [round(float(v), 6)
                                            for v in gnb.log_posterior(normalized)]
            written.append(f"{stem}.musicxml")
        (outdir / f"{stem}.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return written
