"""Decoder-only transformer with an auxiliary difficulty head.

Pre-norm blocks, learned positional embeddings, causal masking. The
auxiliary head reads the hidden state at the END position and predicts the
difficulty class; with `detach_aux` the head input is detached, so the
language-model parameters receive exactly zero gradient from that loss.
Losses accumulate in float64; parameters stay float32.

Training is single threaded and bit-reproducible for a fixed seed: AdamW,
gradient-norm clipping at 1.0, seeded shuffling, evaluation every two
epochs keeping the best-validation-CE parameters, and early stop after two
consecutive non-improving evaluations.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    CorruptCheckpoint,
    EmptyMask,
    NonFiniteLoss,
    SequenceTooLong,
    VocabMismatch,
)

NUM_CLASSES = 3


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    d_ff: int = 512
    max_len: int = 1024
    dropout: float = 0.1
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")


@dataclass
class TrainConfig:
    prompt_type: str = "diff"
    beta: float = 0.1
    detach_aux: bool = True
    lr: float = 1e-4
    lr_min: float = 1e-5
    batch_size: int = 16
    scheduler: str = "constant"      # constant or cosine
    seed: int = 0
    max_epochs: int = 30
    eval_every: int = 2              # epochs between validation evaluations
    patience: int = 2                # non-improving evaluations before stopping
    grad_clip: float = 1.0


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.d_model // cfg.heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, past=None):
        B, T, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=2)

        def heads(t):
            return t.view(B, T, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        offset = 0
        if past is not None:
            pk, pv = past
            offset = pk.shape[2]
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        total = offset + T
        causal = torch.arange(total, device=x.device)[None, :] <= \
            (offset + torch.arange(T, device=x.device))[:, None]
        att = att.masked_fill(~causal, float("-inf"))
        att = F.softmax(att, dim=-1)
        att = self.drop(att)
        y = (att @ v).transpose(1, 2).contiguous().view(B, T, C)
        return self.drop(self.proj(y)), (k, v)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x, past=None):
        a, present = self.attn(self.ln1(x), past)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, present


class TransformerLM(nn.Module):
    """theta_lm (embeddings, blocks, lm_head) plus theta_diff (aux_head)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.aux_head = nn.Linear(cfg.d_model, cfg.num_classes)

    def lm_parameters(self):
        """Everything except the auxiliary head."""
        return [p for name, p in self.named_parameters() if not name.startswith("aux_head")]

    def hidden_states(self, ids, past=None):
        B, T = ids.shape
        offset = past[0][0].shape[2] if past is not None else 0
        if offset + T > self.cfg.max_len:
            raise SequenceTooLong(f"{offset + T} tokens exceed max_len {self.cfg.max_len}")
        pos = torch.arange(offset, offset + T, device=ids.device)
        x = self.drop(self.tok_emb(ids) + self.pos_emb(pos)[None, :, :])
        presents = []
        for i, block in enumerate(self.blocks):
            x, present = block(x, past[i] if past is not None else None)
            presents.append(present)
        return self.ln_f(x), presents

    def forward(self, ids, lengths=None):
        """Full-sequence forward. Returns per-position vocabulary logits and
        the hidden state at each sequence's END position (its last real
        token when `lengths` is given, else the final position)."""
        h, _ = self.hidden_states(ids)
        logits = self.lm_head(h)
        if lengths is None:
            end_hidden = h[:, -1, :]
        else:
            idx = (torch.as_tensor(lengths, device=ids.device) - 1).view(-1, 1, 1)
            end_hidden = h.gather(1, idx.expand(-1, 1, h.shape[-1])).squeeze(1)
        return logits, end_hidden

    def decode_step(self, ids, past):
        """Incremental decoding: feed new ids with the cached keys/values,
        return last-position logits and the extended cache."""
        h, presents = self.hidden_states(ids, past)
        return self.lm_head(h[:, -1, :]), presents


def loss_ce(logits, targets, mask):
    """Mean negative log-likelihood over mask-true positions, in float64."""
    mask = mask.reshape(-1)
    if int(mask.sum()) == 0:
        raise EmptyMask("cross-entropy mask selects no positions")
    flat = logits.reshape(-1, logits.shape[-1])[mask].double()
    tgt = targets.reshape(-1)[mask]
    logp = flat - torch.logsumexp(flat, dim=-1, keepdim=True)
    return -logp.gather(1, tgt.view(-1, 1)).mean()


def loss_aux(aux_head, end_hidden, labels, detach: bool):
    """Negative log-likelihood of the difficulty label from the END hidden
    state. With detach=True the hidden state is treated as a constant, so
    the language model receives no gradient from this loss."""
    h = end_hidden.detach() if detach else end_hidden
    logits = aux_head(h).double()
    logp = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -logp.gather(1, labels.view(-1, 1)).mean()


def loss_total(ce, aux, beta: float):
    return ce + beta * aux


# --- training ---

@dataclass
class TrainResult:
    model: TransformerLM
    log: list[dict]
    best_val_ce: float
    class_feature_means: list[list[float]]


def _bucketed_order(perm: np.ndarray, seqs, batch_size: int,
                    window: int = 8) -> np.ndarray:
    """Sort each window of `window` batches in a shuffled order by sequence
    length, so batches pad like with like. Deterministic given the
    permutation; keeps the epoch stochastic at the window level."""
    span = batch_size * window
    out = []
    for lo in range(0, len(perm), span):
        chunk = perm[lo: lo + span]
        out.extend(sorted(chunk.tolist(), key=lambda i: (len(seqs[i]), i)))
    return np.asarray(out, dtype=np.int64)


def _pad_batch(seqs: list[np.ndarray], pad_id: int):
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    return torch.from_numpy(ids), torch.from_numpy(lengths)


def _batch_losses(model, seq_ids, masks, labels, pad_id, detach):
    ids, lens = _pad_batch(seq_ids, pad_id)
    width = ids.shape[1]
    mask = np.zeros((len(seq_ids), width), dtype=bool)
    for i, m in enumerate(masks):
        mask[i, : len(m)] = m
    mask_t = torch.from_numpy(mask)
    logits, end_hidden = model(ids, lengths=lens)
    ce = loss_ce(logits[:, :-1, :], ids[:, 1:], mask_t[:, 1:])
    aux = loss_aux(model.aux_head, end_hidden, torch.as_tensor(labels), detach)
    return ce, aux


def encode_training_sequences(records, vocab, prompt_type):
    """Prompt + SEP + music ids, the per-position loss mask, and the label
    for every record."""
    from .prompt import build_prompt, prompt_mask

    seqs, masks, labels = [], [], []
    for r in records:
        p = build_prompt(r.features, r.label, prompt_type, vocab)
        ids = np.array(list(p.ids) + vocab.encode(r.tokens), dtype=np.int64)
        seqs.append(ids)
        masks.append(prompt_mask(ids, vocab.sep_id))
        labels.append(r.label)
    return seqs, masks, np.array(labels, dtype=np.int64)


def evaluate(model, seqs, masks, labels, pad_id, batch_size=32):
    """(masked mean CE, auxiliary head accuracy) over a dataset."""
    model.eval()
    total_nll, total_tok, correct = 0.0, 0, 0
    with torch.no_grad():
        for lo in range(0, len(seqs), batch_size):
            chunk = slice(lo, lo + batch_size)
            ids, lens = _pad_batch(seqs[chunk], pad_id)
            width = ids.shape[1]
            mask = np.zeros((ids.shape[0], width), dtype=bool)
            for i, m in enumerate(masks[chunk]):
                mask[i, : len(m)] = m
            mask_t = torch.from_numpy(mask)
            logits, end_hidden = model(ids, lengths=lens)
            n = int(mask_t[:, 1:].sum())
            if n:
                total_nll += float(loss_ce(logits[:, :-1, :], ids[:, 1:], mask_t[:, 1:])) * n
                total_tok += n
            pred = model.aux_head(end_hidden).argmax(dim=-1).numpy()
            correct += int((pred == labels[chunk]).sum())
    model.train()
    ce = total_nll / total_tok if total_tok else float("nan")
    return ce, correct / max(len(seqs), 1)


def train(split, vocab, model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainResult:
    """Fit on a DatasetSplit (or any object with .train/.validation record
    lists) and return the best-validation-CE parameters."""
    torch.manual_seed(train_cfg.seed)
    model = TransformerLM(model_cfg)
    model.train()

    seqs, masks, labels = encode_training_sequences(split.train, vocab, train_cfg.prompt_type)
    val = encode_training_sequences(split.validation, vocab, train_cfg.prompt_type) \
        if split.validation else None
    pad_id = vocab.pad_id

    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.lr,
                            betas=(0.9, 0.999), weight_decay=0.01)
    if train_cfg.scheduler == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=max(train_cfg.max_epochs, 1), eta_min=train_cfg.lr_min)
    elif train_cfg.scheduler == "constant":
        sched = None
    else:
        raise ValueError(f"unknown scheduler {train_cfg.scheduler!r}")

    rng = np.random.default_rng(train_cfg.seed)
    log: list[dict] = []
    best_ce = float("inf")
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    stale = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = _bucketed_order(rng.permutation(len(seqs)), seqs, train_cfg.batch_size)
        epoch_nll, epoch_tok = 0.0, 0
        for lo in range(0, len(order), train_cfg.batch_size):
            idx = order[lo: lo + train_cfg.batch_size]
            ce, aux = _batch_losses(
                model, [seqs[i] for i in idx], [masks[i] for i in idx],
                labels[idx], pad_id, train_cfg.detach_aux)
            total = loss_total(ce, aux, train_cfg.beta)
            if not torch.isfinite(total):
                raise NonFiniteLoss(f"epoch {epoch}: loss is {total.detach().item()}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()
            ntok = sum(int(m[1:].sum()) for m in (masks[i] for i in idx))
            epoch_nll += ce.detach().item() * ntok
            epoch_tok += ntok
        if sched is not None:
            sched.step()

        if epoch % train_cfg.eval_every == 0 or epoch == train_cfg.max_epochs:
            if val is not None:
                val_ce, aux_acc = evaluate(model, *val, pad_id)
            else:
                val_ce, aux_acc = epoch_nll / max(epoch_tok, 1), float("nan")
            log.append({
                "epoch": epoch,
                "train_ce": epoch_nll / max(epoch_tok, 1),
                "val_ce": val_ce,
                "aux_acc": aux_acc,
                "lr": opt.param_groups[0]["lr"],
            })
            if val_ce < best_ce:
                best_ce = val_ce
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    break

    model.load_state_dict(best_state)
    model.eval()

    means = []
    feats = np.array([r.features for r in split.train], dtype=np.float64)
    labs = np.array([r.label for r in split.train])
    for c in range(model_cfg.num_classes):
        rows = feats[labs == c]
        means.append(rows.mean(axis=0).tolist() if len(rows) else [0.0] * feats.shape[1])
    return TrainResult(model=model, log=log, best_val_ce=best_ce, class_feature_means=means)


# --- gradient checking ---

@dataclass
class GradCheckCase:
    detach: bool
    beta: float
    max_rel_error: float
    max_abs_error_zero_dirs: float
    coords: int


@dataclass
class GradCheckReport:
    cases: list[GradCheckCase]
    max_rel_error: float
    max_abs_error_zero_dirs: float
    bits: int
    step: float

    def to_json(self) -> dict:
        return {
            "bits": self.bits, "step": self.step,
            "max_rel_error": self.max_rel_error,
            "max_abs_error_zero_dirs": self.max_abs_error_zero_dirs,
            "cases": [asdict(c) for c in self.cases],
        }


def _tiny_config(vocab_size=20) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d_model=16, layers=2, heads=2,
                       d_ff=32, max_len=32, dropout=0.0)


def grad_check(model_cfg: ModelConfig | None = None, *, bits: int = 64,
               step: float = 1e-3, coords_per_tensor: int = 12,
               seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of the total loss against central finite
    differences on a tiny model, across both detach modes and three beta
    values.

    The numeric side uses a five-point central stencil evaluated on a
    float64 twin of the model, so the difference measures backward-pass
    error rather than stencil truncation; in 32-bit mode the analytic side
    stays float32 and the check certifies that single-precision backprop
    tracks the true gradient. In detach mode the auxiliary input is a
    stop-gradient constant, so the numeric evaluation freezes the END
    hidden state at its base value: both sides then differentiate the same
    function. Directions where both gradients fall below a per-mode guard
    (1e-6 in 64-bit, 1e-3 in 32-bit: the precision floor of the analytic
    side) carry no meaningful ratio and are reported as absolute error."""
    import copy

    cfg = model_cfg or _tiny_config()
    dtype = torch.float64 if bits == 64 else torch.float32
    guard = 1e-6 if bits == 64 else 1e-3
    rng = np.random.default_rng(seed)
    cases = []
    grid = [(True, 0.0), (True, 0.1), (True, 1.0), (False, 0.0), (False, 0.1), (False, 1.0)]
    for case_i, (detach, beta) in enumerate(grid):
        torch.manual_seed(seed + case_i)
        model = TransformerLM(cfg).to(dtype)
        model.eval()
        fd_model = copy.deepcopy(model).double()
        fd_model.eval()

        B, T = 2, 10
        ids = torch.from_numpy(rng.integers(0, cfg.vocab_size, size=(B, T)))
        mask = np.zeros((B, T), dtype=bool)
        mask[:, 3:] = True        # prompt-like prefix excluded
        mask_t = torch.from_numpy(mask)
        labels = torch.from_numpy(rng.integers(0, cfg.num_classes, size=B))
        lengths = torch.full((B,), T, dtype=torch.int64)

        def compute_loss(m, frozen_hidden=None):
            logits, end_hidden = m(ids, lengths=lengths)
            ce = loss_ce(logits[:, :-1, :], ids[:, 1:], mask_t[:, 1:])
            h = frozen_hidden if frozen_hidden is not None else end_hidden
            aux = loss_aux(m.aux_head, h, labels, detach)
            return loss_total(ce, aux, beta)

        model.zero_grad(set_to_none=True)
        compute_loss(model).backward()
        frozen = None
        if detach:
            with torch.no_grad():
                _, frozen = fd_model(ids, lengths=lengths)

        max_rel, max_abs_zero, n_coords = 0.0, 0.0, 0
        fd_params = dict(fd_model.named_parameters())
        for name, p in model.named_parameters():
            grad = (p.grad if p.grad is not None else torch.zeros_like(p)).view(-1)
            flat = fd_params[name].detach().view(-1)
            k = min(coords_per_tensor, flat.numel())
            picks = rng.choice(flat.numel(), size=k, replace=False)
            for j in picks:
                orig = float(flat[j])
                with torch.no_grad():
                    evals = []
                    for offset in (2 * step, step, -step, -2 * step):
                        flat[j] = orig + offset
                        evals.append(float(compute_loss(fd_model, frozen)))
                    flat[j] = orig
                f2u, f1u, f1d, f2d = evals
                numeric = (-f2u + 8 * f1u - 8 * f1d + f2d) / (12 * step)
                analytic = float(grad[j])
                denom = max(abs(analytic), abs(numeric))
                n_coords += 1
                if denom < guard:
                    max_abs_zero = max(max_abs_zero, abs(analytic - numeric))
                else:
                    max_rel = max(max_rel, abs(analytic - numeric) / denom)
        cases.append(GradCheckCase(detach, beta, max_rel, max_abs_zero, n_coords))
    return GradCheckReport(
        cases=cases,
        max_rel_error=max(c.max_rel_error for c in cases),
        max_abs_error_zero_dirs=max(c.max_abs_error_zero_dirs for c in cases),
        bits=bits,
        step=step,
    )


# --- checkpoint format ---

CKPT_MAGIC = b"SGCKPT"
CKPT_VERSION = 1


@dataclass
class CheckpointBundle:
    model: TransformerLM
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    vocab_sha256: str
    class_feature_means: list[list[float]]
    log_summary: dict


def save_checkpoint(path, model: TransformerLM, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, vocab_sha256: str,
                    class_feature_means: Sequence[Sequence[float]] = (),
                    log_summary: dict | None = None) -> None:
    meta = {
        "model_cfg": asdict(model_cfg),
        "train_cfg": asdict(train_cfg),
        "vocab_sha256": vocab_sha256,
        "class_feature_means": [list(r) for r in class_feature_means],
        "log_summary": log_summary or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        data = tensor.detach().cpu().numpy().astype("<f4")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<Q", dim))
        raw = data.tobytes()
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, vocab=None) -> CheckpointBundle:
    raw = Path(path).read_bytes()
    view = io.BytesIO(raw)

    def take(n: int) -> bytes:
        b = view.read(n)
        if len(b) != n:
            raise CorruptCheckpoint(f"{path}: truncated checkpoint")
        return b

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    version, meta_len = struct.unpack("<IQ", take(12))
    if version != CKPT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: bad metadata") from exc
    if vocab is not None and vocab.sha256() != meta["vocab_sha256"]:
        raise VocabMismatch(
            f"{path}: checkpoint was trained with a different vocabulary")

    (n_tensors,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        arr = np.frombuffer(take(nbytes), dtype="<f4").reshape(shape).copy()
        state[name] = torch.from_numpy(arr)
    if view.read(1):
        raise CorruptCheckpoint(f"{path}: trailing bytes")

    model_cfg = ModelConfig(**meta["model_cfg"])
    train_cfg = TrainConfig(**meta["train_cfg"])
    model = TransformerLM(model_cfg)
    model.load_state_dict(state)
    model.eval()
    return CheckpointBundle(
        model=model,
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        vocab_sha256=meta["vocab_sha256"],
        class_feature_means=meta.get("class_feature_means", []),
        log_summary=meta.get("log_summary", {}),
    )
