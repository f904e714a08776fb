"""Command line entry point: the full pipeline behind one executable.

Subcommands: ingest, descriptors, fit-gnb, dataset, train, generate, eval,
grad-check. A JSON config file (one nesting level) can supply any flag's
value; explicit flags win, unknown keys are errors. Every run writes a
resolved-config echo next to its outputs, and all randomness flows from
--seed, so reruns with identical configs are byte-identical.

Exit codes: 0 success, 1 data error (structured message on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import difficulty, generate, model as model_mod, musicxml, prompt, tokenizer
from .errors import SightgenError

log = logging.getLogger("sightgen")

CLASS_BY_WORD = {"easy": 0, "medium": 1, "advanced": 2}
BUNDLED_GNB_CSV = "gnb_seed.csv"


def _echo_config(out_path: Path, args: argparse.Namespace, parser_dests: set[str]) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items())
                if k in parser_dests and k not in ("func", "config")}
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in resolved.items()}
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")


def _iter_musicxml(folder: Path) -> list[Path]:
    files = [p for p in sorted(folder.iterdir())
             if p.suffix.lower() in (".musicxml", ".xml")]
    if not files:
        raise SightgenError(f"{folder}: no .musicxml or .xml files")
    return files


def _parse_one(path: Path):
    try:
        return path.name, musicxml.parse(path.read_bytes()), None
    except SightgenError as exc:
        return path.name, None, exc


def _parse_folder(folder: Path, jobs: int):
    """(name, ParseReport or None, error or None) per file, in sorted name
    order regardless of worker count."""
    files = _iter_musicxml(folder)
    if jobs <= 1 or len(files) < 4:
        return [_parse_one(p) for p in files]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_parse_one, files, chunksize=8))


def _load_vocab(dataset_dir: Path) -> tokenizer.Vocabulary:
    return tokenizer.Vocabulary.load(dataset_dir / "vocab.tsv")


# --- subcommand implementations ---

def cmd_ingest(args) -> int:
    results = _parse_folder(args.input, args.jobs)
    stats = {"files": len(results), "parsed": 0, "failed": [], "measures": 0,
             "fragments_16bar": 0, "warnings": 0, "skipped_elements": {}}
    for name, report, error in results:
        if error is not None:
            stats["failed"].append({"file": name, "error": type(error).__name__,
                                    "message": str(error)})
            continue
        stats["parsed"] += 1
        stats["measures"] += len(report.fragment.measures)
        stats["fragments_16bar"] += len(report.fragment.measures) // corpus_mod.FRAGMENT_MEASURES
        stats["warnings"] += len(report.warnings)
        for elem, count in report.skipped_elements.items():
            stats["skipped_elements"][elem] = stats["skipped_elements"].get(elem, 0) + count
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"parsed {stats['parsed']}/{stats['files']} files, "
          f"{stats['fragments_16bar']} 16-bar fragments -> {args.out}")
    return 0


def cmd_descriptors(args) -> int:
    gnb = norm = None
    if args.gnb is not None:
        gnb, norm = difficulty.load_gnb(args.gnb)
    rows = []
    for name, report, error in _parse_folder(args.input, args.jobs):
        if error is not None:
            log.warning("skipping %s: %s", name, error)
            continue
        for frag in corpus_mod.segment(report.fragment):
            vec = difficulty.extract_descriptors(frag)
            label = gnb.predict(norm.apply(vec)) if gnb is not None else -1
            rows.append((vec, label))
    if not rows:
        raise SightgenError("no 16-bar fragments found")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    difficulty.write_descriptor_csv(args.out, rows)
    print(f"wrote {len(rows)} descriptor rows -> {args.out}")
    return 0


def cmd_fit_gnb(args) -> int:
    csv_path = args.csv
    if csv_path is None:
        from importlib import resources
        ref = resources.files("sightgen").joinpath(f"data/{BUNDLED_GNB_CSV}")
        with resources.as_file(ref) as p:
            rows = difficulty.read_descriptor_csv(p)
    else:
        rows = difficulty.read_descriptor_csv(csv_path)
    labeled = [(vec, label) for vec, label in rows if label >= 0]
    if not labeled:
        raise SightgenError("no labeled rows in the descriptor CSV")
    raw = np.stack([vec.as_array() for vec, _ in labeled])
    norm = difficulty.fit_normalizer(raw)
    X = np.stack([norm.apply(v) for v in raw])
    y = [label for _, label in labeled]
    gnb = difficulty.gnb_fit(X, y)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    difficulty.save_gnb(args.out, gnb, norm)
    acc = float(np.mean([gnb.predict(x) == t for x, t in zip(X, y)]))
    print(f"fitted GNB on {len(y)} rows (train accuracy {acc:.3f}) -> {args.out}")
    return 0


def cmd_dataset(args) -> int:
    gnb, norm = difficulty.load_gnb(args.gnb)
    config = corpus_mod.DatasetConfig(
        min_count=args.min_count, seed=args.seed, split_ratio=args.split_ratio,
        augment=args.augment, balance=args.balance)
    sources = []
    for name, report, error in _parse_folder(args.input, args.jobs):
        if error is not None:
            log.warning("skipping %s: %s", name, error)
            continue
        sources.append((name, replace(report.fragment, source_id=name)))
    split = corpus_mod.build_dataset(sources, config, gnb, norm)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    corpus_mod.write_manifest(out / "train.jsonl", split.train, seed=args.seed, config=config)
    corpus_mod.write_manifest(out / "val.jsonl", split.validation, seed=args.seed, config=config)
    vocab = tokenizer.build_vocab((r.tokens for r in split.train), min_count=args.min_count)
    vocab.save(out / "vocab.tsv")
    print(f"train {len(split.train)} / val {len(split.validation)} records, "
          f"vocabulary {len(vocab)} -> {out}")
    return 0


def cmd_train(args) -> int:
    header, train_records = corpus_mod.read_manifest(args.dataset / "train.jsonl")
    _, val_records = corpus_mod.read_manifest(args.dataset / "val.jsonl")
    vocab = _load_vocab(args.dataset)
    split = corpus_mod.DatasetSplit(train=train_records, validation=val_records,
                                    seed=header.get("seed", 0))
    model_cfg = model_mod.ModelConfig(
        vocab_size=len(vocab), d_model=args.d_model, layers=args.layers,
        heads=args.heads, d_ff=args.d_ff, max_len=args.max_len, dropout=args.dropout)
    train_cfg = model_mod.TrainConfig(
        prompt_type=args.prompt_type, beta=args.beta, detach_aux=args.detach,
        lr=args.lr, batch_size=args.batch_size, scheduler=args.scheduler,
        seed=args.seed, max_epochs=args.epochs, eval_every=args.eval_every,
        patience=args.patience)
    result = model_mod.train(split, vocab, model_cfg, train_cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model_mod.save_checkpoint(
        args.out, result.model, model_cfg, train_cfg, vocab.sha256(),
        class_feature_means=result.class_feature_means,
        log_summary={"best_val_ce": result.best_val_ce, "evaluations": len(result.log)})
    log_path = args.out.with_suffix(args.out.suffix + ".trainlog.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"best validation CE {result.best_val_ce:.4f} over {len(result.log)} "
          f"evaluations -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    vocab = _load_vocab(args.dataset)
    bundle = model_mod.load_checkpoint(args.checkpoint, vocab=vocab)
    gnb, norm = difficulty.load_gnb(args.gnb)
    cfg = generate.SamplerConfig(
        temperature=args.temperature, greedy=args.greedy, top_k=args.top_k,
        max_tokens=args.max_tokens, seed=args.seed, bar_limit=args.bar_limit,
        grammar_filter=args.grammar_filter)
    exercises = generate.generate_exercises(
        bundle, vocab, CLASS_BY_WORD[args.klass], args.n, cfg)
    written = generate.write_exercise_files(args.out, exercises, gnb, norm)
    degenerate = sum(1 for e in exercises if e.fragment is None)
    summary = {"requested": args.n, "written": len(written), "degenerate": degenerate,
               "class": args.klass, "files": written}
    (args.out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(written)}/{args.n} exercises ({degenerate} degenerate) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    vocab = _load_vocab(args.dataset)
    bundle = model_mod.load_checkpoint(args.checkpoint, vocab=vocab)
    gnb, norm = difficulty.load_gnb(args.gnb)
    _, val_records = corpus_mod.read_manifest(args.dataset / "val.jsonl")
    val_ce = generate.eval_val_loss(bundle.model, vocab, val_records,
                                    bundle.train_cfg.prompt_type)
    cfg = generate.SamplerConfig(
        temperature=args.temperature, greedy=False, top_k=args.top_k,
        max_tokens=args.max_tokens, seed=args.seed, bar_limit=args.bar_limit,
        grammar_filter=args.grammar_filter)
    report = generate.eval_conditioning(bundle, vocab, gnb, norm,
                                        args.n_per_class, cfg, val_ce=val_ce)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    print(f"accuracy {report.accuracy:.4f} mse {report.mse:.4f} "
          f"degeneration {report.degeneration:.3f} val_ce {val_ce:.4f} -> {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    report = model_mod.grad_check(bits=args.bits, seed=args.seed)
    payload = report.to_json()
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                            encoding="utf-8")
    tolerance = 1e-5 if args.bits == 64 else 1e-3
    ok = report.max_rel_error < tolerance
    print(f"max relative error {report.max_rel_error:.3e} "
          f"({'OK' if ok else 'FAIL'} at {tolerance:g}, {args.bits}-bit)")
    return 0 if ok else 1


# --- argument plumbing ---

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file supplying defaults for any flag")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker cap for parallel stages (1 = fully serial)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sightgen",
        description="Difficulty-conditioned piano sight-reading exercises in MusicXML")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a MusicXML folder and report statistics")
    p.add_argument("--input", type=Path, required=True, help="folder of .musicxml/.xml files")
    p.add_argument("--out", type=Path, required=True, help="report JSON path")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("descriptors", help="emit the per-fragment descriptor CSV")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    p.add_argument("--gnb", type=Path, default=None,
                   help="GNB model JSON to fill the label column (-1 without it)")
    _add_common(p)
    p.set_defaults(func=cmd_descriptors)

    p = sub.add_parser("fit-gnb", help="fit the difficulty labeler from a labeled CSV")
    p.add_argument("--csv", type=Path, default=None,
                   help="labeled descriptor CSV (bundled seed data when omitted)")
    p.add_argument("--out", type=Path, required=True, help="model JSON path")
    _add_common(p)
    p.set_defaults(func=cmd_fit_gnb)

    p = sub.add_parser("dataset", help="build train/val manifests and the vocabulary")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--gnb", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--min-count", type=int, default=50)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--balance", action=argparse.BooleanOptionalAction, default=True)
    _add_common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the conditioned language model")
    p.add_argument("--dataset", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--prompt-type", choices=prompt.PROMPT_TYPES, default="diff")
    p.add_argument("--beta", type=float, default=0.1,
                   help="auxiliary loss weight")
    p.add_argument("--detach", action=argparse.BooleanOptionalAction, default=True,
                   help="detach the auxiliary head input from the language model")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--scheduler", choices=("constant", "cosine"), default="constant")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--eval-every", type=int, default=2)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=512)
    p.add_argument("--max-len", type=int, default=1024)
    p.add_argument("--dropout", type=float, default=0.1)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="emit MusicXML exercises at a difficulty")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True,
                   help="dataset directory (for the vocabulary)")
    p.add_argument("--gnb", type=Path, required=True)
    p.add_argument("--class", dest="klass", choices=sorted(CLASS_BY_WORD), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--top-k", type=int, default=32)
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("--bar-limit", type=int, default=16)
    p.add_argument("--grammar-filter", action=argparse.BooleanOptionalAction, default=True,
                   help="constrain sampling to the token grammar (playable output)")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="run the conditioning evaluation")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--gnb", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report JSON path")
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=32)
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("--bar-limit", type=int, default=16)
    p.add_argument("--grammar-filter", action=argparse.BooleanOptionalAction, default=False,
                   help="constrained decoding during evaluation (off: degeneration is measured)")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient harness")
    p.add_argument("--bits", type=int, choices=(32, 64), default=64)
    p.add_argument("--out", type=Path, default=None, help="report JSON path")
    _add_common(p)
    p.set_defaults(func=cmd_grad_check)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    with open(args.config, "r", encoding="utf-8") as fh:
        overrides = json.load(fh)
    sub_parser = _subparser_for(parser, args.command)
    dests = {a.dest for a in sub_parser._actions}
    unknown = set(overrides) - dests
    if unknown:
        sub_parser.error(f"unknown config keys: {sorted(unknown)}")
    for key, value in overrides.items():
        if any(a.dest == key and isinstance(a.type, type) and a.type is Path
               for a in sub_parser._actions):
            overrides[key] = Path(value)
    sub_parser.set_defaults(**overrides)
    # explicit flags win: re-parse with config values as defaults
    return parser.parse_args(argv)


def _subparser_for(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    parser = build_parser()
    args = _apply_config_file(parser, list(sys.argv[1:] if argv is None else argv))
    sub_parser = _subparser_for(parser, args.command)
    dests = {a.dest for a in sub_parser._actions} - {"help"}
    try:
        out = getattr(args, "out", None)
        if out is not None:
            echo = out / "config_echo.json" if not out.suffix else \
                out.with_suffix(out.suffix + ".config.json")
            _echo_config(echo, args, dests)
        return args.func(args)
    except SightgenError as exc:
        sys.stderr.write(json.dumps(
            {"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
