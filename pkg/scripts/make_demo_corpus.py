#!/usr/bin/env python3
"""Write a synthetic MusicXML corpus (three difficulty styles) for demos
and experiments, plus a labeled descriptor CSV usable with `fit-gnb`."""

import argparse
from pathlib import Path

from sightgen import musicxml, synthetic
from sightgen.difficulty import extract_descriptors, write_descriptor_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, required=True, help="output folder")
    ap.add_argument("--pieces", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", type=Path, default=None,
                    help="also write a labeled descriptor CSV here")
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, label, frag in synthetic.make_corpus(args.pieces, seed=args.seed):
        (args.out / name).write_bytes(musicxml.serialize(frag))
        rows.append((extract_descriptors(frag), label))
    print(f"wrote {args.pieces} pieces -> {args.out}")
    if args.csv is not None:
        write_descriptor_csv(args.csv, rows)
        print(f"wrote {len(rows)} labeled descriptor rows -> {args.csv}")


if __name__ == "__main__":
    main()
