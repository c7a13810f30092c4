#!/usr/bin/env python3
"""Materialize the fixed-seed synthetic corpus as wav files + speaker map."""

import argparse

from vcaug.data import write_corpus_tree


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="corpus")
    parser.add_argument("--speakers", type=int, default=6)
    parser.add_argument("--utterances", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--duration", type=float, default=1.0)
    args = parser.parse_args()
    map_path = write_corpus_tree(
        args.out,
        n_speakers=args.speakers,
        utts_per_speaker=args.utterances,
        seed=args.seed,
        duration_s=args.duration,
    )
    print(f"wrote {args.speakers} speakers x {args.utterances} utterances under {args.out}")
    print(f"speaker map: {map_path}")


if __name__ == "__main__":
    main()
