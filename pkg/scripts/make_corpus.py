"""Write a seeded corpus of synthetic speech-like mono WAV files.

Stands in for a real 16 kHz speech corpus when none is available.
"""

import argparse

from spatialcodec.corpus import make_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out_dir")
    p.add_argument("-n", type=int, default=40, help="number of utterances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-duration", type=float, default=2.0)
    p.add_argument("--max-duration", type=float, default=4.0)
    args = p.parse_args()
    paths = make_corpus(args.out_dir, args.n, seed=args.seed, duration=(args.min_duration, args.max_duration))
    print(f"wrote {len(paths)} utterances to {args.out_dir}")


if __name__ == "__main__":
    main()
