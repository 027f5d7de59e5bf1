"""Padding waste of token-sorted, word-sorted and unsorted batching."""

import argparse

import numpy as np

from qgraph.pipeline import make_batches, padding_totals, sort_sentences, synthetic_corpus

KEYS = ("tokens", "words", "none")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpora", type=int, default=100)
    ap.add_argument("--n", type=int, default=512)
    ap.add_argument("--batch", type=int, nargs="+", default=[1, 4, 8, 16, 32])
    args = ap.parse_args()

    print(f"{'batch':>5} " + " ".join(f"{k + ' waste%':>14}" for k in KEYS) + f" {'tok/word padded':>16}")
    for b in args.batch:
        waste = {k: [] for k in KEYS}
        ratio = []
        for seed in range(args.corpora):
            corpus = synthetic_corpus(args.n, seed=seed)
            padded = {}
            for k in KEYS:
                real, padded[k] = padding_totals(make_batches(sort_sentences(corpus, k), b))
                waste[k].append(100 * (padded[k] - real) / padded[k])
            ratio.append(padded["tokens"] / padded["words"])
        cols = " ".join(f"{np.mean(waste[k]):>14.2f}" for k in KEYS)
        print(f"{b:>5} {cols} {np.mean(ratio):>16.3f}")


if __name__ == "__main__":
    main()
