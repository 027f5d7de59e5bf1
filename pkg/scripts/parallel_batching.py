"""Serial vs multi-worker execution of one batched workload.

Timings are informational; the output hashes must agree.
"""

import argparse
import json

from qgraph.model import ToyConfig, build_toy_transformer
from qgraph.pipeline import make_batches, run_parallel, run_serial, sort_sentences, synthetic_corpus, throughput_report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--sort", default="tokens")
    args = ap.parse_args()

    g = build_toy_transformer(ToyConfig())
    batches = make_batches(sort_sentences(synthetic_corpus(args.n, seed=0), args.sort), args.batch)
    runs = [("serial", run_serial(g, batches))]
    runs += [(f"workers={w}", run_parallel(g, batches, w)) for w in args.workers]
    rows = throughput_report(runs)
    for r in rows:
        print(json.dumps({k: r[k] for k in ("config", "workers", "seconds", "sentences_per_sec", "output_hash")}))
    hashes = {r["output_hash"] for r in rows}
    print("hashes agree" if len(hashes) == 1 else f"HASH MISMATCH: {hashes}")


if __name__ == "__main__":
    main()
