"""Compare measured mean hops under forced-uniform routing with the recurrence."""

import argparse

import numpy as np

from stratmoe.analysis import rc_by_block, rc_by_direction
from stratmoe.data import gen_synthetic_task
from stratmoe.experiment import collect_records
from stratmoe.experts import parse_layout
from stratmoe.flops import expected_hops
from stratmoe.model import ModelConfig, build_model
from stratmoe.seeding import substream


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--layout", default="4-4-4-4")
    ap.add_argument("--per-direction", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    ds = gen_synthetic_task(4, 12, args.per_direction, seed=args.seed, stream="rc")
    model = build_model(ModelConfig(vocab_size=ds.vocab.size, layout=args.layout, seed=args.seed,
                                    encoder_layers=4, decoder_layers=4))
    model.router = substream(args.seed, "routing.uniform")
    records = collect_records(model, ds, "rc")
    h1 = expected_hops(parse_layout(args.layout))
    print(f"layout {args.layout}: expected hops {h1:.4f}")
    for r in rc_by_block(records):
        print(f"  block {r.key[0]:<8} layer {r.key[1]}: mean hops {r.mean_hops:.4f}  evals {r.mean_evals:.4f}  n={r.n}")
    dev = np.array([r.mean_hops for r in rc_by_direction(records)]) - h1
    print(f"  per direction/side: max |mean - h1| = {np.abs(dev).max():.4f}")


if __name__ == "__main__":
    main()
