"""Train the toy model with and without the balance loss and compare gate loads.

Writes runs under --out: data/, alpha0.01/ and alpha0.0/, each with metrics,
checkpoint, rc_records.csv and the three RC reports.
"""

import argparse
from pathlib import Path

from stratmoe import experiment as exp
from stratmoe.analysis import write_records, write_reports
from stratmoe.config import apply_overrides, parse_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="toy_runs")
    ap.add_argument("--config", default=str(Path(__file__).with_name("toy.cfg")))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    exp.gen_data(out / "data", seed=0)
    dev = exp.load_split(out / "data", "dev")
    base = parse_config(Path(args.config).read_text())
    for alpha in (0.01, 0.0):
        run = out / f"alpha{alpha}"
        cfg = apply_overrides(base, [f"alpha={alpha}", f"seed={args.seed}", f"data={out / 'data'}", f"out={run}"])
        res = exp.train(cfg)
        ev = exp.evaluate(res.model, dev)
        write_records(run / "rc_records.csv", ev.records)
        write_reports(ev.records, dev.token_frequencies(), run)
        print(f"alpha={alpha}: final task loss {res.metrics[-1]['task_loss']:.4f}, dev accuracy {ev.overall:.4f}")
        for g in exp.gate_loads(res.model, dev):
            flag = "over" if g.max_f > g.threshold else "ok"
            print(f"  {g.side:<8} layer {g.layer} gate {g.gate}: max_f {g.max_f:.3f} (2/E_i = {g.threshold:.2f}) {flag}")


if __name__ == "__main__":
    main()
