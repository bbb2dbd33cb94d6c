"""IAA-L versus plain Adapter at a matched budget on the cross-encoder benchmark.

Writes one row per step (seed, method, step, loss, delta) and prints the
mean delta over the probe window and the mean loss over steps 100-300.
"""

import argparse
import csv
import math
import time

from peft_forge import benchmark as bm
from peft_forge.training import TrainConfig, make_examples, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--lr", type=float, default=bm.TOY_FULL_LR)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--probe-until", type=int, default=50)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--out", default="matched_budget.csv")
    args = ap.parse_args()

    data, enc_cfg = bm.load(bm.CROSS_DATA)
    ex = make_examples(data.triples, data.queries, data.corpus.documents)
    print(f"start loss reference ln {bm.CROSS_DATA.k_negatives + 1} = {math.log(bm.CROSS_DATA.k_negatives + 1):.6f}")
    with open(args.out, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["seed", "method", "step", "loss", "delta"])
        for seed in range(args.seeds):
            for name, tune in bm.MATCHED.items():
                t0 = time.perf_counter()
                model = bm.build("cross", tune, enc_cfg, seed=seed)
                cfg = TrainConfig(lr=args.lr, epochs=10_000, max_steps=args.steps, batch_size=args.batch_size,
                                  seed=seed, probe_every=1, probe_until=args.probe_until)
                rep = train(model, ex, cfg)
                for s in rep.steps:
                    out.writerow([seed, name, s.step, repr(s.loss), "" if s.delta is None else repr(s.delta)])
                loss = rep.losses()
                tail = f"{loss[99:].mean():.6f}" if len(loss) > 99 else "n/a"
                print(f"seed {seed} {name:<8} trainable {model.tuned_count()} loss[1] {loss[0]:.6f} "
                      f"mean delta {rep.deltas().mean():.6f} mean loss 100-{args.steps} {tail} "
                      f"({time.perf_counter() - t0:.0f}s)", flush=True)
    print(f"per-step rows in {args.out}")


if __name__ == "__main__":
    main()
