"""Dev MRR@10 of full fine-tuning and every PET config on the bi-encoder benchmark."""

import argparse
import time

from peft_forge import benchmark as bm
from peft_forge.pet import PetConfig
from peft_forge.training import PET_LR, TrainConfig, make_examples, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--methods", default="full," + ",".join(bm.PET_SUITE))
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--full-lr", type=float, default=bm.TOY_FULL_LR)
    ap.add_argument("--pet-lr", type=float, default=PET_LR)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data, enc_cfg = bm.load(bm.BI_DATA)
    ex = make_examples(data.triples, data.queries, data.corpus.documents)
    evaluate = lambda m: {"mrr@10": bm.dev_mrr(m, data)}
    print(f"untrained: {bm.dev_mrr(bm.build('bi', None, enc_cfg, args.seed), data):.4f}")
    for name in args.methods.split(","):
        tune = PetConfig("full") if name == "full" else bm.PET_SUITE[name]
        lr = args.full_lr if name == "full" else args.pet_lr
        model = bm.build("bi", tune, enc_cfg, args.seed)
        t0 = time.perf_counter()
        rep = train(model, ex, TrainConfig(lr=lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed),
                    evaluate=evaluate)
        per_epoch = " ".join(f"{e['mrr@10']:.4f}" for e in rep.epochs)
        print(f"{name:<10} trainable {model.tuned_count():>7} lr {lr:g} epochs [{per_epoch}] "
              f"({time.perf_counter() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
