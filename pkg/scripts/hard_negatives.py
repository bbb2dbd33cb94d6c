"""Warm-up on random negatives, mine hard negatives, train two more epochs."""

import argparse

from peft_forge import benchmark as bm
from peft_forge.pet import PetConfig
from peft_forge.training import TrainConfig, make_examples, mine_hard_negatives, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--warmup-epochs", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--top-n", type=int, default=bm.BI_DATA.k_negatives)
    args = ap.parse_args()

    data, enc_cfg = bm.load(bm.BI_DATA)
    docs = data.corpus.documents
    ex = make_examples(data.triples, data.queries, docs)
    positives = {q: p for q, p, _ in data.triples}
    for seed in range(args.seeds):
        model = bm.build("bi", PetConfig("full"), enc_cfg, seed=seed)
        train(model, ex, TrainConfig(lr=bm.TOY_FULL_LR, epochs=args.warmup_epochs, seed=seed, restore_best=False))
        warm = bm.dev_mrr(model, data)
        mined = mine_hard_negatives(model, docs, data.queries, data.qrels, args.top_n, positives=positives, seed=seed)
        train(model, make_examples(mined, data.queries, docs),
              TrainConfig(lr=bm.TOY_FULL_LR, epochs=args.epochs, seed=seed, restore_best=False))
        after = bm.dev_mrr(model, data)
        print(f"seed {seed}: warm-up {warm:.4f} -> after mined negatives {after:.4f}", flush=True)


if __name__ == "__main__":
    main()
