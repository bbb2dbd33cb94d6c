"""Print the BERT-base budget table and the toy-dims counts of the benchmark suite."""

from peft_forge import benchmark as bm
from peft_forge import cli
from peft_forge.pet import count_params


def main() -> None:
    cli.main(["count-params", "--paper-table"])
    enc = bm.toy_encoder(754)
    print(f"\n# toy dims (d={enc.d_model}, L={enc.n_layers}); backbone {enc.backbone_param_count()} parameters")
    for name, tune in bm.PET_SUITE.items():
        pc = count_params(tune, enc)
        print(f"{name:<10} {tune.label():<34} {pc.total:>6} ({100 * pc.fraction:.3f}%)")


if __name__ == "__main__":
    main()
