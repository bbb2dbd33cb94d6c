"""Command-line experiment runner.

Configuration is a flat ``key = value`` file with one section per component
([encoder], [model], [tuning], [train], [data], [eval], [output]); command
line flags override file keys, and ``PEFT_FORGE_SEED`` overrides the file's
training seed (an explicit ``--seed`` still wins).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import benchmark
from .data import ParseError, SyntheticSpec, generate_synthetic, load_dataset, save_dataset, write_run, write_triples
from .gradcheck import CONFIGS as GRAD_CONFIGS, check_config
from .iaa import BudgetError, IaaConfig, budget_split, wire_iaa
from .numerics import DimensionError
from .pet import METHODS, PetConfig, StateError, count_params, install_pet
from .ranking import BiEncoder, CrossEncoder, evaluate
from .training import (
    TrainConfig,
    TrainingAborted,
    lexical_candidates,
    make_examples,
    mine_hard_negatives,
    rerank,
    retrieve,
    train,
)
from .transformer import ConfigError, Encoder, EncoderConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("peft_forge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
NOMINAL_BERT_BASE = 110e6
SEED_ENV = "PEFT_FORGE_SEED"

_spec = benchmark.BI_DATA
DEFAULTS = {
    "encoder": {"d_model": "64", "n_heads": "2", "n_layers": "2", "d_ffn": "", "max_seq_len": "64",
                "init_std": str(benchmark.TOY_INIT_STD), "ln_eps": "1e-12"},
    "model": {"architecture": "bi", "query_max_len": "32", "doc_max_len": "128"},
    "tuning": {"method": "full", "r": "2", "l": "4", "ls": "", "s": "1.0", "ar": "2", "inside": "adapter",
               "budget_params": "1024"},
    "train": {"lr": "", "epochs": "3", "batch_size": "8", "seed": "0", "probe_every": "0", "warmup_frac": "0.1",
              "max_steps": "", "metric": "mrr@10"},
    "data": {"dir": "", **{f.name: str(getattr(_spec, f.name)) for f in fields(SyntheticSpec)
                           if f.name != "shared_vocab"}},
    "eval": {"metrics": "mrr@10,ndcg@10,recall@100", "depth": "100"},
    "output": {"runs_dir": "runs"},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


def _opt(v: str, cast):
    return None if v.strip() == "" else cast(v)


@dataclass
class ExperimentConfig:
    values: dict  # section -> {key: str}

    @classmethod
    def load(cls, path: str | None, overrides: list[str] = ()) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_dict(DEFAULTS)
        if path:
            if not Path(path).exists():
                raise DataError(f"config file {path} not found")
            parser.read(path, encoding="utf-8")
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            parser["train"]["seed"] = env_seed
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise UsageError(f"override {item!r} is not section.key=value")
            if section not in parser:
                raise UsageError(f"unknown config section {section!r}")
            parser[section][name] = value.strip()
        values = {s: dict(parser[s]) for s in parser.sections()}
        for s, keys in values.items():
            known = DEFAULTS.get(s)
            if known is None:
                raise UsageError(f"unknown config section [{s}]")
            extra = set(keys) - set(known)
            if extra:
                raise UsageError(f"unknown key(s) in [{s}]: {', '.join(sorted(extra))}")
        return cls(values)

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def to_text(self, with_seed: bool = True) -> str:
        lines = []
        for s in sorted(self.values):
            if not with_seed and s == "output":
                continue
            lines.append(f"[{s}]")
            for k in sorted(self.values[s]):
                if with_seed or (s, k) != ("train", "seed"):
                    lines.append(f"{k} = {self.values[s][k]}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """Hash of everything that affects results (seed and output location excluded)."""
        return hashlib.sha256(self.to_text(with_seed=False).encode()).hexdigest()[:12]

    # typed views --------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.get("train", "seed"))

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.values["data"]
        kw = {}
        for f in fields(SyntheticSpec):
            if f.name in d:
                kw[f.name] = float(d[f.name]) if f.name in ("topic_purity", "graded_fraction") else int(d[f.name])
        return SyntheticSpec(**kw)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        e = self.values["encoder"]
        return EncoderConfig(d_model=int(e["d_model"]), n_heads=int(e["n_heads"]), n_layers=int(e["n_layers"]),
                             d_ffn=_opt(e["d_ffn"], int), vocab_size=vocab_size, max_seq_len=int(e["max_seq_len"]),
                             init_std=float(e["init_std"]), ln_eps=float(e["ln_eps"]))

    def tuning(self):
        return tuning_from(self.values["tuning"])

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(lr=_opt(t["lr"], float), epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                           seed=self.seed, probe_every=int(t["probe_every"]), metric=t["metric"],
                           warmup_frac=float(t["warmup_frac"]), max_steps=_opt(t["max_steps"], int))

    def metrics(self) -> list[str]:
        names = [m.strip() for m in self.get("eval", "metrics").split(",") if m.strip()]
        for n in names:
            metric, _, k = n.partition("@")
            if metric not in ("mrr", "ndcg", "recall") or not k.isdigit() or int(k) < 1:
                raise UsageError(f"bad metric {n!r}; use mrr@k, ndcg@k or recall@k with k >= 1")
        return names


def tuning_from(t: dict):
    method = t["method"].lower()
    if method.startswith("iaa"):
        return IaaConfig(method, t.get("inside", "adapter"), r=int(t["r"]), ar=int(t["ar"]), s=float(t["s"]))
    if method not in METHODS:
        raise UsageError(f"unknown tuning method {method!r}; choose from {', '.join(METHODS)}, iaa-s, iaa-l, iaa-m")
    return PetConfig(method, r=int(t["r"]), l=int(t["l"]), s=float(t["s"]), ls=_opt(t.get("ls", ""), int))


def tuning_fields(cfg) -> dict:
    if isinstance(cfg, IaaConfig):
        return {"method": f"iaa-{cfg.variant.lower()}", "inside": cfg.inside, "r": str(cfg.r), "ar": str(cfg.ar),
                "s": repr(cfg.s)}
    return {"method": cfg.method, "r": str(cfg.r), "l": str(cfg.l), "s": repr(cfg.s),
            "ls": "" if cfg.ls is None else str(cfg.ls)}


# -- shared plumbing ---------------------------------------------------------------

def load_data(cfg: ExperimentConfig):
    d = cfg.get("data", "dir")
    if d:
        try:
            return load_dataset(d)
        except FileNotFoundError as exc:
            raise DataError(f"dataset file missing: {exc.filename}") from None
    return generate_synthetic(cfg.synthetic_spec())


def build_model(architecture: str, enc_cfg: EncoderConfig, seed: int, query_max_len: int, doc_max_len: int):
    enc = Encoder(enc_cfg, seed=seed)
    if architecture == "bi":
        return BiEncoder(enc, query_max_len=query_max_len, doc_max_len=doc_max_len)
    if architecture == "cross":
        return CrossEncoder(enc, max_len=enc_cfg.max_seq_len, query_max_len=query_max_len)
    raise UsageError(f"architecture must be bi or cross, got {architecture!r}")


def install(model, tuning, seed: int) -> None:
    (wire_iaa if isinstance(tuning, IaaConfig) else install_pet)(model, tuning, seed=seed)


def model_from_config(cfg: ExperimentConfig, vocab_size: int):
    m = cfg.values["model"]
    model = build_model(m["architecture"], cfg.encoder_config(vocab_size), cfg.seed,
                        int(m["query_max_len"]), int(m["doc_max_len"]))
    install(model, cfg.tuning(), cfg.seed)
    return model


def score_dev(model, queries: dict, documents: dict, depth: int, candidates: dict | None = None) -> dict:
    if model.architecture == "bi":
        return retrieve(model, queries, documents, depth=depth)
    if candidates is None:
        candidates = lexical_candidates(queries, documents, depth)
    return rerank(model, queries, documents, candidates)


def save_model(path, model, meta: dict) -> None:
    params = {**model.named_parameters()}
    meta = {"architecture": model.architecture, **meta}
    if model.architecture == "bi":
        meta.update(query_max_len=str(model.query_max_len), doc_max_len=str(model.doc_max_len))
    else:
        meta.update(query_max_len=str(model.query_max_len))
    save_checkpoint(path, model.encoder.config, params, meta)


def load_model(path):
    try:
        enc_cfg, arrays, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except (ValueError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    qlen = int(meta.get("query_max_len", 32))
    model = build_model(meta.get("architecture", "bi"), enc_cfg, 0, qlen, int(meta.get("doc_max_len", 128)))
    install(model, tuning_from({"r": "1", "l": "1", "ar": "1", "s": "1.0", **meta}), 0)
    named = model.named_parameters()
    missing = sorted(set(named) - set(arrays))
    if missing:
        raise DataError(f"checkpoint {path} lacks parameters: {missing[:5]}")
    for name, p in named.items():
        if arrays[name].shape != p.shape:
            raise DataError(f"checkpoint {path}: {name} has shape {arrays[name].shape}, model expects {p.shape}")
        p.data[...] = arrays[name]
    return model, meta


def _check_vocab(model, data) -> None:
    need = max((max(t, default=0) for t in data.corpus.documents.values()), default=0)
    if need >= model.encoder.config.vocab_size or data.corpus.vocab_size != model.encoder.config.vocab_size:
        raise DataError(f"checkpoint vocab_size={model.encoder.config.vocab_size} does not match the dataset "
                        f"(vocab of {data.corpus.vocab_size} tokens)")


def _print_metrics(metrics: dict) -> None:
    for k, v in metrics.items():
        print(f"{k} {v:.4f}")


def _pct(frac: float) -> str:
    pct = 100.0 * frac
    return f"{pct:.{3 if pct < 1 else 2}f}%"


# -- count-params -----------------------------------------------------------------

# (group, configuration, published label in percent, known value when the label is a documented mismatch)
REFERENCE_ROWS = [
    ("pet", PetConfig("bitfit"), 0.09, None),
    ("pet", PetConfig("prefix", l=32), 0.5, None),
    ("pet", PetConfig("adapter", r=16), 0.5, None),
    ("pet", PetConfig("mam", r=16, l=16), 0.5, None),
    ("pet", PetConfig("lora", r=16), 0.5, None),
    ("pet", PetConfig("prefix", l=200), 3.6, 3.4),
    ("pet", PetConfig("adapter", r=200), 6.7, None),
    ("pet", PetConfig("mam", r=200, l=200), 6.7, None),
    ("pet", PetConfig("lora", r=200), 6.7, None),
    ("iaa", IaaConfig("S", r=8, ar=8), 0.5, None),
    ("iaa", IaaConfig("L", r=12, ar=12), 0.5, 0.60),
    ("iaa", IaaConfig("M", r=15, ar=24), 0.5, None),
    ("iaa", IaaConfig("S", r=100, ar=100), 6.7, None),
    ("iaa", IaaConfig("L", r=50, ar=300), 6.7, None),
    ("iaa", IaaConfig("M", r=185, ar=960), 6.7, None),
]
LABEL_TOLERANCE_PP = 0.15


@dataclass
class ReferenceRow:
    group: str
    label: str
    count: int
    percent: float
    printed: float
    status: str  # ok | flagged | MISMATCH


def reference_table(total: float = NOMINAL_BERT_BASE) -> list[ReferenceRow]:
    enc = EncoderConfig.bert_base()
    rows = []
    for group, tune, printed, documented in REFERENCE_ROWS:
        pc = count_params(tune, enc, total=total)
        pct = 100.0 * pc.fraction
        if documented is not None and abs(pct - documented) <= 0.05:
            status = "flagged"
        elif abs(pct - printed) <= LABEL_TOLERANCE_PP:
            status = "ok"
        else:
            status = "MISMATCH"
        rows.append(ReferenceRow(group, tune.label(), pc.total, pct, printed, status))
    return rows


def cmd_count_params(cfg: ExperimentConfig, args) -> int:
    if args.paper_table:
        total = args.total or NOMINAL_BERT_BASE
        print(f"# BERT-base dims (d=768, L=12); percentages of {total:.0f} backbone parameters")
        print(f"{'group':<6} {'configuration':<34} {'count':>9} {'computed':>9} {'label':>6}  status")
        for r in reference_table(total):
            print(f"{r.group:<6} {r.label:<34} {r.count:>9} {r.percent:>8.3f}% {r.printed:>5}%  {r.status}")
        return EXIT_OK
    tune = cfg.tuning()
    if args.dims == "bert-base":
        enc = EncoderConfig.bert_base()
        total = args.total or NOMINAL_BERT_BASE
    else:
        enc = cfg.encoder_config(int(cfg.get("data", "vocab_size")))
        total = args.total or enc.backbone_param_count()
    pc = count_params(tune, enc, total=total)
    print(f"{tune.label()}: per_layer={pc.per_layer} total={pc.total} ({_pct(pc.fraction)})")
    return EXIT_OK


# -- data commands --------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    data = generate_synthetic(cfg.synthetic_spec())
    save_dataset(args.out, data)
    print(f"wrote {len(data.corpus.documents)} documents, {len(data.queries)} train / {len(data.dev_queries)} dev "
          f"queries, {len(data.triples)} triples to {args.out}")
    return EXIT_OK


def cmd_mine_negatives(cfg: ExperimentConfig, args) -> int:
    model, _ = load_model(args.checkpoint)
    if model.architecture != "bi":
        raise UsageError("mining needs a bi-encoder checkpoint")
    data = load_data(cfg)
    _check_vocab(model, data)
    positives = {q: p for q, p, _ in data.triples}
    triples = mine_hard_negatives(model, data.corpus.documents, data.queries, data.qrels, args.top_n,
                                  positives=positives, seed=cfg.seed)
    write_triples(args.out, triples)
    print(f"wrote {len(triples)} mined triples to {args.out}")
    return EXIT_OK


# -- train / eval -----------------------------------------------------------------------

def run_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.get("output", "runs_dir")) / f"{cfg.digest()}-seed{cfg.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def train_once(cfg: ExperimentConfig, out: Path, data=None, on_step=None) -> tuple:
    """Train one configuration and write its artifacts under ``out``."""
    data = data or load_data(cfg)
    model = model_from_config(cfg, data.corpus.vocab_size)
    examples = make_examples(data.triples, data.queries, data.corpus.documents)
    depth = int(cfg.get("eval", "depth"))
    names = cfg.metrics()
    tcfg = cfg.train_config()
    if tcfg.metric not in names:
        names.append(tcfg.metric)
    dev_qrels = {q: data.qrels.get(q, {}) for q in data.dev_queries}
    candidates = None if model.architecture == "bi" else lexical_candidates(data.dev_queries, data.corpus.documents,
                                                                            depth)

    def ev(m):
        if not data.dev_queries:
            return {n: 0.0 for n in names}
        return evaluate(score_dev(m, data.dev_queries, data.corpus.documents, depth, candidates), dev_qrels, names)

    report = train(model, examples, tcfg, evaluate=ev, on_step=on_step)
    (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    report.write(out / "report.txt")
    save_model(out / "checkpoint.txt", model, tuning_fields(cfg.tuning()))
    metrics = {}
    if data.dev_queries:
        run = score_dev(model, data.dev_queries, data.corpus.documents, depth, candidates)
        write_run(out / "run.dev.txt", run, tag=cfg.get("tuning", "method"))
        metrics = evaluate(run, dev_qrels, names)
    with open(out / "metrics.txt", "w", encoding="utf-8") as fh:
        for i, m in enumerate(report.epochs, start=1):
            fh.write(f"epoch {i} " + " ".join(f"{k}={v!r}" for k, v in m.items()) + "\n")
        fh.write("final " + " ".join(f"{k}={v!r}" for k, v in metrics.items()) + "\n")
    return model, report, metrics


def cmd_train(cfg: ExperimentConfig, args) -> int:
    if args.probe_delta is not None:
        cfg.values["train"]["probe_every"] = str(args.probe_delta)
    out = run_dir(cfg)
    _, report, metrics = train_once(cfg, out)
    print(f"run directory: {out}")
    print(f"steps {len(report.steps)}; best epoch {report.best_epoch}")
    if metrics:
        _print_metrics(metrics)
    else:
        print("no queries")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    model, _ = load_model(args.checkpoint)
    data = load_data(cfg)
    queries = data.dev_queries if args.split == "dev" else data.queries
    if not queries:
        print("no queries")
        return EXIT_OK
    _check_vocab(model, data)
    depth = args.depth or int(cfg.get("eval", "depth"))
    run = score_dev(model, queries, data.corpus.documents, depth)
    out = Path(args.run_out or Path(args.checkpoint).with_name(f"run.{args.split}.txt"))
    write_run(out, run, tag=args.tag)
    qrels = {q: data.qrels.get(q, {}) for q in queries}
    _print_metrics(evaluate(run, qrels, cfg.metrics()))
    print(f"run file: {out}")
    return EXIT_OK


# -- sweep -----------------------------------------------------------------------------

def sweep_configs(cfg: ExperimentConfig, axis: str, values: list[float], vocab_size: int) -> list[tuple]:
    """Expand a sweep into (value, ExperimentConfig) pairs."""
    out = []
    for v in values:
        vals = {s: dict(kv) for s, kv in cfg.values.items()}
        if axis == "lr":
            vals["train"]["lr"] = repr(v)
        elif axis == "budget_split":
            tune = cfg.tuning()
            if not isinstance(tune, IaaConfig):
                raise UsageError("a budget_split sweep needs an iaa-* tuning method")
            enc = cfg.encoder_config(vocab_size)
            total = enc.backbone_param_count()
            budget = int(cfg.get("tuning", "budget_params"))
            r, ar = budget_split(tune.variant, tune.inside, budget / total, v, enc, total=total, tolerance=0.0)
            vals["tuning"]["r"], vals["tuning"]["ar"] = str(r), str(ar)
        else:
            raise UsageError(f"unknown sweep axis {axis!r}; use lr or budget_split")
        out.append((v, ExperimentConfig(vals)))
    return out


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    try:
        values = [float(x) for x in args.values.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    if not values:
        raise UsageError("--values is empty")
    data = load_data(cfg)
    runs = sweep_configs(cfg, args.axis, values, data.corpus.vocab_size)
    root = Path(cfg.get("output", "runs_dir")) / f"sweep-{args.axis}-{cfg.digest()}-seed{cfg.seed}"
    root.mkdir(parents=True, exist_ok=True)
    metric = cfg.train_config().metric
    rows = []
    for v, sub in runs:
        out = root / f"value-{v:g}"
        out.mkdir(exist_ok=True)
        tune = sub.values["tuning"]
        try:
            _, report, metrics = train_once(sub, out, data=data)
            final = report.losses()[-1] if report.steps else float("nan")
            rows.append((v, tune["r"], tune["ar"], f"{final:.6f}", f"{metrics.get(metric, float('nan')):.4f}", "ok"))
        except (TrainingAborted, ConfigError, BudgetError, StateError, FloatingPointError) as exc:
            log.error("sweep value %g failed: %s", v, exc)
            rows.append((v, tune["r"], tune["ar"], "nan", "nan", f"FAILED ({type(exc).__name__})"))
    header = f"{args.axis:>12} {'r':>4} {'ar':>4} {'final_loss':>11} {metric:>9}  status"
    lines = [header] + [f"{v:>12g} {r:>4} {ar:>4} {loss:>11} {m:>9}  {s}" for v, r, ar, loss, m, s in rows]
    (root / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    print(f"per-run reports under {root}")
    return EXIT_OK if all(r[-1] == "ok" for r in rows) else EXIT_NUMERIC


# -- grad-check --------------------------------------------------------------------------

def cmd_grad_check(cfg: ExperimentConfig, args) -> int:
    if args.d > 16 or args.d % 2:
        raise UsageError("grad-check needs an even d <= 16 (two heads)")
    names = list(GRAD_CONFIGS) if args.configs == "all" else [c.strip() for c in args.configs.split(",")]
    unknown = [n for n in names if n not in GRAD_CONFIGS]
    if unknown:
        raise UsageError(f"unknown grad-check config(s): {', '.join(unknown)}; choose from {', '.join(GRAD_CONFIGS)}")
    failed = 0
    for name in names:
        for seed in range(args.seeds):
            res = check_config(name, seed, d=args.d, layers=args.layers, tol=args.tol, corrupt=args.corrupt)
            failed += not res.passed
            if args.verbose or not res.passed:
                print(res.line())
        print(f"{name:<10} {'done':>4}")
    total = len(names) * args.seeds
    print(f"grad-check: {total - failed}/{total} passed at tol {args.tol:g}")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# -- entry point ---------------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--config", help="key = value config file")
    c.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    c.add_argument("--method", help="tuning method (full, bitfit, prefix, adapter, mam, lora, ss_prefix, ss_lora, "
                                    "iaa-s, iaa-l, iaa-m)")
    c.add_argument("--r", type=int)
    c.add_argument("--l", type=int)
    c.add_argument("--ar", type=int)
    c.add_argument("--arch", choices=["bi", "cross"])
    c.add_argument("--lr", type=float)
    c.add_argument("--epochs", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--data-dir")
    c.add_argument("--runs-dir")
    c.add_argument("-v", "--verbose", action="store_true")
    return c


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = argparse.ArgumentParser(prog="peft-forge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("count-params", parents=[common], help="trainable parameter count of a tuning config")
    c.add_argument("--paper-table", action="store_true", help="all published budget rows at BERT-base dims")
    c.add_argument("--dims", choices=["bert-base", "config"], default="bert-base")
    c.add_argument("--total", type=float, help="denominator for the percentage")

    c = sub.add_parser("train", parents=[common], help="train one configuration")
    c.add_argument("--probe-delta", type=int, metavar="N", help="probe the gradient discrepancy every N steps")

    c = sub.add_parser("eval", parents=[common], help="score queries with a checkpoint and write a run file")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--split", choices=["dev", "train"], default="dev")
    c.add_argument("--depth", type=int)
    c.add_argument("--run-out")
    c.add_argument("--tag", default="peft_forge")

    c = sub.add_parser("sweep", parents=[common], help="one training run per value of an axis")
    c.add_argument("--axis", required=True, choices=["lr", "budget_split"])
    c.add_argument("--values", required=True, help="comma-separated values")

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference checks of every tuning config")
    c.add_argument("--d", type=int, default=8)
    c.add_argument("--layers", type=int, default=1)
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--configs", default="all")
    c.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)

    c = sub.add_parser("mine-negatives", parents=[common], help="hard negatives from a warm-up bi-encoder checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--top-n", type=int, default=7)
    c.add_argument("--out", required=True)

    c = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    c.add_argument("--out", required=True)
    return p


def _flag_overrides(args) -> list[str]:
    out = list(args.set)
    pairs = [("tuning.method", args.method), ("tuning.r", args.r), ("tuning.l", args.l), ("tuning.ar", args.ar),
             ("model.architecture", args.arch), ("train.lr", args.lr), ("train.epochs", args.epochs),
             ("train.seed", args.seed), ("data.dir", args.data_dir), ("output.runs_dir", args.runs_dir)]
    out += [f"{k}={v}" for k, v in pairs if v is not None]
    return out


COMMANDS = {
    "count-params": cmd_count_params,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
    "mine-negatives": cmd_mine_negatives,
    "gen-data": cmd_gen_data,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, _flag_overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, BudgetError, StateError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
