"""Command-line surface: generate, pretrain, finetune, eval, probe, sweep-dim.

Configuration is one flat JSON document; every key has a default, unknown
keys are hard errors, and --set KEY=VALUE flags override file values. Run
artifacts land in a directory named by the config hash under --run-root
(default $ADAPTERLAB_RUNS or ./runs), guarded by a lockfile so concurrent
runs cannot share a directory. Each command writes machine-readable JSON
next to human-readable markdown and exits nonzero on any error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .adapter import AdapterBank, AdapterConfig
from .corpus import (
    DEFAULT_LANGS,
    LANGS_BY_NAME,
    CorpusError,
    SplitCorpus,
    Vocabulary,
    default_language_set,
    generate_synthetic,
    ingest_jsonl,
    split,
    write_jsonl,
)
from .metrics import LanguageTable
from .model import ModelConfig, TransformerModel
from .probing import PROBE_TASKS, build_probe_dataset, layer_sweep, sweep_to_csv
from .training import (
    Regime,
    TrainingError,
    TrainSettings,
    config_hash,
    evaluate,
    finetune,
    pretrain_mlm,
)


class CliError(ValueError):
    pass


CONFIG_DEFAULTS: dict = {
    # data
    "corpus": None,
    "languages": 4,
    "n_per_language": 500,
    "imbalance": 1,
    "split_fractions": [0.8, 0.1, 0.1],
    "split_seed": 0,
    # model
    "d_model": 128,
    "n_layers_encoder": 4,
    "n_layers_decoder": 4,
    "n_heads": 4,
    "d_ff": 512,
    "max_seq_len": 256,
    "dropout": 0.0,
    "activation": "gelu",
    "tie_embeddings": True,
    # adapter
    "adapter_dim": 16,
    "adapter_activation": "relu",
    "adapter_variant": "standard",
    "adapter_insertion": "after_attention,after_ffn",
    "adapter_placement": "before_norm",
    "moe_experts": 4,
    "moe_expert_dim": 32,
    "moe_top_k": 2,
    "moe_gating": "per_token",
    # regime
    "tuning": "adapter",
    "scope": "multilingual",
    "train_languages": "",
    "eval_languages": "",
    "batching": "multilingual_minibatch",
    "language_tags": False,
    "samples_per_language": None,
    "seed": 0,
    # training loop
    "batch_size": 16,
    "max_epochs": 8,
    "patience": 3,
    "lr_full": 3e-4,
    "lr_adapter": 1e-3,
    "temperature": 0.05,
    "max_summary_len": 24,
    "pretrain_steps": 300,
    "pretrain_lr": 1e-3,
    "mask_rate": 0.15,
    # task and artifacts
    "task": "summarization",
    "base_checkpoint": None,
    "vocab": None,
    "run_root": None,
    "probe_samples": 300,
    "probe_tasks": "LEN,CPX,TYP",
    "dims": "24,64,128",
}


def load_run_config(path=None, overrides: dict | None = None) -> dict:
    """Merge defaults, an optional config file, and CLI overrides; any key
    outside the schema is an error, and every bad key is reported at once."""
    config = dict(CONFIG_DEFAULTS)
    bad: list[str] = []
    for source in (json.loads(Path(path).read_text()) if path else {}, overrides or {}):
        for key, value in source.items():
            if key not in CONFIG_DEFAULTS:
                bad.append(key)
            else:
                config[key] = value
    if bad:
        raise CliError(f"unknown config keys: {sorted(set(bad))}")
    return config


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--set expects KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _languages_from(config) -> list:
    spec = config["languages"]
    if isinstance(spec, int) or (isinstance(spec, str) and spec.isdigit()):
        return list(default_language_set(int(spec)))
    names = [s for s in str(spec).split(",") if s]
    unknown = [n for n in names if n not in LANGS_BY_NAME]
    if unknown:
        raise CliError(f"unknown languages {unknown}; known: {sorted(LANGS_BY_NAME)}")
    return [LANGS_BY_NAME[n] for n in names]


def model_config_from(config: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=int(config["d_model"]),
        n_layers_encoder=int(config["n_layers_encoder"]),
        n_layers_decoder=int(config["n_layers_decoder"]),
        n_heads=int(config["n_heads"]),
        d_ff=int(config["d_ff"]),
        max_seq_len=int(config["max_seq_len"]),
        dropout=float(config["dropout"]),
        activation=config["activation"],
        tie_embeddings=bool(config["tie_embeddings"]),
    )


def adapter_config_from(config: dict, dim: int | None = None) -> AdapterConfig:
    return AdapterConfig(
        bottleneck_dim=int(dim if dim is not None else config["adapter_dim"]),
        activation=config["adapter_activation"],
        insertion=tuple(config["adapter_insertion"].split(",")),
        variant=config["adapter_variant"],
        moe_experts=int(config["moe_experts"]),
        moe_expert_dim=int(config["moe_expert_dim"]),
        moe_top_k=int(config["moe_top_k"]),
        moe_gating=config["moe_gating"],
        placement=config["adapter_placement"],
    )


def settings_from(config: dict, adapter: AdapterConfig | None = None) -> TrainSettings:
    return TrainSettings(
        batch_size=int(config["batch_size"]),
        max_epochs=int(config["max_epochs"]),
        patience=int(config["patience"]),
        lr_full=float(config["lr_full"]),
        lr_adapter=float(config["lr_adapter"]),
        temperature=float(config["temperature"]),
        max_summary_len=int(config["max_summary_len"]),
        adapter=adapter if adapter is not None else adapter_config_from(config),
    )


def regime_from(config: dict, corpus_languages) -> Regime:
    train = tuple(s for s in str(config["train_languages"]).split(",") if s) \
        or tuple(corpus_languages)
    evals = tuple(s for s in str(config["eval_languages"]).split(",") if s)
    samples = config["samples_per_language"]
    return Regime(
        tuning=config["tuning"],
        scope=config["scope"],
        train_languages=train,
        eval_languages=evals,
        batching=config["batching"],
        language_tags=bool(config["language_tags"]),
        samples_per_language=None if samples in (None, "", 0) else int(samples),
        seed=int(config["seed"]),
    )


def _load_corpus(config) -> tuple[list, SplitCorpus]:
    if not config["corpus"]:
        raise CliError("config key 'corpus' (path to JSONL) is required")
    examples = ingest_jsonl(config["corpus"], languages=[s.name for s in DEFAULT_LANGS])
    corpus = split(examples, tuple(config["split_fractions"]), int(config["split_seed"]))
    return examples, corpus


def _load_vocab(config) -> Vocabulary:
    if not config["vocab"]:
        raise CliError("config key 'vocab' (path to vocab.json) is required")
    return Vocabulary.load(config["vocab"])


def run_root(config) -> Path:
    return Path(config["run_root"] or os.environ.get("ADAPTERLAB_RUNS", "runs"))


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{run_dir} is locked by another run; remove {lock} if stale")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_outputs(out_dir: Path, stem: str, payload: dict, markdown: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(payload, sort_keys=True, indent=2),
                                          encoding="utf-8")
    (out_dir / f"{stem}.md").write_text(markdown, encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    config = load_run_config(args.config, parse_overrides(args.set))
    if args.languages:
        config["languages"] = args.languages
    if args.n is not None:
        config["n_per_language"] = args.n
    if args.imbalance is not None:
        config["imbalance"] = args.imbalance
    if args.seed is not None:
        config["seed"] = args.seed
    out_dir = Path(args.out)
    corpus_path = out_dir / "corpus.jsonl"
    if corpus_path.exists() and not args.force:
        raise CliError(f"{corpus_path} exists; pass --force to overwrite")

    specs = _languages_from(config)
    examples = generate_synthetic(specs, int(config["n_per_language"]),
                                  seed=int(config["seed"]),
                                  imbalance=int(config["imbalance"]))
    write_jsonl(examples, corpus_path)
    corpus = split(examples, tuple(config["split_fractions"]), int(config["split_seed"]))
    manifest = {lang: {part: [ex.id for ex in parts[part]]
                       for part in ("train", "dev", "test")}
                for lang, parts in corpus.by_language.items()}
    (out_dir / "splits.json").write_text(json.dumps(manifest, sort_keys=True),
                                         encoding="utf-8")

    counts = {lang: {part: len(manifest[lang][part]) for part in ("train", "dev", "test")}
              for lang in sorted(manifest)}
    lines = ["| Language | Training | Dev | Test |", "|---|---|---|---|"]
    for lang in sorted(counts):
        c = counts[lang]
        lines.append(f"| {lang} | {c['train']} | {c['dev']} | {c['test']} |")
    markdown = "\n".join(lines) + "\n"
    _write_outputs(out_dir, "summary", {"counts": counts, "seed": config["seed"]},
                   markdown)
    print(markdown, end="")
    print(f"wrote {corpus_path}")
    return 0


def cmd_pretrain(args) -> int:
    config = load_run_config(args.config, parse_overrides(args.set))
    if args.corpus:
        config["corpus"] = args.corpus
    if args.seed is not None:
        config["seed"] = args.seed
    if args.steps is not None:
        config["pretrain_steps"] = args.steps
    examples, corpus = _load_corpus(config)
    vocab = Vocabulary.build(examples, include_language_tags=True)
    model_cfg = model_config_from(config, vocab_size=len(vocab))
    model = TransformerModel.init(model_cfg, seed=int(config["seed"]))

    run_hash = config_hash(config, {"command": "pretrain"})
    out_dir = Path(args.out) if args.out else run_root(config) / f"pretrain-{run_hash}"
    with run_lock(out_dir):
        losses = pretrain_mlm(model, corpus.pooled("train"), vocab,
                              steps=int(config["pretrain_steps"]),
                              seed=int(config["seed"]),
                              batch_size=int(config["batch_size"]),
                              mask_rate=float(config["mask_rate"]),
                              learning_rate=float(config["pretrain_lr"]),
                              checkpoint_path=out_dir / "model.ckpt")
        vocab.save(out_dir / "vocab.json")
        payload = {"config_hash": run_hash, "loss_first": losses[0],
                   "loss_last": losses[-1], "steps": len(losses),
                   "checkpoint": str(out_dir / "model.ckpt")}
        markdown = (f"# MLM pretraining\n\nsteps: {len(losses)}\n\n"
                    f"loss: {losses[0]:.4f} -> {losses[-1]:.4f}\n")
        _write_outputs(out_dir, "record", payload, markdown)
    print(f"wrote {out_dir}/model.ckpt (loss {losses[0]:.4f} -> {losses[-1]:.4f})")
    return 0


def cmd_finetune(args) -> int:
    config = load_run_config(args.config, parse_overrides(args.set))
    _, corpus = _load_corpus(config)
    vocab = _load_vocab(config)
    if not config["base_checkpoint"]:
        raise CliError("config key 'base_checkpoint' is required")
    regime = regime_from(config, corpus.languages)
    settings = settings_from(config)
    run_hash = config_hash(config, {"command": "finetune"})
    out_dir = run_root(config) / f"finetune-{run_hash}"
    with run_lock(out_dir):
        record = finetune(config["base_checkpoint"], regime, config["task"], corpus,
                          vocab, settings, run_dir=out_dir)
        metric = "bleu" if config["task"] == "summarization" else "mrr"
        table = LanguageTable(languages=list(regime.evaluation_languages))
        table.add_row(f"{regime.tuning}", record.metrics[metric]["per_language"])
        payload = json.loads(record.to_json())
        payload["config"] = config
        _write_outputs(out_dir, "record", payload,
                       f"# Fine-tune ({config['task']}, {regime.tuning})\n\n"
                       + table.to_markdown())
    print(f"{metric} overall: {record.metrics[metric]['overall']:.4f}")
    print(f"wrote {out_dir}/record.json")
    return 0


def _load_model_with_adapters(checkpoint, adapters):
    model = TransformerModel.load(checkpoint)
    if adapters:
        AdapterBank.load(adapters, model)
    return model.eval()


def cmd_eval(args) -> int:
    config = load_run_config(args.config, parse_overrides(args.set))
    if args.corpus:
        config["corpus"] = args.corpus
    if args.vocab:
        config["vocab"] = args.vocab
    if args.task:
        config["task"] = args.task
    languages = [s for s in (args.languages or "").split(",") if s]
    if not languages:
        raise CliError("--languages must name at least one language")
    _, corpus = _load_corpus(config)
    vocab = _load_vocab(config)
    model = _load_model_with_adapters(args.checkpoint, args.adapters)
    missing = [lang for lang in languages if lang not in corpus.by_language]
    if missing:
        raise CliError(f"languages {missing} not present in corpus")
    settings = settings_from(config)
    report = evaluate(model, corpus, languages, config["task"], vocab, settings,
                      language_tags=bool(config["language_tags"]))
    metric = "bleu" if config["task"] == "summarization" else "mrr"
    table = LanguageTable(languages=languages)
    table.add_row(Path(args.checkpoint).stem, report.per_language)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    payload = {"metric": metric, "per_language": report.per_language,
               "overall": report.overall, "languages": languages}
    _write_outputs(out_dir, f"eval-{config['task']}", payload, table.to_markdown())
    print(table.to_markdown(), end="")
    return 0


def cmd_probe(args) -> int:
    config = load_run_config(args.config, parse_overrides(args.set))
    if args.vocab:
        config["vocab"] = args.vocab
    if args.seed is not None:
        config["seed"] = args.seed
    tasks = [t for t in (args.tasks or config["probe_tasks"]).split(",") if t]
    bad = [t for t in tasks if t not in PROBE_TASKS]
    if bad:
        raise CliError(f"unknown probe tasks {bad}; expected subset of {PROBE_TASKS}")
    vocab = _load_vocab(config)
    model = _load_model_with_adapters(args.checkpoint, args.adapters)
    specs = _languages_from(config)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)

    payload: dict = {"checkpoint": str(args.checkpoint), "tasks": {}}
    final_row = {}
    for task in tasks:
        dataset = build_probe_dataset(task, specs, int(config["probe_samples"]),
                                      seed=int(config["seed"]))
        sweep = layer_sweep(model, dataset, vocab, seed=int(config["seed"]))
        (out_dir / f"probe_{task}.csv").write_text(sweep_to_csv(sweep), encoding="utf-8")
        payload["tasks"][task] = {str(layer): acc for layer, acc in sweep}
        final_row[task] = sweep[-1][1]
    header = "| Model | " + " | ".join(tasks) + " |"
    row = ("| " + Path(args.checkpoint).stem + " | "
           + " | ".join(f"{100 * final_row[t]:.2f}" for t in tasks) + " |")
    markdown = "\n".join([header, "|" + "---|" * (len(tasks) + 1), row]) + "\n"
    _write_outputs(out_dir, "probe", payload, markdown)
    print(markdown, end="")
    return 0


def cmd_sweep_dim(args) -> int:
    config = load_run_config(args.config, parse_overrides(args.set))
    dims = [int(d) for d in (args.dims or config["dims"]).split(",") if d]
    if not dims:
        raise CliError("--dims must list at least one bottleneck dimension")
    _, corpus = _load_corpus(config)
    vocab = _load_vocab(config)
    if not config["base_checkpoint"]:
        raise CliError("config key 'base_checkpoint' is required")
    regime = regime_from(config, corpus.languages)
    metric = "bleu" if config["task"] == "summarization" else "mrr"
    table = LanguageTable(languages=list(regime.evaluation_languages))
    payload = {"metric": metric, "dims": {}}
    run_hash = config_hash(config, {"command": "sweep-dim", "dims": dims})
    out_dir = run_root(config) / f"sweep-{run_hash}"
    with run_lock(out_dir):
        for dim in dims:
            settings = settings_from(config, adapter=adapter_config_from(config, dim=dim))
            record = finetune(config["base_checkpoint"], regime, config["task"], corpus,
                              vocab, settings)
            per_lang = record.metrics[metric]["per_language"]
            table.add_row(f"dim={dim}", per_lang)
            payload["dims"][str(dim)] = {"per_language": per_lang,
                                         "overall": record.metrics[metric]["overall"]}
        _write_outputs(out_dir, "sweep", payload, table.to_markdown())
    print(table.to_markdown(), end="")
    print(f"wrote {out_dir}/sweep.json")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adapterlab",
                                     description="desk-scale adapter-tuning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to flat JSON run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("generate", help="write a synthetic multilingual corpus")
    common(p)
    p.add_argument("--languages", help="count (e.g. 4) or comma-joined names")
    p.add_argument("--n", type=int, help="examples per language")
    p.add_argument("--imbalance", type=int, help="max/min language size ratio")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="MLM-pretrain a base model")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="run one fine-tuning regime")
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapters")
    p.add_argument("--task")
    p.add_argument("--languages", required=True)
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="layer-wise LEN/CPX/TYP probing")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapters")
    p.add_argument("--tasks")
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep-dim", help="adapter bottleneck dimension sweep")
    common(p)
    p.add_argument("--dims")
    p.set_defaults(func=cmd_sweep_dim)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, CorpusError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
