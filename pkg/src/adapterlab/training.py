"""Experiment orchestration: MLM pretraining and the fine-tuning regimes.

A Regime pins everything that varies between runs: what is tuned (full
model, adapters, MoE adapters), the data scope (monolingual, multilingual,
cross-lingual), the mini-batch strategy, language tags, the low-resource
sample size, and the seed. Identical regimes reproduce identical metrics.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .adapter import AdapterConfig, freeze_base, inject
from .corpus import BOS, EOS, PAD, SplitCorpus, Vocabulary
from .metrics import BleuReport, MrrReport, bleu_report, mrr
from .model import TransformerModel
from .tasks import (
    build_index,
    build_search_batch,
    build_summarization_batch,
    code_side_ids,
    generate_summary,
    retrieve,
    search_loss,
    summarization_loss,
)

TASKS = ("summarization", "search")
TUNINGS = ("full", "adapter", "adapter_moe")
SCOPES = ("monolingual", "multilingual", "cross")
BATCHINGS = ("multilingual_minibatch", "monolingual_minibatch")


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class Regime:
    tuning: str = "adapter"
    scope: str = "multilingual"
    train_languages: tuple[str, ...] = ()
    eval_languages: tuple[str, ...] = ()
    batching: str = "multilingual_minibatch"
    language_tags: bool = False
    samples_per_language: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.tuning not in TUNINGS:
            raise TrainingError(f"unknown tuning {self.tuning!r}")
        if self.scope not in SCOPES:
            raise TrainingError(f"unknown scope {self.scope!r}")
        if self.batching not in BATCHINGS:
            raise TrainingError(f"unknown batching {self.batching!r}")
        if self.scope in ("monolingual", "cross") and len(self.train_languages) != 1:
            raise TrainingError(f"{self.scope} scope needs exactly one training language")
        if not self.train_languages:
            raise TrainingError("empty training scope")
        if self.samples_per_language is not None and self.samples_per_language < 1:
            raise TrainingError("samples_per_language must be >= 1")

    @property
    def evaluation_languages(self) -> tuple[str, ...]:
        return self.eval_languages or self.train_languages

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 16
    max_epochs: int = 8
    patience: int = 3
    lr_full: float = 3e-4
    lr_adapter: float = 1e-3
    temperature: float = 0.05
    max_summary_len: int = 24
    adapter: AdapterConfig = field(default_factory=lambda: AdapterConfig(bottleneck_dim=16))

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "adapter"}
        out["adapter"] = self.adapter.to_dict()
        return out


@dataclass
class RunRecord:
    task: str
    regime: dict
    settings: dict
    config_hash: str
    metrics: dict
    loss_curve: list[float]
    dev_losses: list[float]
    wall_clock_sec: float
    trainable_params: int
    base_params: int
    checkpoint_paths: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        return json.dumps(data, sort_keys=True, indent=2)


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# MLM pretraining


def _mlm_items(examples, vocab: Vocabulary) -> list[list[int]]:
    items = []
    for ex in examples:
        items.append([BOS] + vocab.encode(ex.code_tokens) + [EOS])
        items.append([BOS] + vocab.encode(ex.description_tokens) + [EOS])
    return items


def _mask_item(item, rng, vocab_size: int, first_regular_id: int, mask_rate: float,
               mask_id: int):
    """80/10/10 masking over non-special positions; returns (input, target)."""
    ids = np.asarray(item, dtype=np.int64)
    target = np.full_like(ids, -1)
    candidates = np.where((ids != BOS) & (ids != EOS) & (ids != PAD))[0]
    picked = candidates[rng.random(candidates.size) < mask_rate]
    inp = ids.copy()
    for pos in picked:
        target[pos] = ids[pos]
        roll = rng.random()
        if roll < 0.8:
            inp[pos] = mask_id
        elif roll < 0.9:
            inp[pos] = int(rng.integers(first_regular_id, vocab_size))
    return inp, target


def pretrain_mlm(model: TransformerModel, examples, vocab: Vocabulary, steps: int,
                 seed: int, batch_size: int = 16, mask_rate: float = 0.15,
                 learning_rate: float = 1e-3, checkpoint_path=None) -> list[float]:
    """Masked-token pretraining; the UNK id doubles as the mask token.

    Encoder-only models predict masked tokens from encoder states; an
    encoder-decoder model reconstructs the unmasked sequence through the
    decoder with the loss restricted to masked positions, which also
    pretrains cross-attention.
    """
    if steps < 1:
        raise TrainingError("steps must be >= 1")
    langs = {ex.language for ex in examples}
    if len(langs) < 2:
        raise TrainingError(f"pretraining corpus must span >= 2 languages, got {sorted(langs)}")
    from .corpus import UNK

    items = _mlm_items(examples, vocab)
    first_regular = 4 + len(vocab.language_tags)
    rng = np.random.default_rng([seed, 0])
    state = ad.AdamState(learning_rate=learning_rate)
    losses = []
    model.train(np.random.default_rng([seed, 1]))
    for _ in range(steps):
        chosen = rng.integers(0, len(items), size=batch_size)
        masked = [_mask_item(items[i], rng, model.config.vocab_size, first_regular,
                             mask_rate, UNK) for i in chosen]
        width = max(len(m[0]) for m in masked)
        enc = np.full((batch_size, width), PAD, dtype=np.int64)
        tgt = np.full((batch_size, width), -1, dtype=np.int64)
        mask = np.zeros((batch_size, width))
        for r, (inp, t) in enumerate(masked):
            enc[r, : len(inp)] = inp
            tgt[r, : len(t)] = t
            mask[r, : len(inp)] = 1.0
        hidden, _ = model.encode_batch(enc, mask)
        if model.mode == "encoder_decoder":
            originals = [items[i] for i in chosen]
            dec_in = np.full((batch_size, width), PAD, dtype=np.int64)
            for r, orig in enumerate(originals):
                dec_in[r, : len(orig) - 1] = orig[:-1]
            dec_mask = mask.copy()
            logits = model.decode_batch(hidden, mask, dec_in, dec_mask)
            shifted_tgt = np.full_like(tgt, -1)
            shifted_tgt[:, :-1] = tgt[:, 1:]
            loss = ad.cross_entropy(logits, shifted_tgt, ignore_index=-1)
        else:
            logits = model.output_logits(hidden)
            loss = ad.cross_entropy(logits, tgt, ignore_index=-1)
        losses.append(loss.item())
        ad.zero_grads(model.params)
        ad.backward(loss)
        ad.adam_step(state, model.params)
    model.eval()
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return losses


# ---------------------------------------------------------------------------
# batching strategies


def plan_batches(examples, batching: str, batch_size: int, rng: np.random.Generator,
                 min_batch: int = 1) -> list[list]:
    """Epoch batch plan per the mini-batch strategy; batches keep list order."""
    def chunk(pool):
        return [pool[i:i + batch_size] for i in range(0, len(pool), batch_size)]

    if batching == "multilingual_minibatch":
        pool = [examples[i] for i in rng.permutation(len(examples))]
        batches = chunk(pool)
    elif batching == "monolingual_minibatch":
        by_lang: dict[str, list] = {}
        for ex in examples:
            by_lang.setdefault(ex.language, []).append(ex)
        batches = []
        for lang in sorted(by_lang):
            pool = by_lang[lang]
            pool = [pool[i] for i in rng.permutation(len(pool))]
            batches.extend(chunk(pool))
        batches = [batches[i] for i in rng.permutation(len(batches))]
    else:
        raise TrainingError(f"unknown batching {batching!r}")
    return [b for b in batches if len(b) >= min_batch]


def low_resource_sample(split_corpus: SplitCorpus, k: int, seed: int) -> SplitCorpus:
    """Uniform without-replacement subsample of k train examples per language."""
    out = {}
    for lang_idx, lang in enumerate(split_corpus.languages):
        parts = split_corpus.by_language[lang]
        train = parts["train"]
        if k > len(train):
            raise TrainingError(f"k={k} exceeds train size {len(train)} for {lang!r}")
        rng = np.random.default_rng([seed, 17, lang_idx])
        picked = rng.choice(len(train), size=k, replace=False)
        out[lang] = {"train": [train[i] for i in sorted(picked)],
                     "dev": parts["dev"], "test": parts["test"]}
    return SplitCorpus(by_language=out)


# ---------------------------------------------------------------------------
# fine-tuning


def _scoped_examples(split_corpus: SplitCorpus, languages, part: str) -> list:
    out = []
    for lang in languages:
        if lang not in split_corpus.by_language:
            raise TrainingError(f"language {lang!r} not present in corpus")
        out.extend(split_corpus.by_language[lang][part])
    return out


def _epoch_loss(model, batches, task, vocab, regime, settings, trainable=None,
                state=None):
    total, count = 0.0, 0
    for batch_examples in batches:
        if task == "summarization":
            batch = build_summarization_batch(batch_examples, vocab,
                                              model.config.max_seq_len,
                                              language_tags=regime.language_tags)
            loss = summarization_loss(model, batch)
        else:
            if len(batch_examples) < 2:
                continue
            batch = build_search_batch(batch_examples, vocab, model.config.max_seq_len,
                                       language_tags=regime.language_tags)
            loss = search_loss(model, batch, temperature=settings.temperature)
        if state is not None:
            ad.zero_grads(trainable)
            ad.backward(loss)
            ad.adam_step(state, trainable)
        total += loss.item() * len(batch_examples)
        count += len(batch_examples)
    if count == 0:
        raise TrainingError("no usable batches in epoch")
    return total / count


def evaluate(model: TransformerModel, split_corpus: SplitCorpus, languages, task: str,
             vocab: Vocabulary, settings: TrainSettings,
             language_tags: bool) -> BleuReport | MrrReport:
    """Test-split evaluation: BLEU for summarization, in-language MRR for search."""
    model.eval()
    if task == "summarization":
        cands, refs, langs = [], [], []
        for lang in languages:
            for ex in split_corpus.by_language[lang]["test"]:
                ids = code_side_ids(ex, vocab, language_tags)
                out = generate_summary(model, ids, max_len=settings.max_summary_len)
                cands.append(vocab.decode(out))
                refs.append(ex.description_tokens)
                langs.append(lang)
        return bleu_report(cands, refs, langs)
    ranked_lists, gold, langs = [], [], []
    for lang in languages:
        pool = split_corpus.by_language[lang]["test"]
        index = build_index(model, pool, vocab, language_tags=language_tags)
        for ex in pool:
            query = [BOS] + vocab.encode(ex.description_tokens) + [EOS]
            ranked_lists.append(retrieve(model, query, index))
            gold.append(ex.id)
            langs.append(lang)
    return mrr(ranked_lists, gold, langs)


def finetune(base, regime: Regime, task: str, split_corpus: SplitCorpus,
             vocab: Vocabulary, settings: TrainSettings = TrainSettings(),
             run_dir=None) -> RunRecord:
    """Execute one fine-tuning regime end to end and evaluate it."""
    if task not in TASKS:
        raise TrainingError(f"unknown task {task!r}; expected one of {TASKS}")
    start = time.monotonic()
    model = TransformerModel.load(base) if not isinstance(base, TransformerModel) \
        else _copy_model(base)

    scoped = split_corpus
    if regime.samples_per_language is not None:
        scoped = low_resource_sample(scoped, regime.samples_per_language, regime.seed)
    train_examples = _scoped_examples(scoped, regime.train_languages, "train")
    dev_examples = _scoped_examples(scoped, regime.train_languages, "dev")
    if not train_examples:
        raise TrainingError("empty training scope")
    eval_langs = regime.evaluation_languages
    test_ids = {ex.id for lang in eval_langs
                for ex in scoped.by_language[lang]["test"]}
    if test_ids & {ex.id for ex in train_examples}:
        raise TrainingError("train and test splits overlap; corpus is corrupted")

    bank = None
    if regime.tuning in ("adapter", "adapter_moe"):
        adapter_cfg = settings.adapter
        if regime.tuning == "adapter_moe" and adapter_cfg.variant != "moe":
            adapter_cfg = replace(adapter_cfg, variant="moe")
        bank = inject(model, adapter_cfg, seed=int(np.random.default_rng(
            [regime.seed, 2]).integers(0, 2**31)))
        trainable = freeze_base(model, bank)
        lr = settings.lr_adapter
    else:
        trainable = dict(model.params)
        lr = settings.lr_full
    if task == "search":
        # search runs the model encoder-only; decoder parameters see no gradient
        trainable = {n: p for n, p in trainable.items()
                     if not n.startswith("dec.") and n != "out_proj"}

    state = ad.AdamState(learning_rate=lr)
    batch_rng = np.random.default_rng([regime.seed, 3])
    min_batch = 2 if task == "search" else 1
    loss_curve, dev_losses = [], []
    best_dev, since_best = np.inf, 0
    for _epoch in range(settings.max_epochs):
        model.train(np.random.default_rng([regime.seed, 4, _epoch]))
        batches = plan_batches(train_examples, regime.batching, settings.batch_size,
                               batch_rng, min_batch=min_batch)
        loss_curve.append(_epoch_loss(model, batches, task, vocab, regime, settings,
                                      trainable, state))
        model.eval()
        if dev_examples:
            dev_batches = plan_batches(dev_examples, "multilingual_minibatch",
                                       settings.batch_size,
                                       np.random.default_rng([regime.seed, 5]),
                                       min_batch=min_batch)
            dev_loss = _epoch_loss(model, dev_batches, task, vocab, regime, settings)
            dev_losses.append(dev_loss)
            if dev_loss < best_dev - 1e-9:
                best_dev, since_best = dev_loss, 0
            else:
                since_best += 1
                if since_best >= settings.patience:
                    break

    report = evaluate(model, scoped, eval_langs, task, vocab, settings,
                      regime.language_tags)
    metric_name = "bleu" if task == "summarization" else "mrr"
    metrics = {metric_name: {"per_language": report.per_language,
                             "overall": report.overall}}

    run_hash = config_hash(regime.to_dict(), settings.to_dict(),
                           model.config.to_dict(), {"task": task})
    paths = {}
    if run_dir is not None:
        from pathlib import Path

        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        if bank is not None:
            paths["adapters"] = str(run_dir / "adapters.ckpt")
            bank.save(paths["adapters"])
        else:
            paths["model"] = str(run_dir / "model.ckpt")
            model.save(paths["model"])
    base_params = sum(p.size for p in model.params.values())
    record = RunRecord(
        task=task,
        regime=regime.to_dict(),
        settings=settings.to_dict(),
        config_hash=run_hash,
        metrics=metrics,
        loss_curve=loss_curve,
        dev_losses=dev_losses,
        wall_clock_sec=time.monotonic() - start,
        trainable_params=sum(p.size for p in trainable.values()),
        base_params=base_params,
        checkpoint_paths=paths,
    )
    record.model = model  # handed back for probing; not serialized
    return record


def _copy_model(model: TransformerModel) -> TransformerModel:
    params = {k: ad.Tensor(v.data.copy(), requires_grad=True)
              for k, v in model.params.items()}
    return TransformerModel(model.config, params)


# ---------------------------------------------------------------------------
# cross-lingual matrix


def relative_improvement(adapter_matrix: np.ndarray, full_matrix: np.ndarray) -> np.ndarray:
    adapter_matrix = np.asarray(adapter_matrix, dtype=np.float64)
    full_matrix = np.asarray(full_matrix, dtype=np.float64)
    if adapter_matrix.shape != full_matrix.shape:
        raise TrainingError("matrices must share a shape")
    return (adapter_matrix - full_matrix) / full_matrix


def cross_lingual_matrix(base, regime_template: Regime, languages, task: str,
                         split_corpus: SplitCorpus, vocab: Vocabulary,
                         settings: TrainSettings = TrainSettings()) -> dict:
    """Train per-language models under adapter and full regimes; evaluate all
    pairs. Rows are training languages, columns evaluation languages."""
    languages = list(languages)
    if len(languages) < 2:
        raise TrainingError("cross-lingual matrix needs >= 2 languages")
    matrices = {}
    for tuning in ("adapter", "full"):
        matrix = np.zeros((len(languages), len(languages)))
        for row, train_lang in enumerate(languages):
            regime = replace(regime_template, tuning=tuning, scope="cross",
                             train_languages=(train_lang,),
                             eval_languages=tuple(languages))
            record = finetune(base, regime, task, split_corpus, vocab, settings)
            per_lang = record.metrics["bleu" if task == "summarization" else "mrr"]["per_language"]
            for col, eval_lang in enumerate(languages):
                matrix[row, col] = per_lang[eval_lang]
        matrices[tuning] = matrix
    matrices["relative"] = relative_improvement(matrices["adapter"], matrices["full"])
    matrices["languages"] = languages
    return matrices


def matrix_to_csv(matrix: np.ndarray, languages) -> str:
    lines = ["train\\eval," + ",".join(languages)]
    for lang, row in zip(languages, matrix):
        lines.append(lang + "," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
