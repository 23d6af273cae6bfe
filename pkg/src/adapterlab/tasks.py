"""Downstream tasks: seq2seq code summarization and bi-encoder code search.

Search uses symmetric in-batch-negative contrastive cross-entropy over
cosine similarities (temperature 0.05 by default) with mean pooling over
non-pad encoder states; language tags, when enabled, are prepended to the
code side only.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import read_checkpoint, write_checkpoint
from .corpus import BOS, EOS, PAD, Vocabulary
from .model import ModeError, TransformerModel

DEFAULT_TEMPERATURE = 0.05


class TaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# batch assembly


def code_side_ids(example, vocab: Vocabulary, language_tag: bool) -> list[int]:
    ids = [BOS]
    if language_tag:
        ids.append(vocab.tag_id(example.language))
    ids += vocab.encode(example.code_tokens)
    ids.append(EOS)
    return ids


def _pad_rows(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1.0
    return ids, mask


def _check_length(rows, max_seq_len: int, side: str):
    worst = max(len(r) for r in rows)
    if worst > max_seq_len:
        raise TaskError(
            f"{side} sequence of {worst} tokens exceeds max_seq_len {max_seq_len};"
            " truncate at ingestion")


@dataclass
class SummarizationBatch:
    encoder_ids: np.ndarray
    encoder_mask: np.ndarray
    decoder_input: np.ndarray
    target: np.ndarray
    decoder_mask: np.ndarray


def build_summarization_batch(examples, vocab: Vocabulary, max_seq_len: int,
                              language_tags: bool = False) -> SummarizationBatch:
    if not examples:
        raise TaskError("empty batch")
    enc_rows = [code_side_ids(ex, vocab, language_tags) for ex in examples]
    dec_in_rows, target_rows = [], []
    for ex in examples:
        desc = vocab.encode(ex.description_tokens)
        dec_in_rows.append([BOS] + desc)
        target_rows.append(desc + [EOS])
    _check_length(enc_rows, max_seq_len, "encoder")
    _check_length(dec_in_rows, max_seq_len, "decoder")
    enc_ids, enc_mask = _pad_rows(enc_rows)
    dec_ids, dec_mask = _pad_rows(dec_in_rows)
    tgt_ids, _ = _pad_rows(target_rows)
    return SummarizationBatch(enc_ids, enc_mask, dec_ids, tgt_ids, dec_mask)


@dataclass
class SearchBatch:
    query_ids: np.ndarray
    query_mask: np.ndarray
    code_ids: np.ndarray
    code_mask: np.ndarray


def build_search_batch(examples, vocab: Vocabulary, max_seq_len: int,
                       language_tags: bool = True) -> SearchBatch:
    if not examples:
        raise TaskError("empty batch")
    query_rows = [[BOS] + vocab.encode(ex.description_tokens) + [EOS] for ex in examples]
    code_rows = [code_side_ids(ex, vocab, language_tags) for ex in examples]
    _check_length(query_rows, max_seq_len, "query")
    _check_length(code_rows, max_seq_len, "code")
    q_ids, q_mask = _pad_rows(query_rows)
    c_ids, c_mask = _pad_rows(code_rows)
    return SearchBatch(q_ids, q_mask, c_ids, c_mask)


# ---------------------------------------------------------------------------
# summarization


def summarization_loss(model: TransformerModel, batch: SummarizationBatch):
    """Token-level cross-entropy averaged over non-pad target positions."""
    if model.mode != "encoder_decoder":
        raise ModeError("summarization requires an encoder_decoder model")
    enc, _ = model.encode_batch(batch.encoder_ids, batch.encoder_mask)
    logits = model.decode_batch(enc, batch.encoder_mask, batch.decoder_input,
                                batch.decoder_mask)
    return ad.cross_entropy(logits, batch.target, ignore_index=PAD)


def _log_softmax_row(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def generate_summary(model: TransformerModel, code_ids, max_len: int = 24,
                     strategy: str = "greedy", beam_width: int = 1) -> list[int]:
    """Decode a summary; returns generated ids (EOS-terminated or max_len).

    Beam search ranks live hypotheses by total log-prob (equal lengths, so
    identical to per-step normalization) and picks the finished hypothesis
    with the best length-normalized log-prob; ties go to lower beam index.
    """
    if max_len < 1:
        raise TaskError("max_len must be >= 1")
    if strategy not in ("greedy", "beam"):
        raise TaskError(f"unknown strategy {strategy!r}")
    k = 1 if strategy == "greedy" else beam_width
    if k < 1:
        raise TaskError("beam width must be >= 1")
    model.eval()
    enc, _ = model.encode(code_ids)

    def step_logprobs(prefix):
        logits = model.decode_step(enc, prefix)
        return _log_softmax_row(logits.data[-1])

    beams = [(0.0, [BOS])]
    finished: list[tuple[float, list[int]]] = []  # (normalized score, generated)
    for _ in range(max_len):
        candidates: list[tuple[float, int, int]] = []  # (total, beam_idx, token)
        for b_idx, (total, prefix) in enumerate(beams):
            logprobs = step_logprobs(prefix)
            top = np.argsort(-logprobs, kind="stable")[: k]
            for tok in top:
                candidates.append((total + float(logprobs[tok]), b_idx, int(tok)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_beams = []
        for total, b_idx, tok in candidates[:k]:
            seq = beams[b_idx][1] + [tok]
            if tok == EOS:
                gen = seq[1:]
                finished.append((total / len(gen), gen))
            else:
                next_beams.append((total, seq))
        beams = next_beams
        if not beams:
            break
    for total, prefix in beams:
        gen = prefix[1:]
        if gen:
            finished.append((total / len(gen), gen))
    best = max(enumerate(finished), key=lambda item: (item[1][0], -item[0]))
    return best[1][1]


# ---------------------------------------------------------------------------
# search


def pooled_embedding(model: TransformerModel, ids: np.ndarray, mask: np.ndarray,
                     pooling: str = "mean", normalize: bool = True):
    """Pooled, optionally unit-normalized sequence embeddings [B, d]."""
    hidden, _ = model.encode_batch(ids, mask)
    if pooling == "first":
        sel = np.zeros_like(mask)
        sel[:, 0] = 1.0
        weights = sel
    elif pooling == "mean":
        weights = mask
    else:
        raise TaskError(f"unknown pooling {pooling!r}")
    weighted = ad.tsum(ad.mul(hidden, ad.Tensor(weights[:, :, None])), axis=1)
    pooled = ad.mul(weighted, ad.Tensor(1.0 / weights.sum(axis=1, keepdims=True)))
    if not normalize:
        return pooled
    sq = ad.tsum(ad.mul(pooled, pooled), axis=1, keepdims=True)
    norm = ad.sqrt(ad.add(sq, ad.Tensor(1e-12)))
    return ad.div(pooled, norm)


def contrastive_loss(query_emb, code_emb, temperature: float = DEFAULT_TEMPERATURE):
    """Symmetric in-batch contrastive cross-entropy; row i pairs are positives."""
    b = query_emb.shape[0]
    if b < 2:
        raise TaskError("search loss needs batch size >= 2 for in-batch negatives")
    sims = ad.mul(ad.matmul(query_emb, ad.transpose(code_emb, (1, 0))),
                  ad.Tensor(1.0 / temperature))
    labels = np.arange(b)
    loss_qc = ad.cross_entropy(sims, labels)
    loss_cq = ad.cross_entropy(ad.transpose(sims, (1, 0)), labels)
    return ad.mul(ad.add(loss_qc, loss_cq), ad.Tensor(0.5))


def search_loss(model: TransformerModel, batch: SearchBatch,
                temperature: float = DEFAULT_TEMPERATURE, pooling: str = "mean"):
    """Contrastive loss over cosine similarities of pooled encoder states."""
    q = pooled_embedding(model, batch.query_ids, batch.query_mask, pooling)
    c = pooled_embedding(model, batch.code_ids, batch.code_mask, pooling)
    return contrastive_loss(q, c, temperature)


@dataclass
class RetrievalIndex:
    embeddings: np.ndarray      # [N, d]
    ids: list[int]
    normalized: bool = True

    def __post_init__(self):
        if len(self.ids) != self.embeddings.shape[0]:
            raise TaskError("index ids and embeddings misaligned")

    def save(self, path):
        path = Path(path)
        write_checkpoint(path, {"kind": "index", "normalized": self.normalized},
                         {"embeddings": self.embeddings})
        Path(str(path) + ".ids").write_text("".join(f"{i}\n" for i in self.ids),
                                            encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        config, arrays = read_checkpoint(path)
        if config.get("kind") != "index":
            raise TaskError(f"{path} is not a retrieval index (kind={config.get('kind')!r})")
        ids = [int(line) for line in Path(str(path) + ".ids").read_text().splitlines()]
        return cls(embeddings=arrays["embeddings"], ids=ids,
                   normalized=config["normalized"] == "True")


def build_index(model: TransformerModel, examples, vocab: Vocabulary,
                language_tags: bool = True, pooling: str = "mean",
                batch_size: int = 16) -> RetrievalIndex:
    model.eval()
    rows = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        ids, mask = _pad_rows([code_side_ids(ex, vocab, language_tags) for ex in chunk])
        emb = pooled_embedding(model, ids, mask, pooling)
        rows.append(emb.data)
    if not rows:
        raise TaskError("cannot build an empty retrieval index")
    return RetrievalIndex(np.concatenate(rows, axis=0), [ex.id for ex in examples])


def embed_query(model: TransformerModel, query_ids, pooling: str = "mean") -> np.ndarray:
    ids = np.asarray(list(query_ids), dtype=np.int64)[None, :]
    emb = pooled_embedding(model, ids, np.ones_like(ids, dtype=np.float64), pooling)
    return emb.data[0]


def retrieve(model: TransformerModel, query_ids, index: RetrievalIndex,
             pooling: str = "mean") -> list[int]:
    """Candidate ids by descending cosine similarity; ties by ascending id."""
    if index.embeddings.shape[0] == 0:
        raise TaskError("retrieval index is empty")
    q = embed_query(model, query_ids, pooling)
    sims = index.embeddings @ q
    id_arr = np.asarray(index.ids)
    order = np.lexsort((id_arr, -sims))
    return [int(id_arr[i]) for i in order]
