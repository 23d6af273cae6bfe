"""Small transformer with mask-controlled behavior.

Two explicit modes instead of unified prefix masking: a bidirectional
encoder (code search, probing) and an encoder-decoder with causal
self-attention plus cross-attention (code summarization). Post-layer-norm
residual blocks; adapters, when injected, hook in after the attention and
feed-forward sublayers.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .checkpoint import read_checkpoint, write_checkpoint

NEG_INF = -1e9


class ModeError(RuntimeError):
    """Operation not available in the model's current mode."""


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers_encoder: int = 4
    n_layers_decoder: int = 0
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    dropout: float = 0.0
    activation: str = "gelu"
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must reserve at least 4 special ids")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def mode(self) -> str:
        return "encoder_only" if self.n_layers_decoder == 0 else "encoder_decoder"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = raw if isinstance(raw, bool) else str(raw) == "True"
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


@dataclass
class LayerTrace:
    """Per-layer encoder hidden states; index 0 is the embedding output."""

    states: list[np.ndarray]

    def __len__(self):
        return len(self.states)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Stable name -> shape registry; save/load and accounting key off this."""
    d, v, ff = config.d_model, config.vocab_size, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_seq_len, d),
    }

    def attention(prefix):
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[f"{prefix}.{name}"] = (d,)

    def ffn_and_norms(prefix, n_norms):
        shapes[f"{prefix}.ffn.w1"] = (d, ff)
        shapes[f"{prefix}.ffn.b1"] = (ff,)
        shapes[f"{prefix}.ffn.w2"] = (ff, d)
        shapes[f"{prefix}.ffn.b2"] = (d,)
        for k in range(1, n_norms + 1):
            shapes[f"{prefix}.ln{k}.gamma"] = (d,)
            shapes[f"{prefix}.ln{k}.beta"] = (d,)

    for i in range(config.n_layers_encoder):
        attention(f"enc.{i}.attn")
        ffn_and_norms(f"enc.{i}", 2)
    for i in range(config.n_layers_decoder):
        attention(f"dec.{i}.self_attn")
        attention(f"dec.{i}.cross_attn")
        ffn_and_norms(f"dec.{i}", 3)
    if not config.tie_embeddings:
        shapes["out_proj"] = (d, v)
    return shapes


def base_parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s, dtype=np.int64)) for s in parameter_shapes(config).values())


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, ad.Tensor]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter registry mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self.adapter_bank = None
        self.training = False
        self._rng = np.random.default_rng(0)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "TransformerModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gamma"):
                data = np.ones(shape)
            elif name.endswith((".beta", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, 0.02, size=shape)
            params[name] = ad.Tensor(data, requires_grad=True)
        return cls(config, params)

    @property
    def mode(self) -> str:
        return self.config.mode

    def train(self, rng: np.random.Generator | None = None):
        self.training = True
        if rng is not None:
            self._rng = rng
        return self

    def eval(self):
        self.training = False
        return self

    def set_requires_grad(self, flag: bool):
        for p in self.params.values():
            p.requires_grad = flag

    def base_bytes_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------
    # building blocks

    def _dropout(self, x):
        return ad.dropout(x, self.config.dropout, self._rng, self.training)

    def _activation(self, x):
        return ad.gelu(x) if self.config.activation == "gelu" else ad.relu(x)

    def _adapter(self, point: str, h, when: str):
        bank = self.adapter_bank
        if bank is None or bank.placement != when or point not in bank.points:
            return h
        return bank.apply(point, h)

    def _attention(self, prefix: str, x, kv, bias: np.ndarray):
        """Multi-head attention; x queries kv, bias is added to the logits."""
        p = self.params
        cfg = self.config
        b, sq, d = x.shape
        sk = kv.shape[1]
        h, hd = cfg.n_heads, d // cfg.n_heads

        def project(t, w, bvec, s):
            out = ad.add(ad.matmul(t, p[f"{prefix}.{w}"]), p[f"{prefix}.{bvec}"])
            out = ad.reshape(out, (b, s, h, hd))
            return ad.transpose(out, (0, 2, 1, 3))

        q = project(x, "wq", "bq", sq)
        k = project(kv, "wk", "bk", sk)
        v = project(kv, "wv", "bv", sk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), ad.Tensor(1.0 / np.sqrt(hd)))
        scores = ad.add(scores, ad.Tensor(bias))
        attn = ad.softmax(scores, axis=-1)
        attn = self._dropout(attn)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, sq, d))
        return ad.add(ad.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])

    def _sublayer(self, x, sub_out, ln_prefix: str, adapter_point: str):
        """Residual add + layer norm with the adapter hooks around the norm."""
        p = self.params
        sub_out = self._dropout(sub_out)
        sub_out = self._adapter(adapter_point, sub_out, "before_norm")
        out = ad.layer_norm(ad.add(x, sub_out), p[f"{ln_prefix}.gamma"], p[f"{ln_prefix}.beta"])
        return self._adapter(adapter_point, out, "after_norm")

    def _ffn(self, prefix: str, x):
        p = self.params
        hidden = self._activation(ad.add(ad.matmul(x, p[f"{prefix}.ffn.w1"]), p[f"{prefix}.ffn.b1"]))
        return ad.add(ad.matmul(hidden, p[f"{prefix}.ffn.w2"]), p[f"{prefix}.ffn.b2"])

    def _embed(self, ids: np.ndarray):
        b, s = ids.shape
        tok = ad.embedding(self.params["tok_emb"], ids)
        pos = ad.embedding(self.params["pos_emb"], np.tile(np.arange(s), (b, 1)))
        return self._dropout(ad.add(tok, pos))

    # ------------------------------------------------------------------
    # encoder

    def _validate_ids(self, ids: np.ndarray, limit_len: bool = True):
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise SequenceError(f"token id out of range [0, {self.config.vocab_size})")
        if limit_len and ids.shape[-1] > self.config.max_seq_len:
            raise SequenceError(
                f"sequence length {ids.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}"
            )

    def encode_batch(self, ids: np.ndarray, pad_mask: np.ndarray, capture: bool = False):
        """Bidirectional encoding of [B, S] ids; pad_mask is 1 for real tokens.

        Returns (hidden [B, S, d] tensor, list of per-layer numpy states or None).
        """
        ids = np.asarray(ids)
        pad_mask = np.asarray(pad_mask, dtype=np.float64)
        self._validate_ids(ids)
        bias = (1.0 - pad_mask)[:, None, None, :] * NEG_INF
        x = self._embed(ids)
        trace = [x.data.copy()] if capture else None
        for i in range(self.config.n_layers_encoder):
            prefix = f"enc.{i}"
            attn = self._attention(f"{prefix}.attn", x, x, bias)
            x = self._sublayer(x, attn, f"{prefix}.ln1", f"{prefix}.attn")
            ffn = self._ffn(prefix, x)
            x = self._sublayer(x, ffn, f"{prefix}.ln2", f"{prefix}.ffn")
            if capture:
                trace.append(x.data.copy())
        return x, trace

    def encode(self, token_ids, capture: bool = False):
        """Encode one sequence; returns ([S, d] tensor, LayerTrace or None)."""
        ids = np.asarray(list(token_ids), dtype=np.int64)[None, :]
        hidden, trace = self.encode_batch(ids, np.ones_like(ids), capture=capture)
        out = ad.reshape(hidden, hidden.shape[1:])
        return out, (LayerTrace([s[0] for s in trace]) if capture else None)

    # ------------------------------------------------------------------
    # decoder

    def decode_batch(self, enc_hidden, enc_pad: np.ndarray, dec_ids: np.ndarray,
                     dec_pad: np.ndarray | None = None):
        """Teacher-forced decoding; returns logits [B, T, vocab]."""
        if self.mode != "encoder_decoder":
            raise ModeError("decode requires an encoder_decoder model")
        dec_ids = np.asarray(dec_ids)
        self._validate_ids(dec_ids)
        b, t = dec_ids.shape
        if dec_pad is None:
            dec_pad = np.ones((b, t))
        causal = np.triu(np.full((t, t), NEG_INF), k=1)
        self_bias = causal[None, None, :, :] + (1.0 - dec_pad)[:, None, None, :] * NEG_INF
        cross_bias = (1.0 - np.asarray(enc_pad, dtype=np.float64))[:, None, None, :] * NEG_INF

        x = self._embed(dec_ids)
        for i in range(self.config.n_layers_decoder):
            prefix = f"dec.{i}"
            sa = self._attention(f"{prefix}.self_attn", x, x, self_bias)
            x = self._sublayer(x, sa, f"{prefix}.ln1", f"{prefix}.self_attn")
            ca = self._attention(f"{prefix}.cross_attn", x, enc_hidden, cross_bias)
            ca = self._dropout(ca)
            x = ad.layer_norm(ad.add(x, ca), self.params[f"{prefix}.ln2.gamma"], self.params[f"{prefix}.ln2.beta"])
            ffn = self._ffn(prefix, x)
            x = self._sublayer(x, ffn, f"{prefix}.ln3", f"{prefix}.ffn")
        return self.output_logits(x)

    def decode_step(self, encoder_states, prefix_ids):
        """Next-token logits [T, vocab] for a single prefix over one encoding."""
        enc = encoder_states
        if enc.ndim == 2:
            enc = ad.reshape(enc, (1,) + enc.shape)
        ids = np.asarray(list(prefix_ids), dtype=np.int64)[None, :]
        logits = self.decode_batch(enc, np.ones(enc.shape[:2]), ids)
        return ad.reshape(logits, logits.shape[1:])

    def output_logits(self, hidden):
        if self.config.tie_embeddings:
            v, d = self.params["tok_emb"].shape
            flat = ad.reshape(hidden, (-1, d))
            logits = ad.matmul(flat, ad.transpose(self.params["tok_emb"], (1, 0)))
            return ad.reshape(logits, hidden.shape[:-1] + (v,))
        return ad.matmul(hidden, self.params["out_proj"])

    # ------------------------------------------------------------------
    # persistence

    def save(self, path):
        config = {"kind": "model", **self.config.to_dict()}
        write_checkpoint(path, config, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "TransformerModel":
        config, arrays = read_checkpoint(path)
        if config.get("kind") != "model":
            raise ValueError(f"{path} is not a model checkpoint (kind={config.get('kind')!r})")
        cfg = ModelConfig.from_dict(config)
        params = {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(cfg, params)


@dataclass
class ParameterReport:
    base_params: int
    adapter_params: int
    trainable_params: int

    def ratio_vs_k_monolingual(self, k: int) -> float:
        """Adapter parameters relative to k separately fine-tuned base models."""
        return self.adapter_params / (k * self.base_params)


def parameter_report(model_or_config, adapter=None, head_params: int = 0) -> ParameterReport:
    """Exact parameter accounting.

    ``adapter`` may be an injected bank (counted via its registry), a plain
    integer (accounting-only mode for paper-scale configs), or None.
    """
    config = model_or_config.config if isinstance(model_or_config, TransformerModel) else model_or_config
    base = base_parameter_count(config)
    if adapter is None:
        adapter_params = 0
    elif isinstance(adapter, int):
        adapter_params = adapter
    else:
        adapter_params = adapter.parameter_count()
    trainable = (adapter_params + head_params) if adapter is not None else base + head_params
    return ParameterReport(base_params=base, adapter_params=adapter_params, trainable_params=trainable)


def scaled_config(base: ModelConfig, **overrides) -> ModelConfig:
    return replace(base, **overrides)
