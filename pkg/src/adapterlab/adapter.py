"""Bottleneck adapters and the mixture-of-experts variant.

An adapter is a down-projection, nonlinearity, up-projection and a skip
connection, inserted after the attention sublayer and after the FFN
sublayer of each transformer layer. The base model stays frozen; only the
bank (plus any task head) trains. Up-projections start at zero so the
injected model is extensionally identical to the base until tuned.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .checkpoint import read_checkpoint, write_checkpoint
from .model import ModelConfig, TransformerModel

INSERTION_POINTS = ("after_attention", "after_ffn")


class InjectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    bottleneck_dim: int = 128
    activation: str = "relu"
    insertion: tuple[str, ...] = INSERTION_POINTS
    variant: str = "standard"
    moe_experts: int = 4
    moe_expert_dim: int = 32
    moe_top_k: int = 2
    moe_gating: str = "per_token"
    placement: str = "before_norm"

    def __post_init__(self):
        if self.bottleneck_dim < 1:
            raise ValueError("bottleneck_dim must be >= 1")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown adapter activation {self.activation!r}")
        bad = [p for p in self.insertion if p not in INSERTION_POINTS]
        if bad or not self.insertion:
            raise ValueError(f"insertion must be a non-empty subset of {INSERTION_POINTS}")
        if self.variant not in ("standard", "moe"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "moe" and not 1 <= self.moe_top_k <= self.moe_experts:
            raise ValueError("moe_top_k must lie in [1, moe_experts]")
        if self.moe_gating not in ("per_token", "per_sample"):
            raise ValueError(f"unknown moe_gating {self.moe_gating!r}")
        if self.placement not in ("before_norm", "after_norm"):
            raise ValueError(f"unknown placement {self.placement!r}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["insertion"] = ",".join(self.insertion)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.name == "insertion":
                kwargs[f.name] = tuple(raw.split(",")) if isinstance(raw, str) else tuple(raw)
            elif f.name.startswith("moe_") and f.name != "moe_gating":
                kwargs[f.name] = int(raw)
            elif f.name == "bottleneck_dim":
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


@dataclass
class BottleneckAdapter:
    """One Z = W_up(sigma(W_down h + b_down)) + b_up (+ skip) unit."""

    w_down: ad.Tensor
    b_down: ad.Tensor
    w_up: ad.Tensor
    b_up: ad.Tensor
    activation: str = "relu"

    def named(self, prefix: str):
        return {
            f"{prefix}.w_down": self.w_down,
            f"{prefix}.b_down": self.b_down,
            f"{prefix}.w_up": self.w_up,
            f"{prefix}.b_up": self.b_up,
        }


@dataclass
class MoeAdapter:
    experts: list[BottleneckAdapter]
    gate: ad.Tensor
    top_k: int
    gating: str = "per_token"

    def named(self, prefix: str):
        out = {f"{prefix}.gate": self.gate}
        for e, expert in enumerate(self.experts):
            out.update(expert.named(f"{prefix}.expert{e}"))
        return out


def _sigma(x, activation: str):
    return ad.relu(x) if activation == "relu" else ad.gelu(x)


def _bottleneck_core(adapter: BottleneckAdapter, h):
    """Projection stack without the skip connection."""
    z = ad.add(ad.matmul(h, adapter.w_down), adapter.b_down)
    z = _sigma(z, adapter.activation)
    return ad.add(ad.matmul(z, adapter.w_up), adapter.b_up)


def adapter_forward(adapter: BottleneckAdapter, h):
    """Bottleneck adapter with skip connection; h is [..., d]."""
    if h.shape[-1] != adapter.w_down.shape[0]:
        raise ad.ShapeMismatch("adapter_forward", h.shape, adapter.w_down.shape, "hidden size differs")
    return ad.add(_bottleneck_core(adapter, h), h)


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask keeping the k largest entries of the last axis per row.

    Ties break toward the lower expert index so routing is deterministic.
    """
    if k > scores.shape[-1]:
        raise ValueError(f"top_k {k} exceeds expert count {scores.shape[-1]}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    mask = np.zeros_like(scores)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def moe_adapter_forward(adapter: MoeAdapter, h):
    """Sparse mixture of bottleneck experts with a single skip connection.

    Gate scores are softmaxed per token (or per sample), the top_k experts
    are kept and their scores renormalized to sum to one; dropped experts
    are multiplied by an exact zero, so they receive zero gradient.
    """
    n_experts = len(adapter.experts)
    if adapter.top_k > n_experts:
        raise ValueError(f"top_k {adapter.top_k} exceeds expert count {n_experts}")
    if adapter.gating == "per_sample":
        pooled = ad.mean(h, axis=-2, keepdims=True)
        gate_logits = ad.matmul(pooled, adapter.gate)
    else:
        gate_logits = ad.matmul(h, adapter.gate)
    g = ad.softmax(gate_logits, axis=-1)
    mask = top_k_mask(g.data, adapter.top_k)
    kept = ad.mul(g, ad.Tensor(mask))
    denom = ad.tsum(kept, axis=-1, keepdims=True)
    weights = ad.div(kept, denom)

    out = h
    for e, expert in enumerate(adapter.experts):
        one_hot = np.zeros(n_experts)
        one_hot[e] = 1.0
        w_e = ad.tsum(ad.mul(weights, ad.Tensor(one_hot)), axis=-1, keepdims=True)
        out = ad.add(out, ad.mul(_bottleneck_core(expert, h), w_e))
    return out


class AdapterBank:
    """Frozen-base overlay: one adapter per configured insertion point."""

    def __init__(self, config: AdapterConfig, d_model: int,
                 adapters: dict[str, BottleneckAdapter | MoeAdapter]):
        self.config = config
        self.d_model = d_model
        self.adapters = adapters

    @property
    def placement(self) -> str:
        return self.config.placement

    @property
    def points(self):
        return self.adapters.keys()

    def apply(self, point: str, h):
        adapter = self.adapters[point]
        if isinstance(adapter, MoeAdapter):
            return moe_adapter_forward(adapter, h)
        return adapter_forward(adapter, h)

    def named_params(self) -> dict[str, ad.Tensor]:
        out: dict[str, ad.Tensor] = {}
        for point in sorted(self.adapters):
            out.update(self.adapters[point].named(point))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def save(self, path):
        config = {"kind": "adapter", "d_model": self.d_model, **self.config.to_dict()}
        write_checkpoint(path, config, {k: v.data for k, v in self.named_params().items()})

    @classmethod
    def load(cls, path, model: TransformerModel | None = None) -> "AdapterBank":
        raw, arrays = read_checkpoint(path)
        if raw.get("kind") != "adapter":
            raise ValueError(f"{path} is not an adapter checkpoint (kind={raw.get('kind')!r})")
        config = AdapterConfig.from_dict(raw)
        d_model = int(raw["d_model"])
        points = sorted({name.rsplit(".", 1)[0].split(".expert")[0] for name in arrays})
        adapters: dict[str, BottleneckAdapter | MoeAdapter] = {}
        for point in points:
            if config.variant == "moe":
                experts = [
                    BottleneckAdapter(
                        w_down=ad.Tensor(arrays[f"{point}.expert{e}.w_down"], requires_grad=True),
                        b_down=ad.Tensor(arrays[f"{point}.expert{e}.b_down"], requires_grad=True),
                        w_up=ad.Tensor(arrays[f"{point}.expert{e}.w_up"], requires_grad=True),
                        b_up=ad.Tensor(arrays[f"{point}.expert{e}.b_up"], requires_grad=True),
                        activation=config.activation,
                    )
                    for e in range(config.moe_experts)
                ]
                gate = ad.Tensor(arrays[f"{point}.gate"], requires_grad=True)
                adapters[point] = MoeAdapter(experts, gate, config.moe_top_k, config.moe_gating)
            else:
                adapters[point] = BottleneckAdapter(
                    w_down=ad.Tensor(arrays[f"{point}.w_down"], requires_grad=True),
                    b_down=ad.Tensor(arrays[f"{point}.b_down"], requires_grad=True),
                    w_up=ad.Tensor(arrays[f"{point}.w_up"], requires_grad=True),
                    b_up=ad.Tensor(arrays[f"{point}.b_up"], requires_grad=True),
                    activation=config.activation,
                )
        bank = cls(config, d_model, adapters)
        if model is not None:
            if model.adapter_bank is not None:
                raise InjectionError("model already has an adapter bank")
            if model.config.d_model != d_model:
                raise ValueError(f"adapter d_model {d_model} != model d_model {model.config.d_model}")
            model.adapter_bank = bank
        return bank


def insertion_point_names(model_config: ModelConfig, config: AdapterConfig) -> list[str]:
    points = []
    for i in range(model_config.n_layers_encoder):
        if "after_attention" in config.insertion:
            points.append(f"enc.{i}.attn")
        if "after_ffn" in config.insertion:
            points.append(f"enc.{i}.ffn")
    for i in range(model_config.n_layers_decoder):
        if "after_attention" in config.insertion:
            points.append(f"dec.{i}.self_attn")
        if "after_ffn" in config.insertion:
            points.append(f"dec.{i}.ffn")
    return points


def _new_bottleneck(d: int, m: int, activation: str, rng: np.random.Generator) -> BottleneckAdapter:
    # w_up starts at zero so the fresh adapter is exactly the identity
    return BottleneckAdapter(
        w_down=ad.Tensor(rng.normal(0.0, 1e-2, size=(d, m)), requires_grad=True),
        b_down=ad.Tensor(np.zeros(m), requires_grad=True),
        w_up=ad.Tensor(np.zeros((m, d)), requires_grad=True),
        b_up=ad.Tensor(np.zeros(d), requires_grad=True),
        activation=activation,
    )


def inject(model: TransformerModel, config: AdapterConfig, seed: int = 0) -> AdapterBank:
    """Attach a fresh adapter bank; forward passes then route through it."""
    if model.adapter_bank is not None:
        raise InjectionError("model already has an adapter bank; double injection is not allowed")
    d = model.config.d_model
    rng = np.random.default_rng(seed)
    adapters: dict[str, BottleneckAdapter | MoeAdapter] = {}
    for point in insertion_point_names(model.config, config):
        if config.variant == "moe":
            experts = [
                _new_bottleneck(d, config.moe_expert_dim, config.activation, rng)
                for _ in range(config.moe_experts)
            ]
            gate = ad.Tensor(rng.normal(0.0, 1e-2, size=(d, config.moe_experts)), requires_grad=True)
            adapters[point] = MoeAdapter(experts, gate, config.moe_top_k, config.moe_gating)
        else:
            adapters[point] = _new_bottleneck(d, config.bottleneck_dim, config.activation, rng)
    bank = AdapterBank(config, d, adapters)
    model.adapter_bank = bank
    return bank


def freeze_base(model: TransformerModel, bank: AdapterBank,
                head_params: dict[str, ad.Tensor] | None = None) -> dict[str, ad.Tensor]:
    """Freeze all base parameters; return the trainable view (bank + head)."""
    if model.adapter_bank is not bank:
        raise InjectionError("bank is not injected into this model")
    model.set_requires_grad(False)
    view = dict(bank.named_params())
    for p in view.values():
        p.requires_grad = True
    if head_params:
        overlap = set(view) & set(head_params)
        if overlap:
            raise ValueError(f"head parameter names collide with bank: {sorted(overlap)}")
        for p in head_params.values():
            p.requires_grad = True
        view.update(head_params)
    return view


def adapter_parameter_count(model_config: ModelConfig, config: AdapterConfig) -> int:
    """Accounting-only count, no allocation; matches an injected bank exactly."""
    d = model_config.d_model
    n_points = len(insertion_point_names(model_config, config))
    if config.variant == "moe":
        ed = config.moe_expert_dim
        per_point = config.moe_experts * (2 * d * ed + ed + d) + d * config.moe_experts
    else:
        m = config.bottleneck_dim
        per_point = 2 * d * m + m + d
    return n_points * per_point
