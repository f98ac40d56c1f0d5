"""Transformer-XL block variants, gating layers and the layer stack.

Three block layouts share the same parameters:

* ``trxl``   -- post-norm residual: ``Y = LN(E + attn)``, ``E' = LN(Y + mlp(Y))``
* ``trxl-i`` -- pre-norm with ReLU on submodule outputs and an untouched
  residual stream: ``Y = E + relu(attn(LN[M, E]))``, ``E' = Y + relu(mlp(LN Y))``
* ``gtrxl``  -- as ``trxl-i`` with each residual sum replaced by a gate
  ``g(stream, relu(submodule))``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as tc
from .attention import (
    AttentionParams,
    LayerNormParams,
    MemoryState,
    init_attention,
    relative_multi_head_attention,
    uniform_init,
    update_memory,
)
from .checkpoint import named_parameters
from .tensor import ContractError, DimensionError, Tensor


class GateKind(str, Enum):
    RESIDUAL = "residual"
    INPUT = "input"
    OUTPUT = "output"
    HIGHWAY = "highway"
    SIGTANH = "sigtanh"
    GRU = "gru"


class Variant(str, Enum):
    TRXL = "trxl"
    TRXL_I = "trxl-i"
    GTRXL = "gtrxl"


# weight matrices and whether a scalar bias b_g exists, per gate kind
_GATE_FIELDS = {
    GateKind.RESIDUAL: ((), False),
    GateKind.INPUT: (("w_g",), False),
    GateKind.OUTPUT: (("w_g",), True),
    GateKind.HIGHWAY: (("w_g",), True),
    GateKind.SIGTANH: (("w_g", "u_g"), True),
    GateKind.GRU: (("w_r", "u_r", "w_z", "u_z", "w_g", "u_g"), True),
}


@dataclass
class GateParams:
    kind: GateKind
    w_g: Tensor | None = None
    u_g: Tensor | None = None
    b_g: Tensor | None = None
    w_r: Tensor | None = None
    u_r: Tensor | None = None
    w_z: Tensor | None = None
    u_z: Tensor | None = None


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class BlockParams:
    attention: AttentionParams
    mlp: MLPParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    gate_mha: GateParams
    gate_mlp: GateParams


@dataclass(frozen=True)
class StackConfig:
    variant: Variant = Variant.GTRXL
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    head_dim: int = 8
    d_ff: int | None = None
    mem_len: int = 16
    gate: GateKind | None = None  # GRU for gtrxl, residual otherwise
    b_g_init: float = 2.0

    def __post_init__(self):
        variant = Variant(self.variant)
        object.__setattr__(self, "variant", variant)
        if self.gate is None:
            object.__setattr__(self, "gate", GateKind.GRU if variant is Variant.GTRXL else GateKind.RESIDUAL)
        object.__setattr__(self, "gate", GateKind(self.gate))
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads * head_dim ({self.n_heads} * {self.head_dim})"
            )
        if self.n_layers < 0 or self.mem_len < 0 or self.d_model % 2:
            raise ValueError("need n_layers >= 0, mem_len >= 0 and an even d_model")
        if self.variant is not Variant.GTRXL and self.gate is not GateKind.RESIDUAL:
            raise ValueError(f"{self.variant.value} blocks use residual connections; got gate {self.gate.value}")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "d_ff": self.d_ff,
            "mem_len": self.mem_len,
            "gate": self.gate.value,
            "b_g_init": self.b_g_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StackConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# gates


def init_gate(kind: GateKind, width: int, b_g_init: float, rng: np.random.Generator) -> GateParams:
    kind = GateKind(kind)
    names, has_bias = _GATE_FIELDS[kind]
    params = GateParams(kind, **{n: uniform_init(rng, width, (width, width)) for n in names})
    if has_bias:
        params.b_g = Tensor(np.array(float(b_g_init)), requires_grad=True)
    return params


def _check_gate(kind: GateKind, params: GateParams) -> None:
    if params.kind is not kind:
        raise ContractError(f"gate kind {kind.value} given params for {params.kind.value}")
    names, has_bias = _GATE_FIELDS[kind]
    for name in ("w_g", "u_g", "w_r", "u_r", "w_z", "u_z"):
        if (getattr(params, name) is not None) != (name in names):
            raise ContractError(f"{kind.value} gate: field {name} present/absent mismatch")
    if (params.b_g is not None) != has_bias:
        raise ContractError(f"{kind.value} gate: bias present/absent mismatch")


def apply_gate(kind: GateKind, x, y, params: GateParams) -> Tensor:
    """Combine the skip stream ``x`` with the submodule stream ``y``."""
    kind = GateKind(kind)
    _check_gate(kind, params)
    x, y = tc.as_tensor(x), tc.as_tensor(y)
    if x.shape != y.shape:
        raise DimensionError(f"gate streams differ in shape: {x.shape} vs {y.shape}")
    mm = tc.matmul
    if kind is GateKind.RESIDUAL:
        return x + y
    if kind is GateKind.INPUT:
        return tc.sigmoid(mm(x, params.w_g)) * x + y
    if kind is GateKind.OUTPUT:
        return x + tc.sigmoid(mm(x, params.w_g) - params.b_g) * y
    if kind is GateKind.HIGHWAY:
        carry = tc.sigmoid(mm(x, params.w_g) + params.b_g)
        return carry * x + (1.0 - carry) * y
    if kind is GateKind.SIGTANH:
        return x + tc.sigmoid(mm(y, params.w_g) - params.b_g) * tc.tanh(mm(y, params.u_g))
    # GRU-type: untied in depth, z is pushed toward 0 (pass x) by b_g > 0
    r = tc.sigmoid(mm(y, params.w_r) + mm(x, params.u_r))
    z = tc.sigmoid(mm(y, params.w_z) + mm(x, params.u_z) - params.b_g)
    h = tc.tanh(mm(y, params.w_g) + mm(r * x, params.u_g))
    return (1.0 - z) * x + z * h


def gate_param_count(kind: GateKind, width: int) -> int:
    names, has_bias = _GATE_FIELDS[GateKind(kind)]
    return len(names) * width * width + int(has_bias)


# ---------------------------------------------------------------------------
# blocks


def init_block(config: StackConfig, rng: np.random.Generator) -> BlockParams:
    D, F = config.d_model, config.d_ff
    return BlockParams(
        attention=init_attention(D, config.n_heads, config.head_dim, rng),
        mlp=MLPParams(
            w1=uniform_init(rng, D, (D, F)),
            b1=Tensor(np.zeros(F), requires_grad=True),
            w2=uniform_init(rng, F, (F, D)),
            b2=Tensor(np.zeros(D), requires_grad=True),
        ),
        ln1=LayerNormParams.init(D),
        ln2=LayerNormParams.init(D),
        gate_mha=init_gate(config.gate, D, config.b_g_init, rng),
        gate_mlp=init_gate(config.gate, D, config.b_g_init, rng),
    )


def init_stack(config: StackConfig, rng: np.random.Generator) -> list[BlockParams]:
    return [init_block(config, rng) for _ in range(config.n_layers)]


def mlp_forward(params: MLPParams, x) -> Tensor:
    """Position-wise two-layer network; no activation on the output."""
    return tc.matmul(tc.relu(tc.matmul(x, params.w1) + params.b1), params.w2) + params.b2


def block_forward(variant: Variant, params: BlockParams, M, E) -> Tensor:
    """One layer.  ``M`` is the layer's memory (array or Tensor); it is detached here."""
    variant = Variant(variant)
    E = tc.as_tensor(E)
    M = tc.stop_gradient(M if M is not None else np.zeros(E.shape[:-2] + (0, E.shape[-1])))
    if M.shape[-1] != E.shape[-1]:
        raise DimensionError(f"memory width {M.shape[-1]} vs input width {E.shape[-1]}")
    attn, ln1, ln2 = params.attention, params.ln1, params.ln2

    if variant is Variant.TRXL:
        y = relative_multi_head_attention(M, E, attn, norm=ln1)
        return tc.layer_norm(y + mlp_forward(params.mlp, y), ln2.gain, ln2.bias)

    # layer norm over [M, E] acts row-wise, so normalizing each part is identical
    m_n = tc.layer_norm(M, ln1.gain, ln1.bias)
    e_n = tc.layer_norm(E, ln1.gain, ln1.bias)
    y_bar = relative_multi_head_attention(m_n, e_n, attn)
    if variant is Variant.TRXL_I:
        y = E + tc.relu(y_bar)
        e_bar = mlp_forward(params.mlp, tc.layer_norm(y, ln2.gain, ln2.bias))
        return y + tc.relu(e_bar)
    kind = params.gate_mha.kind
    y = apply_gate(kind, E, tc.relu(y_bar), params.gate_mha)
    e_bar = mlp_forward(params.mlp, tc.layer_norm(y, ln2.gain, ln2.bias))
    return apply_gate(kind, y, tc.relu(e_bar), params.gate_mlp)


def stack_forward(
    config: StackConfig,
    params: list[BlockParams],
    memory: MemoryState | None,
    E0,
) -> tuple[Tensor, MemoryState]:
    """Run all layers; returns the final embedding and the refreshed memory.

    ``memory=None`` starts from an empty memory of span ``config.mem_len``.
    """
    if len(params) != config.n_layers:
        raise ContractError(f"config has {config.n_layers} layers but {len(params)} block params given")
    E = tc.as_tensor(E0)
    if memory is None:
        batch = E.shape[0] if E.ndim == 3 else None
        memory = MemoryState.empty(config.n_layers, E.shape[-1], config.mem_len, batch)
    if len(memory.layers) != config.n_layers:
        raise ContractError(f"memory has {len(memory.layers)} layers, config {config.n_layers}")
    inputs = []
    for block, mem in zip(params, memory.layers):
        inputs.append(E.data)
        E = block_forward(config.variant, block, mem, E)
    return E, update_memory(memory, inputs)


# ---------------------------------------------------------------------------
# parameter accounting


def component_counts(config: StackConfig) -> dict[str, int]:
    """Closed-form trainable-scalar counts for the whole stack, per component."""
    L, D, F = config.n_layers, config.d_model, config.d_ff
    inner = config.n_heads * config.head_dim
    return {
        "attention": L * (4 * D * inner + 2 * inner + inner * D + D),
        "mlp": L * (D * F + F + F * D + D),
        "norms": L * 2 * 2 * D,
        "gates": L * 2 * gate_param_count(config.gate, D),
    }


def count_params(config: StackConfig) -> int:
    return sum(component_counts(config).values())


def enumerate_params(params: list[BlockParams]) -> int:
    """Count by walking the parameter registry (independent of the formula)."""
    return sum(t.size for _, t in named_parameters(params))


def param_report(config: StackConfig) -> str:
    counts = component_counts(config)
    total = sum(counts.values())
    header = (
        f"{config.variant.value} gate={config.gate.value} L={config.n_layers} D={config.d_model} "
        f"H={config.n_heads} d={config.head_dim} D_ff={config.d_ff}"
    )
    lines = [header] + [f"  {name:<10} {n:>12,d}" for name, n in counts.items()]
    lines.append(f"  {'total':<10} {total:>12,d}")
    return "\n".join(lines)
