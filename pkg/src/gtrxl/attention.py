"""Causal multi-head attention and relative multi-head attention over a memory.

Tensors are row-major in time: ``E`` is ``[T, D]`` or ``[B, T, D]``.  The
memory ``M`` (``[S, D]`` / ``[B, S, D]``) precedes the segment, so query
``t`` sits at absolute index ``S + t`` of the extended sequence ``[M, E]``.
Projections are stored input-major, ``x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tc
from .tensor import ContractError, DimensionError, Tensor


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, width: int) -> "LayerNormParams":
        return cls(Tensor(np.ones(width), requires_grad=True), Tensor(np.zeros(width), requires_grad=True))


@dataclass
class AttentionParams:
    w_q: Tensor  # [D, H*d]
    w_k: Tensor
    w_v: Tensor
    w_r: Tensor  # relative-position keys
    u: Tensor  # [H, d] content bias
    v: Tensor  # [H, d] position bias
    w_o: Tensor  # [H*d, D]
    b_o: Tensor  # [D]

    @property
    def n_heads(self) -> int:
        return self.u.shape[0]

    @property
    def head_dim(self) -> int:
        return self.u.shape[1]

    @property
    def width(self) -> int:
        return self.w_q.shape[0]


def uniform_init(rng: np.random.Generator, fan_in: int, shape, scale: float = 1.0) -> Tensor:
    """Uniform weights with variance ``scale**2 / fan_in``."""
    bound = scale * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_attention(width: int, n_heads: int, head_dim: int, rng: np.random.Generator) -> AttentionParams:
    inner = n_heads * head_dim
    return AttentionParams(
        w_q=uniform_init(rng, width, (width, inner)),
        w_k=uniform_init(rng, width, (width, inner)),
        w_v=uniform_init(rng, width, (width, inner)),
        w_r=uniform_init(rng, width, (width, inner)),
        u=Tensor(np.zeros((n_heads, head_dim)), requires_grad=True),
        v=Tensor(np.zeros((n_heads, head_dim)), requires_grad=True),
        w_o=uniform_init(rng, inner, (inner, width)),
        b_o=Tensor(np.zeros(width), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# encodings and masks


@lru_cache(maxsize=64)
def _sinusoids(n_positions: int, width: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, width, 2, dtype=np.float64) / width)
    table = np.empty((n_positions, width))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    table.setflags(write=False)
    return table


def sinusoid_table(n_positions: int, width: int) -> np.ndarray:
    """Fixed encodings; row p, channels (2i, 2i+1) = sin, cos of p / 10000**(2i/D).

    Row p encodes a relative distance of p steps.
    """
    if width % 2:
        raise ContractError(f"sinusoid table needs an even width, got {width}")
    return _sinusoids(int(n_positions), int(width))


def causal_mask(query_len: int, mem_len: int) -> np.ndarray:
    """``[T, S+T]`` boolean mask: row t sees all S memory slots and segment steps <= t."""
    if query_len < 1 or mem_len < 0:
        raise ContractError(f"causal_mask needs T >= 1 and memory >= 0, got T={query_len}, S={mem_len}")
    keys = np.arange(mem_len + query_len)
    return keys[None, :] <= (mem_len + np.arange(query_len))[:, None]


def relative_distances(query_len: int, mem_len: int) -> np.ndarray:
    """Distance from each query to each key, clipped at 0 for (masked) future keys."""
    keys = np.arange(mem_len + query_len)
    return np.maximum((mem_len + np.arange(query_len))[:, None] - keys[None, :], 0)


# ---------------------------------------------------------------------------
# attention


def _lift(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return tc.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected [T, D] or [B, T, D], got {x.shape}")


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, inner = x.shape
    return tc.swapaxes(tc.reshape(x, (b, t, n_heads, inner // n_heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return tc.reshape(tc.swapaxes(x, 1, 2), (b, t, h * d))


def _check_width(x: Tensor, params: AttentionParams, what: str) -> None:
    if x.shape[-1] != params.width:
        raise DimensionError(f"{what} width {x.shape[-1]} does not match attention width {params.width}")


def _finish(E: Tensor, heads_out: Tensor, params: AttentionParams, norm: LayerNormParams | None, squeeze: bool):
    out = tc.matmul(_merge_heads(heads_out), params.w_o) + params.b_o
    if norm is not None:
        out = tc.layer_norm(E + out, norm.gain, norm.bias)
    if squeeze:
        out = tc.reshape(out, out.shape[1:])
    return out


def multi_head_attention(E, params: AttentionParams, norm: LayerNormParams | None = None) -> Tensor:
    """Causal MHA over a single segment.

    With ``norm`` the result is ``LayerNorm(E + Linear(attn))``; without it
    the bare submodule output ``Linear(attn)`` is returned so that callers
    can place the residual and normalization themselves.
    """
    E, squeeze = _lift(tc.as_tensor(E))
    _check_width(E, params, "input")
    h = params.n_heads
    q = _split_heads(tc.matmul(E, params.w_q), h)
    k = _split_heads(tc.matmul(E, params.w_k), h)
    v = _split_heads(tc.matmul(E, params.w_v), h)
    weights = tc.masked_softmax(tc.batched_contract_qk(q, k), causal_mask(E.shape[1], 0))
    return _finish(E, tc.batched_contract_av(weights, v), params, norm, squeeze)


def relative_multi_head_attention(
    M,
    E,
    params: AttentionParams,
    phi: np.ndarray | None = None,
    norm: LayerNormParams | None = None,
) -> Tensor:
    """Relative-position MHA where queries come from ``E`` and keys/values from ``[M, E]``.

    Scores are ``(q + u).k + (q + v).r`` with ``r`` the projected sinusoid
    row for the query-key distance.  ``M`` must already be detached from the
    graph; no stop-gradient is applied here so that a caller may normalize a
    detached memory with trainable gains.  ``phi`` defaults to the standard
    table and must have at least ``S + T`` rows.
    """
    E, squeeze = _lift(tc.as_tensor(E))
    M = tc.as_tensor(M)
    if M.ndim == 2:
        M = tc.reshape(M, (1,) + M.shape)
    if M.ndim != 3 or M.shape[0] not in (1, E.shape[0]):
        raise DimensionError(f"memory {M.shape} incompatible with input {E.shape}")
    _check_width(E, params, "input")
    _check_width(M, params, "memory")
    if M.shape[0] != E.shape[0]:
        M = tc.concat([M] * E.shape[0], axis=0)
    n_mem, n_q = M.shape[1], E.shape[1]
    n_keys = n_mem + n_q
    if phi is None:
        phi = sinusoid_table(n_keys, params.width)
    if phi.shape[0] < n_keys or phi.shape[1] != params.width:
        raise DimensionError(f"sinusoid table {phi.shape} too small for {n_keys} keys of width {params.width}")

    h, d = params.n_heads, params.head_dim
    extended = tc.concat([M, E], axis=1) if n_mem else E
    q = _split_heads(tc.matmul(E, params.w_q), h)
    k = _split_heads(tc.matmul(extended, params.w_k), h)
    v = _split_heads(tc.matmul(extended, params.w_v), h)

    r_by_distance = tc.matmul(Tensor(phi[:n_keys]), params.w_r)  # [P, H*d]
    r = tc.reshape(tc.gather_rows(r_by_distance, relative_distances(n_q, n_mem)), (n_q, n_keys, h, d))

    content = tc.batched_contract_qk(q + tc.reshape(params.u, (h, 1, d)), k)
    position = tc.einsum("bhtd,tmhd->bhtm", q + tc.reshape(params.v, (h, 1, d)), r)
    weights = tc.masked_softmax(content + position, causal_mask(n_q, n_mem))
    return _finish(E, tc.batched_contract_av(weights, v), params, norm, squeeze)


# ---------------------------------------------------------------------------
# memory


@dataclass
class MemoryState:
    """Per-layer cached layer inputs, held as plain arrays so no gradient can reach them.

    ``layers[l]`` is ``[S, D]`` or ``[B, S, D]`` with ``S <= span``.
    """

    layers: list[np.ndarray]
    span: int

    @classmethod
    def empty(cls, n_layers: int, width: int, span: int, batch: int | None = None) -> "MemoryState":
        shape = (0, width) if batch is None else (batch, 0, width)
        return cls([np.zeros(shape) for _ in range(n_layers)], span)

    @classmethod
    def zeros(cls, n_layers: int, width: int, span: int, batch: int | None = None) -> "MemoryState":
        shape = (span, width) if batch is None else (batch, span, width)
        return cls([np.zeros(shape) for _ in range(n_layers)], span)

    @property
    def length(self) -> int:
        return self.layers[0].shape[-2] if self.layers else 0

    def copy(self) -> "MemoryState":
        return MemoryState([m.copy() for m in self.layers], self.span)

    def reset(self, rows) -> None:
        """Zero the memory of the given batch rows (episode boundaries)."""
        for m in self.layers:
            m[rows] = 0.0


def update_memory(old: MemoryState, segment_inputs) -> MemoryState:
    """Append each layer's segment inputs and keep the last ``span`` steps."""
    if len(segment_inputs) != len(old.layers):
        raise ContractError(f"expected {len(old.layers)} layer inputs, got {len(segment_inputs)}")
    layers = []
    for mem, new in zip(old.layers, segment_inputs):
        mem = mem.data if isinstance(mem, Tensor) else np.asarray(mem, dtype=np.float64)
        new = new.data if isinstance(new, Tensor) else np.asarray(new, dtype=np.float64)
        if new.shape[:-2] != mem.shape[:-2] or new.shape[-1] != mem.shape[-1]:
            raise DimensionError(f"segment inputs {new.shape} incompatible with memory {mem.shape}")
        joined = np.concatenate([mem, new], axis=-2)
        start = max(joined.shape[-2] - old.span, 0)
        layers.append(np.array(joined[..., start:, :], copy=True))
    return MemoryState(layers, old.span)
