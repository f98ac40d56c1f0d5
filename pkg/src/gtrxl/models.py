"""Task models: an embedding in front of the layer stack and readouts behind it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import MemoryState, uniform_init
from .blocks import BlockParams, StackConfig, init_stack, stack_forward
from .checkpoint import parameters
from .tensor import Tensor

# readout layers start small so initial predictions are near uniform
READOUT_SCALE = 0.1


@dataclass
class Dense:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, fan_in: int, fan_out: int, scale: float = 1.0) -> "Dense":
        return cls(uniform_init(rng, fan_in, (fan_in, fan_out), scale), Tensor(np.zeros(fan_out), requires_grad=True))

    def __call__(self, x) -> Tensor:
        return tc.matmul(x, self.w) + self.b


@dataclass
class CopyModel:
    """Token embedding -> stack -> linear readout over the ``vocab`` payload symbols."""

    config: StackConfig
    vocab: int
    embed: Tensor  # [vocab + 2, D]: symbols, blank, delimiter
    stack: list[BlockParams]
    head: Dense

    @classmethod
    def init(cls, config: StackConfig, vocab: int, rng: np.random.Generator) -> "CopyModel":
        D = config.d_model
        embed = Tensor(rng.normal(size=(vocab + 2, D)), requires_grad=True)
        stack = init_stack(config, rng)
        return cls(config, vocab, embed, stack, Dense.init(rng, D, vocab, READOUT_SCALE))

    def parameters(self) -> list[Tensor]:
        return parameters([self.embed, self.stack, self.head])

    def __call__(self, tokens: np.ndarray, memory: MemoryState | None = None):
        """``tokens`` is ``[B, T]``; returns logits ``[B, T, vocab]`` and the new memory."""
        x = tc.gather_rows(self.embed, tokens)
        out, memory = stack_forward(self.config, self.stack, memory, x)
        return self.head(out), memory


@dataclass
class ActorCritic:
    """Observation MLP (tanh) -> stack -> separate policy and value MLP heads."""

    config: StackConfig
    obs_in: Dense
    obs_out: Dense
    stack: list[BlockParams]
    pi_hidden: Dense
    pi_out: Dense
    v_hidden: Dense
    v_out: Dense

    @classmethod
    def init(cls, config: StackConfig, obs_size: int, n_actions: int, rng: np.random.Generator,
             head_hidden: int = 256) -> "ActorCritic":
        D = config.d_model
        return cls(
            config=config,
            obs_in=Dense.init(rng, obs_size, D),
            obs_out=Dense.init(rng, D, D),
            stack=init_stack(config, rng),
            pi_hidden=Dense.init(rng, D, head_hidden),
            pi_out=Dense.init(rng, head_hidden, n_actions, READOUT_SCALE),
            v_hidden=Dense.init(rng, D, head_hidden),
            v_out=Dense.init(rng, head_hidden, 1, READOUT_SCALE),
        )

    @property
    def n_actions(self) -> int:
        return self.pi_out.w.shape[1]

    def parameters(self) -> list[Tensor]:
        return parameters(
            [self.obs_in, self.obs_out, self.stack, self.pi_hidden, self.pi_out, self.v_hidden, self.v_out]
        )

    def initial_memory(self, batch: int) -> MemoryState:
        return MemoryState.zeros(self.config.n_layers, self.config.d_model, self.config.mem_len, batch)

    def __call__(self, obs: np.ndarray, memory: MemoryState | None = None):
        """``obs`` is ``[B, T, obs_size]``; returns logits ``[B, T, A]``, values ``[B, T]``, memory."""
        x = tc.tanh(self.obs_out(tc.tanh(self.obs_in(obs))))
        out, memory = stack_forward(self.config, self.stack, memory, x)
        logits = self.pi_out(tc.relu(self.pi_hidden(out)))
        values = self.v_out(tc.relu(self.v_hidden(out)))
        return logits, tc.reshape(values, values.shape[:-1]), memory
