"""Gradient and oracle suites, run by the ``grad-check`` and ``oracle-check`` commands."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracles
from . import tensor as tc
from .attention import (
    LayerNormParams,
    MemoryState,
    causal_mask,
    init_attention,
    multi_head_attention,
    relative_multi_head_attention,
)
from .blocks import GateKind, StackConfig, Variant, apply_gate, init_gate, init_stack, stack_forward
from .checkpoint import named_parameters
from .gradcheck import finite_diff_grad, relative_error
from .tensor import Tensor

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-4
ORACLE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<40} err={self.error:.3e}  tol={self.tol:.0e}  ({self.seconds:.2f}s)"


def _leaf(rng, *shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, 1.0 + low, size=shape)
    return Tensor(data, requires_grad=True)


def _grad_error(fn: Callable[..., Tensor], inputs: list[Tensor], rng) -> float:
    """Worst relative error over inputs for the loss ``sum(fn(*inputs) * W)``."""
    probe = rng.normal(size=fn(*inputs).shape)

    def loss(*_):
        return tc.sum(fn(*inputs) * probe)

    for x in inputs:
        x.grad = None
    tc.backward(loss())
    worst = 0.0
    for x in inputs:
        numeric = finite_diff_grad(loss, x, 1e-5)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _timed(name: str, tol: float, fn: Callable[[], float]) -> CheckResult:
    start = time.perf_counter()
    err = fn()
    return CheckResult(name, err, tol, time.perf_counter() - start)


def primitive_gradient_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    mask = causal_mask(3, 2)
    idx = rng.integers(0, 4, size=(2, 3))
    cases = {
        "add (broadcast)": (lambda a, b: a + b, [_leaf(rng, 3, 4), _leaf(rng, 4)]),
        "sub": (lambda a, b: a - b, [_leaf(rng, 3, 4), _leaf(rng, 3, 4)]),
        "mul (broadcast)": (lambda a, b: a * b, [_leaf(rng, 2, 3, 4), _leaf(rng, 3, 1)]),
        "exp": (tc.exp, [_leaf(rng, 3, 4)]),
        "matmul": (tc.matmul, [_leaf(rng, 3, 3), _leaf(rng, 3, 3)]),
        "matmul (batched)": (tc.matmul, [_leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)]),
        "batched_contract_qk": (tc.batched_contract_qk, [_leaf(rng, 2, 3, 5), _leaf(rng, 2, 4, 5)]),
        "batched_contract_av": (tc.batched_contract_av, [_leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)]),
        "einsum": (lambda a, b: tc.einsum("bhtd,tmhd->bhtm", a, b), [_leaf(rng, 2, 2, 3, 4), _leaf(rng, 3, 5, 2, 4)]),
        "layer_norm": (lambda x, g, b: tc.layer_norm(x, g, b), [_leaf(rng, 4, 8), _leaf(rng, 8), _leaf(rng, 8)]),
        "masked_softmax": (lambda x: tc.masked_softmax(x, mask), [_leaf(rng, 2, 3, 5)]),
        "log_softmax": (tc.log_softmax, [_leaf(rng, 3, 6)]),
        "sigmoid": (tc.sigmoid, [_leaf(rng, 3, 4)]),
        "tanh": (tc.tanh, [_leaf(rng, 3, 4)]),
        "relu": (tc.relu, [_leaf(rng, 3, 4)]),
        "sum (axis)": (lambda x: tc.sum(x, axis=1), [_leaf(rng, 3, 4)]),
        "mean": (lambda x: tc.mean(x, axis=0), [_leaf(rng, 3, 4)]),
        "reshape+swapaxes": (lambda x: tc.swapaxes(tc.reshape(x, (2, 3, 2)), 0, 2), [_leaf(rng, 3, 4)]),
        "concat": (lambda a, b: tc.concat([a, b], axis=0), [_leaf(rng, 2, 3), _leaf(rng, 4, 3)]),
        "index": (lambda x: x[1:, ::2], [_leaf(rng, 3, 4)]),
        "gather_rows": (lambda x: tc.gather_rows(x, idx), [_leaf(rng, 4, 3)]),
        "take_last": (lambda x: tc.take_last(x, idx), [_leaf(rng, 2, 3, 4)]),
    }
    return [
        _timed(f"grad {name}", PRIMITIVE_TOL, lambda fn=fn, xs=xs: _grad_error(fn, xs, rng))
        for name, (fn, xs) in cases.items()
    ]


def _params_error(loss_fn: Callable[[], Tensor], params: dict[str, Tensor]) -> float:
    for p in params.values():
        p.grad = None
    tc.backward(loss_fn())
    worst = 0.0
    for p in params.values():
        numeric = finite_diff_grad(lambda _: loss_fn(), p, 1e-5)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def composite_gradient_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    D, H, d = 6, 2, 3
    attn = init_attention(D, H, d, rng)
    attn.u.data[...] = rng.normal(size=attn.u.shape)
    attn.v.data[...] = rng.normal(size=attn.v.shape)
    norm = LayerNormParams.init(D)
    E = _leaf(rng, 4, D)
    M = rng.normal(size=(3, D))
    probe = rng.normal(size=(4, D))
    params = dict(named_parameters({"attn": attn, "norm": norm, "E": E}))
    results.append(_timed("grad multi_head_attention", PRIMITIVE_TOL, lambda: _params_error(
        lambda: tc.sum(multi_head_attention(E, attn, norm) * probe), params)))
    results.append(_timed("grad relative_multi_head_attention", PRIMITIVE_TOL, lambda: _params_error(
        lambda: tc.sum(relative_multi_head_attention(M, E, attn, norm=norm) * probe), params)))

    for kind in GateKind:
        gate = init_gate(kind, D, 1.0, rng)
        x, y = _leaf(rng, 3, D), _leaf(rng, 3, D)
        gp = dict(named_parameters({"gate": gate, "x": x, "y": y}))
        gprobe = rng.normal(size=(3, D))
        results.append(_timed(f"grad gate {kind.value}", PRIMITIVE_TOL, lambda kind=kind, gate=gate, x=x, y=y, gp=gp, gprobe=gprobe:
                              _params_error(lambda: tc.sum(apply_gate(kind, x, y, gate) * gprobe), gp)))

    for variant in (Variant.TRXL, Variant.TRXL_I):
        results.append(_stack_check(StackConfig(variant=variant, n_layers=2, d_model=8, n_heads=2, head_dim=4, mem_len=2), rng))
    results.append(_stack_check(StackConfig(variant="gtrxl", n_layers=2, d_model=8, n_heads=2, head_dim=4,
                                            mem_len=2, gate="gru", b_g_init=0.5), rng))
    return results


def _stack_check(config: StackConfig, rng) -> CheckResult:
    blocks = init_stack(config, rng)
    for _, p in named_parameters(blocks):
        if p.data.ndim < 2 and not np.all(p.data == 1.0):
            p.data[...] += 0.1 * rng.normal(size=p.shape)  # move biases and u, v off zero
    E0 = _leaf(rng, 3, config.d_model)
    memory = MemoryState([rng.normal(size=(config.mem_len, config.d_model)) for _ in range(config.n_layers)],
                         config.mem_len)
    probe = rng.normal(size=(3, config.d_model))

    def loss():
        out, _ = stack_forward(config, blocks, memory, E0)
        return tc.sum(out * probe)

    params = dict(named_parameters({"blocks": blocks, "E0": E0}))
    name = f"grad {config.n_layers}-layer {config.variant.value} ({config.gate.value}) D={config.d_model}"
    return _timed(name, COMPOSITE_TOL, lambda: _params_error(loss, params))


def gradient_suite(seed: int = 0) -> list[CheckResult]:
    return primitive_gradient_checks(seed) + composite_gradient_checks(seed)


# ---------------------------------------------------------------------------
# oracle suite


def oracle_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    q, k = rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 4, 5))
    results.append(_timed("oracle batched_contract_qk", 1e-12, lambda: float(np.max(np.abs(
        tc.batched_contract_qk(q, k).data - oracles.loop_contract_qk(q, k))))))
    w, v = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    results.append(_timed("oracle batched_contract_av", 1e-12, lambda: float(np.max(np.abs(
        tc.batched_contract_av(w, v).data - oracles.loop_contract_av(w, v))))))

    x, g, b = rng.normal(size=(4, 8)), rng.normal(size=8), rng.normal(size=8)
    results.append(_timed("oracle layer_norm", ORACLE_TOL, lambda: float(np.max(np.abs(
        tc.layer_norm(x, g, b).data - oracles.loop_layer_norm(x, g, b))))))

    D, H, d = 6, 2, 3
    attn = init_attention(D, H, d, rng)
    attn.u.data[...] = rng.normal(size=(H, d))
    attn.v.data[...] = rng.normal(size=(H, d))
    attn.b_o.data[...] = rng.normal(size=D)
    norm = LayerNormParams.init(D)
    norm.gain.data[...] = rng.normal(size=D)
    E, M = rng.normal(size=(4, D)), rng.normal(size=(3, D))
    a = {name: t.data for name, t in named_parameters(attn)}
    for use_norm in (False, True):
        nrm = norm if use_norm else None
        ntuple = (norm.gain.data, norm.bias.data) if use_norm else None
        suffix = " + residual/LN" if use_norm else ""
        results.append(_timed(f"oracle multi_head_attention{suffix}", ORACLE_TOL, lambda nrm=nrm, ntuple=ntuple: float(np.max(np.abs(
            multi_head_attention(E, attn, nrm).data
            - oracles.loop_attention(E, a["w_q"], a["w_k"], a["w_v"], a["w_o"], a["b_o"], H, ntuple))))))
        results.append(_timed(f"oracle relative_mha T=4 mem=3{suffix}", ORACLE_TOL, lambda nrm=nrm, ntuple=ntuple: float(np.max(np.abs(
            relative_multi_head_attention(M, E, attn, norm=nrm).data
            - oracles.loop_relative_attention(M, E, a["w_q"], a["w_k"], a["w_v"], a["w_r"], a["u"], a["v"],
                                              a["w_o"], a["b_o"], H, ntuple))))))

    for kind in GateKind:
        gate = init_gate(kind, 5, rng.normal(), rng)
        gx, gy = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        arrays = {n: t.data for n, t in named_parameters(gate)}
        results.append(_timed(f"oracle gate {kind.value}", 1e-12, lambda kind=kind, gate=gate, gx=gx, gy=gy, arrays=arrays: float(np.max(np.abs(
            apply_gate(kind, gx, gy, gate).data - oracles.loop_gate(kind.value, gx, gy, arrays))))))
    return results
