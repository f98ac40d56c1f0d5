import numpy as np
import pytest

from gtrxl import tensor as tc
from gtrxl.attention import MemoryState
from gtrxl.blocks import (
    GateKind,
    GateParams,
    StackConfig,
    Variant,
    apply_gate,
    block_forward,
    component_counts,
    count_params,
    enumerate_params,
    init_gate,
    init_stack,
    param_report,
    stack_forward,
)
from gtrxl.checkpoint import load_into, named_parameters, read_checkpoint, save_checkpoint
from gtrxl.oracles import loop_gate
from gtrxl.tensor import ContractError, DimensionError, Tensor

SIGMOID = lambda a: 1.0 / (1.0 + np.exp(-a))  # noqa: E731


def zero_gate(kind, width, b):
    gate = init_gate(kind, width, b, np.random.default_rng(0))
    for _, p in named_parameters(gate):
        if p.ndim == 2:
            p.data[...] = 0.0
    return gate


def zero_submodules(blocks):
    """Zero every attention and MLP weight so both submodules output exactly 0."""
    for block in blocks:
        for _, p in named_parameters([block.attention, block.mlp]):
            p.data[...] = 0.0


# --- gates ---------------------------------------------------------------------------


def test_residual_gate_adds(rng):
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_array_equal(apply_gate("residual", x, y, GateParams(GateKind.RESIDUAL)).data, x + y)


def test_gru_gate_identity_limit(rng):
    gate = init_gate("gru", 6, 20.0, rng)
    x, y = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    np.testing.assert_allclose(apply_gate("gru", x, y, gate).data, x, atol=1e-6)


def test_highway_with_zero_weights_averages(rng):
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_array_equal(apply_gate("highway", x, y, zero_gate("highway", 4, 0.0)).data, 0.5 * x + 0.5 * y)


def test_output_with_zero_weights_halves_submodule(rng):
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_array_equal(apply_gate("output", x, y, zero_gate("output", 4, 0.0)).data, x + 0.5 * y)


def test_gru_forced_update_gate(rng):
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    out = apply_gate("gru", x, y, zero_gate("gru", 4, -20.0)).data
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


@pytest.mark.parametrize("kind", [k.value for k in GateKind])
def test_gate_matches_scalar_loop_oracle(rng, kind):
    gate = init_gate(kind, 5, rng.normal(), rng)
    x, y = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    expected = loop_gate(kind, x, y, {n: t.data for n, t in named_parameters(gate)})
    np.testing.assert_allclose(apply_gate(kind, x, y, gate).data, expected, rtol=0, atol=1e-12)


def test_gate_kind_mismatch_is_contract_error(rng):
    with pytest.raises(ContractError):
        apply_gate("gru", np.ones((1, 4)), np.ones((1, 4)), init_gate("output", 4, 1.0, rng))


def test_gate_missing_field_is_contract_error(rng):
    gate = init_gate("gru", 4, 1.0, rng)
    gate.w_z = None
    with pytest.raises(ContractError):
        apply_gate("gru", np.ones((1, 4)), np.ones((1, 4)), gate)


def test_gate_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        apply_gate("residual", np.ones((2, 4)), np.ones((3, 4)), GateParams(GateKind.RESIDUAL))


def test_init_gate_gru_update_gate_mean():
    # zero weights: z = sigmoid(-b_g) and h = 0, so g(x, y) = (1 - z) x
    gate = zero_gate("gru", 4, 2.0)
    x = np.ones((1, 4))
    z = 1.0 - apply_gate("gru", x, np.ones((1, 4)), gate).data
    np.testing.assert_allclose(z, SIGMOID(-2.0), atol=1e-12)
    assert SIGMOID(-2.0) == pytest.approx(0.119, abs=1e-3)


def test_init_gate_output_saturated(rng):
    gate = init_gate("output", 6, 20.0, rng)
    x, y = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    np.testing.assert_allclose(apply_gate("output", x, y, gate).data, x, atol=1e-6)


def test_init_gate_fields_per_kind(rng):
    expected = {
        "residual": set(),
        "input": {"w_g"},
        "output": {"w_g", "b_g"},
        "highway": {"w_g", "b_g"},
        "sigtanh": {"w_g", "u_g", "b_g"},
        "gru": {"w_g", "u_g", "b_g", "w_r", "u_r", "w_z", "u_z"},
    }
    for kind, fields in expected.items():
        gate = init_gate(kind, 8, 2.0, rng)
        assert {n for n, _ in named_parameters(gate)} == fields
        if "b_g" in fields:
            assert gate.b_g.item() == 2.0


def test_init_gate_weight_variance():
    gate = init_gate("gru", 200, 2.0, np.random.default_rng(0))
    assert gate.w_z.data.var() == pytest.approx(1.0 / 200, rel=0.05)


# --- blocks --------------------------------------------------------------------------


def cfg(variant, gate=None, L=2, D=8, H=2, b_g=2.0, mem=4):
    return StackConfig(variant=variant, gate=gate, n_layers=L, d_model=D, n_heads=H, head_dim=D // H,
                       mem_len=mem, b_g_init=b_g)


@pytest.mark.parametrize("gate", ["gru", "output", "highway", "sigtanh"])
def test_gtrxl_saturated_block_is_identity(rng, gate):
    config = cfg("gtrxl", gate, L=1, b_g=20.0)
    block = init_stack(config, rng)[0]
    E = rng.normal(size=(5, 8))
    out = block_forward(config.variant, block, rng.normal(size=(4, 8)), E).data
    np.testing.assert_allclose(out, E, atol=1e-6)


def test_trxl_i_zero_submodules_is_identity(rng):
    config = cfg("trxl-i")
    blocks = init_stack(config, rng)
    zero_submodules(blocks)
    E = rng.normal(size=(5, 8))
    out, _ = stack_forward(config, blocks, None, E)
    np.testing.assert_array_equal(out.data, E)


def test_trxl_zero_submodules_is_double_layer_norm(rng):
    config = cfg("trxl", L=1)
    blocks = init_stack(config, rng)
    zero_submodules(blocks)
    E = rng.normal(2.0, 3.0, size=(5, 8))
    out = block_forward("trxl", blocks[0], None, E).data
    ones, zeros = np.ones(8), np.zeros(8)
    expected = tc.layer_norm(tc.layer_norm(E, ones, zeros), ones, zeros).data
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert np.abs(out - E).max() > 0.5  # no identity path


def test_stack_of_one_equals_block(rng):
    config = cfg("gtrxl", "gru", L=1)
    blocks = init_stack(config, rng)
    M, E = rng.normal(size=(4, 8)), rng.normal(size=(3, 8))
    out, _ = stack_forward(config, blocks, MemoryState([M], 4), E)
    np.testing.assert_array_equal(out.data, block_forward("gtrxl", blocks[0], M, E).data)


def test_stack_layer_count_mismatch(rng):
    config = cfg("gtrxl", "gru")
    with pytest.raises(ContractError):
        stack_forward(config, init_stack(config, rng)[:1], None, np.zeros((2, 8)))
    with pytest.raises(ContractError):
        stack_forward(config, init_stack(config, rng), MemoryState.empty(3, 8, 4), np.zeros((2, 8)))


def test_block_memory_width_mismatch(rng):
    config = cfg("gtrxl", "gru", L=1)
    with pytest.raises(DimensionError):
        block_forward("gtrxl", init_stack(config, rng)[0], np.zeros((2, 6)), np.zeros((2, 8)))


def test_stack_memory_holds_layer_inputs(rng):
    config = cfg("trxl-i", mem=3)
    blocks = init_stack(config, rng)
    E0 = rng.normal(size=(3, 8))
    _, memory = stack_forward(config, blocks, None, E0)
    np.testing.assert_array_equal(memory.layers[0], E0)
    first = block_forward("trxl-i", blocks[0], None, E0).data
    np.testing.assert_array_equal(memory.layers[1], first)


def test_four_layer_identity_at_saturation(rng):
    config = cfg("gtrxl", "gru", L=4, D=16, H=4, b_g=20.0)
    blocks = init_stack(config, rng)
    E0 = rng.normal(size=(6, 16))
    out, _ = stack_forward(config, blocks, None, E0)
    assert np.abs(out.data - E0).max() < 1e-5


@pytest.mark.parametrize("gate", ["gru", "output"])
def test_identity_deviation_monotone_in_gate_bias(gate):
    rng = np.random.default_rng(7)
    E0 = rng.normal(size=(6, 16))
    devs = []
    for b in (0.0, 2.0, 6.0, 20.0):
        config = cfg("gtrxl", gate, L=4, D=16, H=4, b_g=b)
        blocks = init_stack(config, np.random.default_rng(11))  # same weights for every b
        out, _ = stack_forward(config, blocks, None, E0)
        devs.append(np.abs(out.data - E0).max())
    assert all(a >= b for a, b in zip(devs, devs[1:])), devs


# --- gradient flow ---------------------------------------------------------------------


def input_gradient(config, seed=0, T=3):
    rng = np.random.default_rng(seed)
    blocks = init_stack(config, rng)
    E0 = Tensor(rng.normal(size=(T, config.d_model)), requires_grad=True)
    out, _ = stack_forward(config, blocks, None, E0)
    tc.backward(tc.sum(out))
    return E0.grad


@pytest.mark.parametrize("gate", ["gru", "output", "highway", "sigtanh"])
def test_gradient_identity_component_saturated(gate):
    for seed in range(3):
        grad = input_gradient(cfg("gtrxl", gate, L=2, D=8, b_g=20.0), seed)
        assert np.abs(grad - 1.0).max() < 1e-5


@pytest.mark.xfail(strict=True, reason="with variance-1/fan_in weights the deviation at b_g=2 is about 1-2, "
                                       "not below 0.5; see the decisions ledger")
def test_gradient_identity_component_at_default_bias():
    for seed in range(3):
        grad = input_gradient(cfg("gtrxl", "gru", L=2, D=8, b_g=2.0), seed)
        assert np.abs(grad - 1.0).max() < 0.5


def test_trxl_has_no_identity_gradient_path():
    # sum(LayerNorm(x)) is constant in x, so the canonical block passes no gradient at all
    grad = input_gradient(cfg("trxl", L=2, D=8))
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)
    assert np.abs(grad - 1.0).max() > 0.5


def test_trxl_i_identity_path_with_silent_submodules(rng):
    config = cfg("trxl-i", L=3)
    blocks = init_stack(config, rng)
    zero_submodules(blocks)
    E0 = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    out, _ = stack_forward(config, blocks, None, E0)
    tc.backward(tc.sum(out))
    np.testing.assert_array_equal(E0.grad, np.ones((3, 8)))


# --- parameter accounting --------------------------------------------------------------


def random_config(rng):
    variant = rng.choice(["trxl", "trxl-i", "gtrxl"])
    gate = str(rng.choice([k.value for k in GateKind if k is not GateKind.RESIDUAL])) if variant == "gtrxl" else None
    H = int(rng.integers(1, 4))
    d = 2 * int(rng.integers(1, 4))
    return StackConfig(variant=str(variant), gate=gate, n_layers=int(rng.integers(0, 4)), d_model=H * d,
                       n_heads=H, head_dim=d, d_ff=int(rng.integers(1, 20)), mem_len=int(rng.integers(0, 5)))


def test_count_params_matches_registry_on_random_configs():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        config = random_config(rng)
        assert count_params(config) == enumerate_params(init_stack(config, rng)), config


def test_count_params_zero_layers():
    assert count_params(cfg("gtrxl", "gru", L=0)) == 0
    assert param_report(cfg("gtrxl", "gru", L=0)).rstrip().endswith("0")


def test_residual_vs_gru_difference():
    L, D = 3, 8
    res = count_params(StackConfig(variant="trxl-i", n_layers=L, d_model=D, n_heads=2, head_dim=4))
    gru = count_params(StackConfig(variant="gtrxl", gate="gru", n_layers=L, d_model=D, n_heads=2, head_dim=4))
    assert gru - res == L * 2 * (6 * D * D + 1)


def test_doubling_heads_matches_formula(rng):
    a = StackConfig(variant="gtrxl", n_layers=2, d_model=8, n_heads=2, head_dim=4)
    b = StackConfig(variant="gtrxl", n_layers=2, d_model=16, n_heads=4, head_dim=4)
    for config in (a, b):
        assert component_counts(config)["attention"] == enumerate_params([blk.attention for blk in init_stack(config, rng)])


def test_thin_config_has_fewer_params():
    wide = StackConfig(variant="gtrxl", n_layers=4, d_model=32, n_heads=4, head_dim=8)
    thin = StackConfig(variant="gtrxl", n_layers=4, d_model=16, n_heads=2, head_dim=8)
    assert count_params(thin) < count_params(wide)


def test_param_report_lists_components_and_total():
    config = cfg("gtrxl", "gru")
    report = param_report(config)
    for name in ("attention", "mlp", "norms", "gates", "total"):
        assert name in report
    assert f"{count_params(config):,d}" in report


def test_stack_config_validation():
    with pytest.raises(ValueError):
        StackConfig(variant="gtrxl", d_model=8, n_heads=3, head_dim=3)
    with pytest.raises(ValueError):
        StackConfig(variant="trxl", gate="gru")
    assert StackConfig(variant="trxl").gate is GateKind.RESIDUAL
    assert StackConfig(variant="gtrxl").gate is GateKind.GRU
    assert StackConfig(variant="gtrxl", d_model=8, n_heads=2, head_dim=4).d_ff == 32
    c = StackConfig(variant="trxl-i", n_layers=3)
    assert StackConfig.from_dict(c.to_dict()) == c and c.variant is Variant.TRXL_I


# --- checkpoints -------------------------------------------------------------------------


def test_checkpoint_round_trip_bytes(tmp_path, rng):
    config = cfg("gtrxl", "gru")
    blocks = init_stack(config, rng)
    save_checkpoint(tmp_path / "a", blocks, {"note": "x"})
    arrays, meta = read_checkpoint(tmp_path / "a")
    other = init_stack(config, np.random.default_rng(99))
    load_into(other, arrays)
    save_checkpoint(tmp_path / "b", other, meta)
    for name in ("manifest.json", "params.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for (_, p), (_, q) in zip(named_parameters(blocks), named_parameters(other)):
        np.testing.assert_array_equal(p.data, q.data)


def test_checkpoint_blob_is_little_endian_f8(tmp_path):
    t = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    save_checkpoint(tmp_path, {"t": t})
    assert (tmp_path / "params.bin").read_bytes() == np.array([1.5, -2.0], dtype="<f8").tobytes()


def test_checkpoint_mismatch_rejected(tmp_path, rng):
    save_checkpoint(tmp_path, init_stack(cfg("gtrxl", "gru", L=1), rng))
    arrays, _ = read_checkpoint(tmp_path)
    with pytest.raises(ValueError):
        load_into(init_stack(cfg("gtrxl", "gru", L=2), rng), arrays)
