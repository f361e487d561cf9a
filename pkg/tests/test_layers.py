import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnpassport.errors import PassportError, ShapeError
from nnpassport.layers import (Conv2d, ConvSpec, PassportEntry, PassportKind, PassportLayer, assemble_passport_block,
                               derive_hidden_params, parse_kind, passport_function, passport_layer_forward)
from nnpassport.models import build_model
from nnpassport.passports import gen_random_pattern
from nnpassport.tensor import Tensor, no_grad


def t(a):
    return Tensor(np.asarray(a, dtype=np.float32))


def layer_with(kind, cin=1, cout=1, k=1, pad=0, normalize=False, weight=None):
    conv = Conv2d(ConvSpec(cin, cout, kernel_size=k, padding=pad))
    if weight is not None:
        conv.weight.data = np.asarray(weight, dtype=np.float32)
    return PassportLayer(conv, parse_kind(kind), 0, normalize_input=normalize)


# passport function ----------------------------------------------------------

def test_passport_function_examples():
    np.testing.assert_array_equal(passport_function(t([[[[2]]]]), t(np.ones((1, 1, 2, 2)))).data, [2])
    assert not passport_function(t(np.ones((3, 1, 1, 1))), t(np.zeros((1, 1, 2, 2)))).data.any()
    np.testing.assert_array_equal(passport_function(t([[[[1]]], [[[-1]]]]), t(np.ones((1, 1, 3, 3)))).data, [1, -1])


def test_passport_function_shape_errors():
    with pytest.raises(ShapeError):
        passport_function(t(np.ones((2, 3, 1, 1))), t(np.ones((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        passport_function(t(np.ones((2, 1, 1, 1))), t(np.ones((2, 1, 2, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-4, 4))
def test_passport_function_scale_linearity(seed, a):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(4, 2, 3, 3)).astype(np.float64))
    p = rng.uniform(-1, 1, size=(1, 2, 5, 5))
    lhs = passport_function(w, Tensor(a * p), 1, 1).data
    rhs = a * passport_function(w, Tensor(p), 1, 1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


# variants and hidden params ---------------------------------------------------

def test_variant_parameter_sets():
    for kind, names in [(None, {"gamma", "beta"}), ("V1", {"beta"}), ("V2", {"gamma"}), ("V3", set())]:
        assert set(layer_with(kind).own_parameters()) == names
    assert PassportKind.V1.derives_gamma and not PassportKind.V1.derives_beta
    assert PassportKind.V2.derives_beta and not PassportKind.V2.derives_gamma
    assert PassportKind.V3.derives_gamma and PassportKind.V3.derives_beta


def test_switching_variants_changes_census():
    layer = layer_with(None, cout=4)
    counts = {}
    for kind in (None, PassportKind.V1, PassportKind.V2, PassportKind.V3):
        layer.set_kind(kind)
        counts[kind] = sum(p.size for p in layer.own_parameters().values())
    assert counts == {None: 8, PassportKind.V1: 4, PassportKind.V2: 4, PassportKind.V3: 0}


def test_derive_hidden_params_v1_uses_trainable_beta():
    layer = layer_with("V1", weight=[[[[2.0]]]])
    layer.trainable_beta.data[:] = 0.7
    for s in (np.ones((1, 1, 2, 2)), -np.ones((1, 1, 2, 2))):
        hp = derive_hidden_params(layer, PassportEntry(0, t(s), None))
        np.testing.assert_array_equal(hp.beta.data, np.float32([0.7]))
        np.testing.assert_array_equal(hp.gamma.data, [2.0 * s.mean()])


def test_derive_hidden_params_missing_component():
    with pytest.raises(PassportError):
        derive_hidden_params(layer_with("V3"), PassportEntry(0, t(np.ones((1, 1, 2, 2))), None))
    with pytest.raises(PassportError):
        derive_hidden_params(layer_with("V2"), None)


def test_derive_hidden_params_deterministic():
    rng = np.random.default_rng(0)
    layer = layer_with("V3", cin=2, cout=3, k=3, pad=1, weight=rng.normal(size=(3, 2, 3, 3)))
    entry = PassportEntry(0, t(rng.uniform(-1, 1, (1, 2, 6, 6))), t(rng.uniform(-1, 1, (1, 2, 6, 6))))
    a, b = derive_hidden_params(layer, entry), derive_hidden_params(layer, entry)
    assert a.gamma.data.tobytes() == b.gamma.data.tobytes()
    assert a.beta.data.tobytes() == b.beta.data.tobytes()


def test_random_passport_changes_gamma():
    rng = np.random.default_rng(1)
    layer = layer_with("V3", cin=2, cout=4, k=3, pad=1, weight=rng.normal(size=(4, 2, 3, 3)))
    p = PassportEntry(0, t(rng.uniform(-1, 1, (1, 2, 6, 6))), t(rng.uniform(-1, 1, (1, 2, 6, 6))))
    ref = derive_hidden_params(layer, p).gamma.data
    differs = 0
    for _ in range(100):
        s = PassportEntry(0, t(rng.uniform(-1, 1, (1, 2, 6, 6))), t(rng.uniform(-1, 1, (1, 2, 6, 6))))
        differs += bool(np.any(derive_hidden_params(layer, s).gamma.data != ref))
    assert differs == 100


# forward ---------------------------------------------------------------------

def test_forward_identity_and_arithmetic():
    layer = layer_with(None)
    x = t(np.random.default_rng(2).normal(size=(2, 1, 3, 3)))
    np.testing.assert_array_equal(passport_layer_forward(layer, x, None).data, x.data)
    layer.trainable_gamma.data[:] = 2
    layer.trainable_beta.data[:] = -1
    np.testing.assert_array_equal(passport_layer_forward(layer, t([[[[0.5]]]]), None).data, [[[[0.0]]]])


def test_forward_constant_channel_gives_beta():
    layer = layer_with(None, normalize=True)
    layer.trainable_gamma.data[:] = 3
    layer.trainable_beta.data[:] = 0.25
    out = passport_layer_forward(layer, t(np.full((4, 1, 2, 2), 5.0)), None, training=True)
    np.testing.assert_allclose(out.data, 0.25)


def test_forward_channel_mismatch():
    with pytest.raises(ShapeError):
        passport_layer_forward(layer_with(None, cout=2), t(np.zeros((1, 3, 2, 2))), None)


def test_running_statistics_momentum():
    layer = layer_with(None, cout=1, normalize=True)
    x = np.arange(8, dtype=np.float32).reshape(2, 1, 2, 2)
    passport_layer_forward(layer, t(x), None, training=True)
    np.testing.assert_allclose(layer.running_mean, [0.1 * x.mean()], rtol=1e-6)
    np.testing.assert_allclose(layer.running_var, [0.9 + 0.1 * x.var(ddof=1)], rtol=1e-6)
    with no_grad():
        out = passport_layer_forward(layer, t(x), None, training=False)
    ref = (x - layer.running_mean[0]) / np.sqrt(layer.running_var[0] + 1e-5)
    np.testing.assert_allclose(out.data, ref, rtol=1e-5)


# blocks ------------------------------------------------------------------------

def test_block_zero_input_gives_relu_beta():
    block = assemble_passport_block([ConvSpec(2, 3, kernel_size=3, padding=1)], PassportKind.V3, normalize_input=False)
    rng = np.random.default_rng(3)
    block.convs[0].weight.data = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    entry = {0: PassportEntry(0, t(rng.uniform(-1, 1, (1, 2, 4, 4))), t(rng.uniform(-1, 1, (1, 2, 4, 4))))}
    out = block.forward(t(np.zeros((1, 2, 4, 4))), entry)
    beta = derive_hidden_params(block.passports[0], entry[0]).beta.data
    np.testing.assert_allclose(out.data, np.broadcast_to(np.maximum(beta, 0)[None, :, None, None], out.shape))


def test_residual_block_preserves_shape():
    block = assemble_passport_block([ConvSpec(4, 4), ConvSpec(4, 4)], PassportKind.V3, residual=True)
    shapes = {0: (1, 4, 5, 5), 1: (1, 4, 5, 5)}
    passport = gen_random_pattern(shapes, 0)
    out = block.forward(t(np.random.default_rng(4).normal(size=(2, 4, 5, 5))), passport.entry_map())
    assert out.shape == (2, 4, 5, 5)
    with pytest.raises(ShapeError):
        assemble_passport_block([ConvSpec(4, 8), ConvSpec(8, 8)], PassportKind.V3, residual=True)


def test_v3_block_census_only_conv_weights():
    block = assemble_passport_block([ConvSpec(1, 4)], PassportKind.V3)
    assert all(not pl.own_parameters() for pl in block.passports)
    for kind in ("V3", "V1"):
        model = build_model(kind=kind, name="miniresnet")
        names = set(model.named_parameters())
        gammas = {n for n in names if n.endswith(".gamma")}
        betas = {n for n in names if n.endswith(".beta")}
        assert not gammas
        assert len(betas) == (0 if kind == "V3" else len(model.passport_layers()))


def test_bound_passport_shapes_fit_convolutions():
    for name in ("mininet", "miniresnet"):
        model = build_model(name=name)
        passport = gen_random_pattern(model, 0)
        model.bind(passport)
        for pl in model.passport_layers():
            e = passport.entry_map()[pl.layer_index]
            assert derive_hidden_params(pl, e).gamma.shape == (pl.channels,)
