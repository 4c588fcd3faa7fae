import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyncap import autodiff as ad
from dyncap.autodiff import ShapeError, Tape, Tensor, backward
from dyncap.gate import LAMBDA_MAX
from dyncap.layers import (
    AdaptiveLinear,
    DynamicLinear,
    FixedLinear,
    ModelGraph,
    active_units,
    consolidate,
    dumps,
    forward,
    load_model,
    loads,
    save_model,
    summary,
)
from dyncap.rng import RngStream
from dyncap.trainer import AdamState, adam_step, l1_loss


def random_chain(seed, activation="tanh", gate_mode="per_unit", bias=True):
    rng = RngStream(seed)
    first = FixedLinear.create(5, 7, activation=activation, rng=rng.child(0))
    dcl = DynamicLinear.create(7, 6, bias=bias, activation=activation, rng=rng.child(1), gate_mode=gate_mode)
    acl = AdaptiveLinear.create(dcl, 4, activation=activation, rng=rng.child(2))
    return ModelGraph([first, dcl, acl])


def test_fixed_linear_forward_is_affine():
    layer = FixedLinear.create(3, 2, rng=RngStream(0))
    layer.bias.assign([0.5, -1.0])
    x = np.array([[1.0, 2.0, 3.0]])
    out = forward(ModelGraph([layer]), x).data
    assert np.allclose(out, x @ layer.weight.data + layer.bias.data, atol=1e-15)


def test_full_capacity_dcl_matches_fixed_layer():
    dcl = DynamicLinear.create(4, 3, bias=True, rng=RngStream(1))
    fcl = FixedLinear(dcl.weight, dcl.bias)
    x = RngStream(2).normal((5, 4))
    gated = forward(ModelGraph([dcl]), x).data
    plain = forward(ModelGraph([fcl]), x).data
    assert np.allclose(gated, plain * math.sqrt(LAMBDA_MAX), atol=1e-15)


def test_near_zero_gates_attenuate_downstream_gradient():
    dcl = DynamicLinear.create(4, 6, rng=RngStream(3))
    dcl.gate.lambda_min = 1e-3
    eps = 1e-3
    dcl.gate.set_lambdas([LAMBDA_MAX, LAMBDA_MAX, eps, LAMBDA_MAX, eps, LAMBDA_MAX])
    acl = AdaptiveLinear.create(dcl, 2, rng=RngStream(4))
    model = ModelGraph([dcl, acl])
    x = RngStream(5).normal((16, 4))
    with Tape() as tape:
        loss = ad.mean(ad.square(forward(model, x)))
    g = backward(tape, loss, [acl.weight])[acl.weight]
    open_rows = np.abs(g[[0, 1, 3, 5]]).mean()
    # rows of nearly closed units see their input scaled by sqrt(eps)
    assert np.abs(g[[2, 4]]).max() < 0.05 * open_rows


def test_width_mismatch_names_layer():
    model = random_chain(0)
    with pytest.raises(ShapeError, match="layer 0"):
        forward(model, np.ones((2, 3)))
    with pytest.raises(ShapeError, match="layer 1"):
        ModelGraph([FixedLinear.create(3, 4), FixedLinear.create(5, 2)])


def test_graph_structure_rules():
    dcl = DynamicLinear.create(3, 4)
    acl = AdaptiveLinear.create(dcl, 2)
    with pytest.raises(ValueError):
        ModelGraph([dcl, FixedLinear.create(4, 2)])
    with pytest.raises(ValueError):
        ModelGraph([FixedLinear.create(3, 4), acl])
    with pytest.raises(ValueError):
        FixedLinear.create(2, 2, activation="relu")
    assert len(ModelGraph([dcl])) == 1


def test_parameter_count():
    model = random_chain(0)
    assert model.n_params() == (5 * 7 + 7) + (7 * 6 + 6) + (6 * 4 + 4)


def test_active_units_examples():
    dcl = DynamicLinear.create(3, 64)
    assert active_units(dcl) == 64
    dcl.gate.set_lambdas([0.0625] * 32 + [LAMBDA_MAX] * 32)
    assert active_units(dcl, 0.5) == 32


def test_consolidate_drops_low_units():
    dcl = DynamicLinear.create(3, 4, rng=RngStream(0))
    dcl.gate.set_lambdas([0.999, 0.999, 0.01, 0.999])
    out = consolidate(ModelGraph([dcl]), 0.5)
    assert out.layers[0].out_dim == 3
    assert all(type(layer) is FixedLinear for layer in out.layers)


def test_consolidate_full_capacity_scales_weights():
    dcl = DynamicLinear.create(3, 4, rng=RngStream(0))
    out = consolidate(ModelGraph([dcl]), 0.5)
    assert np.allclose(out.layers[0].weight.data, dcl.weight.data * math.sqrt(LAMBDA_MAX), atol=1e-15)


def test_degenerate_consolidation():
    dcl = DynamicLinear.create(3, 2)
    dcl.gate.set_lambdas([0.1, 0.2])
    with pytest.raises(ValueError, match="degenerate consolidation"):
        consolidate(ModelGraph([dcl]), 0.5)


def test_consolidate_threshold_range():
    with pytest.raises(ValueError):
        consolidate(random_chain(0), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["identity", "tanh", "sigmoid"]), st.booleans(),
       st.lists(st.booleans(), min_size=6, max_size=6).filter(any), st.floats(0.05, 0.95))
def test_consolidation_equivalence(seed, activation, bias, keep, threshold):
    model = random_chain(seed, activation, bias=bias)
    r = np.random.default_rng(seed)
    lam = np.where(keep, r.uniform(threshold, LAMBDA_MAX, size=6), 0.0)
    lam = np.where(keep & (lam <= threshold), LAMBDA_MAX, lam)
    model.layers[1].gate.set_lambdas(lam)
    before = model.n_params()
    fixed = consolidate(model, threshold)
    x = RngStream(seed).normal((8, 5))
    assert np.max(np.abs(forward(model, x).data - forward(fixed, x).data)) < 1e-9
    assert fixed.layers[1].out_dim == fixed.layers[2].in_dim == int(np.sum(keep))
    assert fixed.n_params() <= before


def test_consolidation_equivalence_ordered_mode():
    model = random_chain(3, "sigmoid", gate_mode="ordered_K")
    model.layers[1].gate.set_lambdas([4 / 6])
    fixed = consolidate(model, 0.5)
    x = RngStream(1).normal((8, 5))
    assert fixed.layers[1].out_dim == 4
    assert np.max(np.abs(forward(model, x).data - forward(fixed, x).data)) < 1e-12


def test_dcl_with_frozen_gate_matches_fixed_baseline():
    # noise off and lambda at its maximum: the gate is a constant scale
    rng = RngStream(8)
    dcl = DynamicLinear.create(6, 3, bias=True, rng=rng.child("w"))
    s = math.sqrt(LAMBDA_MAX)
    fcl = FixedLinear(Tensor(dcl.weight.data, requires_grad=True), Tensor(dcl.bias.data, requires_grad=True))
    gated, plain = ModelGraph([dcl]), ModelGraph([fcl])
    sa, sb = AdamState(), AdamState()
    for step in range(50):
        x = rng.child("x").at(step).normal((16, 6))
        y = rng.child("y").at(step).normal((16, 3))
        with Tape() as t1:
            la = l1_loss(y, forward(gated, x, training=True, noise=None, step=step, track_sigma=False))
        with Tape() as t2:
            lb = l1_loss(y, ad.scale(forward(plain, x), s))
        assert abs(la.item() - lb.item()) < 1e-6
        adam_step(gated.parameters(), backward(t1, la, gated.parameters()), sa)
        adam_step(plain.parameters(), backward(t2, lb, plain.parameters()), sb)


def test_training_forward_is_addressed_by_step():
    model = random_chain(1)
    model.layers[1].gate.set_lambdas([0.5] * 6)
    x = np.ones((2, 5))
    noise = RngStream(0).child("noise")
    a = forward(model, x, training=True, noise=noise, step=3, track_sigma=False).data
    b = forward(model, x, training=True, noise=noise, step=3, track_sigma=False).data
    c = forward(model, x, training=True, noise=noise, step=4, track_sigma=False).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_training_forward_updates_sigma():
    model = random_chain(2)
    forward(model, RngStream(0).normal((32, 5)), training=True, noise=RngStream(1))
    assert not np.array_equal(model.layers[1].gate.sigma_ema, np.ones(6))


@pytest.mark.parametrize("mode", ["per_unit", "ordered_K"])
def test_serialization_roundtrip(tmp_path, mode):
    model = random_chain(4, "sigmoid", gate_mode=mode)
    gate = model.layers[1].gate
    gate.set_lambdas([0.3, 0.999, 0.7, 0.2, 0.9, 0.6] if mode == "per_unit" else [0.55])
    gate.sigma_ema = np.arange(1.0, 7.0)
    path = tmp_path / "m.dcm"
    save_model(model, path)
    back = load_model(path)
    assert dumps(back) == path.read_bytes()
    assert back.layers[1].gate.mode == mode
    assert back.layers[2].link is back.layers[1]
    x = RngStream(0).normal((3, 5))
    assert np.array_equal(forward(model, x).data, forward(back, x).data)


def test_corrupt_model_files():
    blob = dumps(random_chain(0))
    with pytest.raises(ValueError):
        loads(b"NOTAMODEL" + blob[9:])
    with pytest.raises(ValueError):
        loads(blob[:-8])
    with pytest.raises(ValueError):
        loads(blob + b"\0" * 8)


def test_summary_mentions_every_layer():
    text = summary(random_chain(0))
    assert "DCL" in text and "ACL" in text and "FCL" in text
    assert "active=6/6" in text
    assert text.strip().endswith(f"total parameters: {random_chain(0).n_params()}")
