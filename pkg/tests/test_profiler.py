import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyncap.layers import AdaptiveLinear, DynamicLinear, FixedLinear, ModelGraph, consolidate
from dyncap.profiler import HEADER_NOTE, effective_flops, linear_cost, profile
from dyncap.rng import RngStream


def test_reference_layer_cost():
    rep = profile(ModelGraph([FixedLinear.create(257, 32, bias=False)]), frame_rate=62.5)
    assert rep.flops_per_frame == 16448
    assert rep.flops_per_second == 1_028_000
    assert rep.total_params == 257 * 32


def test_bias_counts_one_flop_per_output():
    assert linear_cost(10, 4, bias=True) == (44, 84)
    assert linear_cost(10, 4, bias=False) == (40, 80)


def test_empty_model():
    rep = profile(ModelGraph([]))
    assert rep.total_params == 0 and rep.flops_per_frame == 0 and rep.flops_per_second == 0


def gated(width=8, out=3):
    dcl = DynamicLinear.create(5, width, bias=True, rng=RngStream(0))
    return ModelGraph([dcl, AdaptiveLinear.create(dcl, out, rng=RngStream(1))])


def test_consolidated_ratio_is_exact():
    model = gated()
    model.layers[0].gate.set_lambdas([0.9, 0.1, 0.8, 0.2, 0.9, 0.9, 0.3, 0.7])
    before = profile(model)
    after = profile(consolidate(model, 0.5))
    kept = 5
    assert after.flops_per_frame == (2 * 5 * kept + kept) + (2 * kept * 3 + 3)
    assert after.flops_per_frame < before.flops_per_frame
    assert profile(model, threshold=0.5).flops_per_frame == after.flops_per_frame


def test_nothing_pruned_means_equal_cost():
    model = gated()
    assert profile(consolidate(model, 0.5)).flops_per_frame == profile(model).flops_per_frame


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(1, 50), st.integers(1, 10))
def test_flops_linear_in_out_dim(in_dim, out_dim, k):
    a = profile(ModelGraph([FixedLinear.create(in_dim, out_dim, bias=False)])).flops_per_frame
    b = profile(ModelGraph([FixedLinear.create(in_dim, k * out_dim, bias=False)])).flops_per_frame
    assert b == k * a


def test_effective_flops_examples():
    dcl = DynamicLinear.create(5, 8, bias=True)
    model = ModelGraph([dcl, AdaptiveLinear.create(dcl, 3, bias=False)])
    model.layers[0].gate.lambdas.assign(np.ones(8))
    assert effective_flops(model) == profile(model).flops_per_frame
    model.layers[0].gate.lambdas.assign(np.full(8, 0.5))
    assert effective_flops(model) == profile(model).flops_per_frame / 2


def test_effective_flops_ordered_mode():
    dcl = DynamicLinear.create(5, 8, gate_mode="ordered_K")
    model = ModelGraph([dcl, AdaptiveLinear.create(dcl, 3, bias=False)])
    dcl.gate.set_lambdas([0.5])
    # four units at 0.999
    assert np.isclose(effective_flops(model), 2 * 5 * 4 * 0.999 + 2 * 4 * 0.999 * 3)


def test_unsupported_layer_kind():
    class Conv:
        in_dim = out_dim = 1
        activation = "identity"

    model = ModelGraph([])
    model.layers.append(Conv())
    with pytest.raises(TypeError, match="Conv"):
        profile(model)
    with pytest.raises(TypeError, match="Conv"):
        effective_flops(model)


def test_report_outputs(tmp_path):
    rep = profile(gated())
    text = rep.table()
    assert HEADER_NOTE in text and "FLOP/s" in text
    rep.write_csv(tmp_path / "p.csv")
    with open(tmp_path / "p.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:5] == ["layer", "in_dim", "out_dim", "params", "flops_per_frame"]
    assert rows[-1][0] == "total" and int(rows[-1][4]) == rep.flops_per_frame
