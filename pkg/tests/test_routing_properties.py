import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from invariants import check_block
from stratmoe.experts import StratumLayout
from stratmoe.numerics import ParameterStore, Tensor
from stratmoe.routing import init_smoe_params, run_smoe_block, run_vanilla_block


@st.composite
def block_cases(draw):
    sizes = tuple(draw(st.lists(st.integers(1, 4), min_size=1, max_size=4)))
    layout = StratumLayout(sizes)
    k = draw(st.integers(1, min(2, sizes[-1])))
    T = draw(st.integers(1, 24))
    factor = draw(st.sampled_from([None, 0.25, 1.0, 2.0]))
    seed = draw(st.integers(0, 2**32 - 1))
    scale = draw(st.sampled_from([0.5, 1.0, 5.0]))
    return layout, k, T, factor, seed, scale


def build(layout, seed, d=5, d_ff=6, gate_scale=1.0):
    rng = np.random.default_rng(seed)
    gates, experts = init_smoe_params(ParameterStore(), "b", layout, d, d_ff, rng)
    for g in gates:
        g.weight.data *= gate_scale
        g.ln_gain.data[...] = rng.normal(1.0, 0.3, size=g.ln_gain.shape)
        g.ln_bias.data[...] = rng.normal(0.0, 0.3, size=g.ln_bias.shape)
    return gates, experts, rng


@given(block_cases())
@settings(max_examples=300, deadline=None)
def test_block_invariants(case):
    layout, k, T, factor, seed, scale = case
    gates, experts, rng = build(layout, seed, gate_scale=scale)
    x = Tensor(rng.normal(size=(T, 5)))
    out = run_smoe_block(x, layout, gates, experts, k, capacity_factor=factor)
    assert check_block(out, layout, gates, experts, k) == []


@given(block_cases())
@settings(max_examples=100, deadline=None)
def test_forced_uniform_invariants(case):
    layout, k, T, factor, seed, _ = case
    gates, experts, rng = build(layout, seed)
    x = Tensor(rng.normal(size=(T, 5)))
    out = run_smoe_block(x, layout, gates, experts, k, capacity_factor=factor,
                         router=np.random.default_rng(seed + 1))
    assert check_block(out, layout, gates, experts, k) == []


@given(st.integers(2, 8), st.integers(1, 30), st.integers(1, 2), st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_single_stratum_equals_vanilla(E, T, k, seed):
    layout = StratumLayout((E,))
    gates, experts, rng = build(layout, seed)
    x = Tensor(rng.normal(size=(T, 5)))
    a = run_smoe_block(x, layout, gates, experts, k, normalize=False, residual=False)
    b = run_vanilla_block(x, gates[0], experts, k)
    np.testing.assert_allclose(a.output.data, b.output.data, rtol=0, atol=1e-10)
    assert np.array_equal(a.rounds[0].dropped, b.rounds[0].dropped)


@given(block_cases())
@settings(max_examples=50, deadline=None)
def test_seed_determinism(case):
    layout, k, T, factor, seed, _ = case
    runs = []
    for _ in range(2):
        gates, experts, rng = build(layout, seed)
        x = Tensor(rng.normal(size=(T, 5)))
        runs.append(run_smoe_block(x, layout, gates, experts, k, capacity_factor=factor,
                                   router=np.random.default_rng(seed)))
    a, b = runs
    assert np.array_equal(a.output.data, b.output.data)
    assert np.array_equal(a.hops, b.hops) and np.array_equal(a.expert_evals, b.expert_evals)
