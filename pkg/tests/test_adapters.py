import string

import numpy as np
import pytest

from tenvoo.adapters import (
    AdapterError,
    AdapterKind,
    ConvKernelDims,
    LinearDims,
    build_adapter,
    build_lora2d,
    build_lora3d,
    build_quanta_linear,
    build_tenvoo_l,
    build_tenvoo_q,
    degenerate_to_2d,
    delta_node,
    formula_param_count,
    init_adapter,
    materialize_delta,
    merge,
    param_count,
    state_from_topology,
    superdiagonal,
    topology_to_dict,
    unmerge,
)
from tenvoo import autodiff as ad
from tenvoo.tensor_core import TensorNetwork, contract_network


def eq6_l(i, o, k, r):
    return (i[0] * i[1] + o[0] * o[1]) * r**2 + (i[2] + o[2] + sum(k) + 1) * r**3 + 2 * r**4


def eq6_q(i, o, k, r):
    return (i[0] * i[1] + o[0] * o[1] + k[1]) * r**2 + (i[2] + o[2] + k[0] + k[2]) * r**3 + 3 * r**4


def network_oracle(state, values=None):
    """Materialize via one einsum over the state's topology, then lay out as a kernel."""
    cores = dict(values or state.core_values())
    letters = iter(string.ascii_letters)
    lab = {}
    for ca, la, cb, lb in state.edges:
        c = next(letters)
        lab[(ca, la)] = lab[(cb, lb)] = c
    for leg in state.open_legs:
        lab[tuple(leg)] = next(letters)
    names = list(cores)
    subs = ",".join("".join(lab[(n, j)] for j in range(cores[n].ndim)) for n in names)
    out = "".join(lab[tuple(l)] for l in state.open_legs)
    t = np.einsum(subs + "->" + out, *[cores[n] for n in names], optimize="greedy")
    return np.transpose(t, state.out_perm).reshape(state.kernel_shape)


def randomize(state, rng, scale=0.5):
    for p in state.params.values():
        p.value = rng.normal(0.0, scale, size=p.shape)


# -- counts ------------------------------------------------------------------

def test_anchor_counts():
    d8 = ConvKernelDims.from_shape(8, 8, 3)
    assert param_count(build_tenvoo_l(d8, 2)) == 176
    assert param_count(build_tenvoo_q(d8, 2)) == 172
    d64 = ConvKernelDims.from_shape(64, 64, 3)
    assert param_count(build_tenvoo_l(d64, 4)) == 2176
    assert param_count(build_tenvoo_l(d8, 1)) == 24


@pytest.mark.parametrize("kind", ["TenVOO-L", "TenVOO-Q"])
def test_counts_match_formula_on_odd_shapes(kind):
    for shape in [(6, 10, 3, 1, 5), (12, 7, 1, 3, 3), (30, 16, 5, 3, 1)]:
        st = build_adapter(kind, shape, 3)
        assert param_count(st) == formula_param_count(kind, st.dims, 3)
        oracle = eq6_l if kind == "TenVOO-L" else eq6_q
        assert param_count(st) == oracle(st.dims.i, st.dims.o, shape[2:], 3)


def test_lora_and_quanta_counts():
    assert param_count(build_lora3d(ConvKernelDims.from_shape(8, 4, 3), 2)) == 2 * (4 * 27 + 8)
    assert param_count(build_lora2d(8, 4, 3, 3, 2)) == 2 * (4 * 3 + 8 * 3)
    st = build_quanta_linear(8, 8, 1)
    assert param_count(st) == 12
    assert param_count(st) == formula_param_count("QuantaLinear", st.dims, 1)


# -- materialization ----------------------------------------------------------

@pytest.mark.parametrize("kind,shape", [
    ("TenVOO-L", (8, 6, 3, 3, 3)), ("TenVOO-Q", (8, 6, 3, 3, 3)),
    ("TenVOO-L", (4, 9, 1, 3, 5)), ("TenVOO-Q", (12, 5, 3, 1, 2)),
    ("LoRA3D", (6, 4, 3, 3, 3)), ("LoRA2D", (6, 4, 3, 2)), ("QuantaLinear", (12, 8)),
])
def test_materialize_matches_einsum(kind, shape, rng):
    st = init_adapter(build_adapter(kind, shape, 2, scaling=0.7), 3)
    frozen = network_oracle(st)
    randomize(st, rng)
    expect = 0.7 * (network_oracle(st) - frozen)
    np.testing.assert_allclose(materialize_delta(st), expect, rtol=1e-12, atol=1e-14)


def test_lora2d_entrywise(rng):
    st = init_adapter(build_lora2d(5, 3, 2, 4, 3), 0)
    frozen = {k: v.copy() for k, v in st.core_values().items()}
    randomize(st, rng)
    A, B = st.params["A"].value, st.params["B"].value
    ref = np.zeros((5, 3, 2, 4))
    for o in range(5):
        for i in range(3):
            for h in range(2):
                for w in range(4):
                    ref[o, i, h, w] = sum(B[o, w, j] * A[j, i, h] - frozen["B"][o, w, j] * frozen["A"][j, i, h]
                                          for j in range(3))
    np.testing.assert_allclose(materialize_delta(st), ref, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("kind", [k.value for k in AdapterKind])
def test_delta_zero_at_init(kind):
    shape = {"LoRA2D": (4, 4, 3, 3), "QuantaLinear": (8, 6)}.get(kind, (8, 4, 3, 3, 3))
    st = init_adapter(build_adapter(kind, shape, 2), 11)
    d = materialize_delta(st)
    assert d.shape == shape and not np.any(d)


def test_init_scale(rng):
    st = init_adapter(build_tenvoo_l(ConvKernelDims.from_shape(64, 64, 3), 4), 0)
    for name, p in st.params.items():
        legs = sum((a == name) + (b == name) for a, _, b, _ in st.edges)
        assert p.value.std() == pytest.approx(4.0 ** (-0.5 * legs), rel=0.35)


def test_init_is_deterministic():
    a = init_adapter(build_tenvoo_q(ConvKernelDims.from_shape(8, 8, 3), 2), 5)
    b = init_adapter(build_tenvoo_q(ConvKernelDims.from_shape(8, 8, 3), 2), 5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].value, b.params[k].value)


def test_merge_unmerge_roundtrip(rng):
    st = init_adapter(build_tenvoo_l(ConvKernelDims.from_shape(8, 4, 3), 2), 1)
    randomize(st, rng)
    w = rng.normal(size=st.kernel_shape)
    np.testing.assert_allclose(unmerge(merge(w, st), st), w, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        merge(np.zeros((8, 4, 3, 3)), st)


def test_delta_node_matches_materialize(rng):
    st = init_adapter(build_tenvoo_q(ConvKernelDims.from_shape(8, 4, 3), 2), 1)
    randomize(st, rng)
    np.testing.assert_array_equal(delta_node(st).value, materialize_delta(st))


def test_delta_node_gradients(rng):
    st = init_adapter(build_tenvoo_l(ConvKernelDims.from_shape(4, 4, 3, 1, 2), 2), 1)
    randomize(st, rng)
    w = rng.normal(size=st.kernel_shape)
    for p in st.params.values():
        err = ad.finite_diff_check(lambda: ad.sum(ad.mul(delta_node(st), w)), p)
        assert err < 1e-6, p.name


def test_uninitialized_adapter_rejected():
    st = build_tenvoo_l(ConvKernelDims.from_shape(8, 8, 3), 2)
    with pytest.raises(AdapterError):
        materialize_delta(st)


def test_bad_inputs():
    with pytest.raises(AdapterError):
        build_tenvoo_l(ConvKernelDims.from_shape(8, 8, 3), 0)
    with pytest.raises(AdapterError):
        AdapterKind.parse("tucker")
    with pytest.raises(AdapterError):
        build_adapter("LoRA2D", (8, 8, 3, 3, 3), 2)
    with pytest.raises(AdapterError):
        build_adapter("QuantaLinear", (8, 8, 3), 2)
    with pytest.raises(AdapterError):
        ConvKernelDims(8, 8, 3, 3, 3, (2, 2, 3), (2, 2, 2))
    with pytest.raises(AdapterError):
        LinearDims(8, 8, (2, 2, 2), (1, 2, 2))
    assert AdapterKind.parse("tenvoo_l") is AdapterKind.TENVOO_L


# -- structure -------------------------------------------------------------------

def test_degenerate_to_2d(rng):
    r, kh = 3, 3
    st = init_adapter(build_tenvoo_l(ConvKernelDims.from_shape(8, 4, 3, kh, 2), r), 0)
    randomize(st, rng)
    flat = degenerate_to_2d(st)
    assert param_count(st) - param_count(flat) == kh * r**3
    d2 = materialize_delta(flat)
    assert d2.shape == (8, 4, 3, 2)
    # oracle: put the copy tensor in every height slice of the 3D network
    copy = np.broadcast_to(superdiagonal(r), (kh, r, r, r)).copy()
    cur = {**st.core_values(), "Kh": copy}
    froz = {**dict(st.frozen_net.cores), "Kh": copy}
    full = network_oracle(st, cur) - network_oracle(st, froz)
    for h in range(kh):
        np.testing.assert_allclose(d2, full[:, :, :, h, :], rtol=1e-12, atol=1e-14)
    with pytest.raises(AdapterError):
        degenerate_to_2d(init_adapter(build_tenvoo_q(ConvKernelDims.from_shape(8, 4, 3), 2), 0))


def test_topology_roundtrip(rng):
    st = init_adapter(build_tenvoo_q(ConvKernelDims.from_shape(8, 6, 3), 2, "layer.adapter."), 4)
    randomize(st, rng)
    topo = topology_to_dict(st)
    back = state_from_topology(topo, {k: p.value for k, p in st.params.items()},
                               dict(st.frozen_net.cores))
    np.testing.assert_array_equal(materialize_delta(back), materialize_delta(st))
    assert {p.name for p in back.params.values()} == {p.name for p in st.params.values()}


@pytest.mark.parametrize("builder", [build_tenvoo_l, build_tenvoo_q])
def test_tenvoo_networks_are_connected_and_complete(builder):
    st = builder(ConvKernelDims.from_shape(8, 8, 3), 2)
    cores = {k: np.ones(v) for k, v in st.core_shapes.items()}
    net = TensorNetwork(cores, st.edges, st.open_legs)
    assert contract_network(net).size == 8 * 8 * 27
    assert len(st.core_shapes) == 10
