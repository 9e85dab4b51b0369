"""Tensor-network weight updates for 3D convolutions and linear layers.

Five adapter kinds are provided:

``TenVOO-L``
    Ten cores. Channels are split as ``c_in = i1*i2*i3`` and
    ``c_out = o1*o2*o3``; each kernel axis gets its own core.
``TenVOO-Q``
    Ten cores arranged like a small two-qubit-gate circuit, again with one
    core per kernel axis.
``LoRA2D``
    ``dW[o,i,h,w] = sum_j B[o,w,j] A[j,i,h]`` for 2D kernels.
``LoRA3D``
    ``dW[o,i,d,h,w] = sum_j B[o,j] A[j,i,d,h,w]`` (LoCon layout).
``QuantaLinear``
    Three-core chain for ``[d_out, d_in]`` matrices with both feature
    sizes split into three factors.

Every adapter keeps a frozen snapshot of its network taken at
initialization. The update applied to the base weight is
``scaling * (T(trainable) - T(frozen))`` which is exactly zero until
the trainable cores move.

Rank-leg wiring
---------------
Cores list their open (channel/kernel) legs first, then rank legs.

TenVOO-L (A1[i1,i2,r,r] A2[i3,r,r,r] B1[o1,o2,r,r] B2[o3,r,r,r]
Kd/Kh/Kw[k,r,r,r] M[r,r,r] D1/D2[r,r,r,r])::

    A1.2-A2.1  A1.3-D1.0  A2.2-D1.1  A2.3-Kd.1
    B1.2-B2.1  B1.3-D2.0  B2.2-D2.1  B2.3-Kw.1
    D1.2-D2.2  D1.3-M.0   D2.3-M.1   M.2-Kh.1
    Kd.2-Kh.2  Kd.3-Kw.2  Kh.3-Kw.3

TenVOO-Q (A1[i1,i2,r,r] B1[o1,o2,r,r] Kh[k_h,r,r] A2[i3,r,r,r]
B2[o3,r,r,r] Kd/Kw[k,r,r,r] G1/G2/G3[r,r,r,r])::

    A1.2-G1.0  A1.3-G1.1  G1.2-G2.0  G1.3-A2.1
    G2.1-Kd.1  G2.2-Kh.1  G2.3-G3.0
    G3.1-B2.1  G3.2-B1.2  G3.3-B1.3
    A2.2-Kd.2  A2.3-Kw.1  B2.2-Kw.2  B2.3-Kh.2  Kd.3-Kw.3
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .tensor_core import (
    ContractionPlan,
    ShapeMismatchError,
    TensorNetwork,
    execute_plan,
    factorize_channels,
    plan_contraction,
)

__all__ = [
    "AdapterKind",
    "AdapterError",
    "ConvKernelDims",
    "LinearDims",
    "AdapterState",
    "build_tenvoo_l",
    "build_tenvoo_q",
    "build_lora2d",
    "build_lora3d",
    "build_quanta_linear",
    "build_adapter",
    "init_adapter",
    "snapshot_frozen",
    "materialize_delta",
    "delta_node",
    "merge",
    "unmerge",
    "param_count",
    "formula_param_count",
    "degenerate_to_2d",
    "superdiagonal",
    "topology_to_dict",
    "state_from_topology",
]


class AdapterKind(str, Enum):
    TENVOO_L = "TenVOO-L"
    TENVOO_Q = "TenVOO-Q"
    LORA2D = "LoRA2D"
    LORA3D = "LoRA3D"
    QUANTA_LINEAR = "QuantaLinear"

    @classmethod
    def parse(cls, value) -> "AdapterKind":
        if isinstance(value, cls):
            return value
        norm = str(value).replace("_", "-").lower()
        for k in cls:
            if k.value.lower() == norm or k.name.replace("_", "-").lower() == norm:
                return k
        raise AdapterError(f"unknown adapter kind {value!r}; choose from {[k.value for k in cls]}")


CONV_KINDS = (AdapterKind.TENVOO_L, AdapterKind.TENVOO_Q, AdapterKind.LORA3D)


class AdapterError(ValueError):
    pass


@dataclass(frozen=True)
class ConvKernelDims:
    c_out: int
    c_in: int
    k_d: int
    k_h: int
    k_w: int
    o: tuple[int, int, int]
    i: tuple[int, int, int]

    def __post_init__(self):
        if math.prod(self.o) != self.c_out or math.prod(self.i) != self.c_in:
            raise AdapterError(
                f"factorization mismatch: o={self.o} for c_out={self.c_out}, "
                f"i={self.i} for c_in={self.c_in}"
            )
        if min(self.c_out, self.c_in, self.k_d, self.k_h, self.k_w, *self.o, *self.i) < 1:
            raise AdapterError(f"all dimensions must be positive: {self}")

    @classmethod
    def from_shape(cls, c_out, c_in, k_d, k_h=None, k_w=None, o=None, i=None):
        k_h = k_d if k_h is None else k_h
        k_w = k_d if k_w is None else k_w
        return cls(c_out, c_in, k_d, k_h, k_w,
                   tuple(o) if o else factorize_channels(c_out),
                   tuple(i) if i else factorize_channels(c_in))

    @property
    def kernel_shape(self):
        return (self.c_out, self.c_in, self.k_d, self.k_h, self.k_w)


@dataclass(frozen=True)
class LinearDims:
    d_out: int
    d_in: int
    m: tuple[int, int, int]
    n: tuple[int, int, int]

    def __post_init__(self):
        if math.prod(self.m) != self.d_out or math.prod(self.n) != self.d_in:
            raise AdapterError(f"factorization mismatch in {self}")

    @classmethod
    def from_shape(cls, d_out, d_in):
        return cls(d_out, d_in, factorize_channels(d_out), factorize_channels(d_in))

    @property
    def kernel_shape(self):
        return (self.d_out, self.d_in)


@dataclass
class AdapterState:
    """One adapted layer: trainable cores, frozen snapshot and topology."""

    kind: AdapterKind
    rank: int
    dims: ConvKernelDims | LinearDims
    core_shapes: dict[str, tuple[int, ...]]
    edges: tuple[tuple[str, int, str, int], ...]
    open_legs: tuple[tuple[str, int], ...]
    out_perm: tuple[int, ...]
    kernel_shape: tuple[int, ...]
    params: dict[str, Parameter]
    constants: dict[str, np.ndarray] = field(default_factory=dict)
    scaling: float = 1.0
    frozen_net: TensorNetwork | None = None
    frozen_value: np.ndarray | None = field(default=None, repr=False)

    @property
    def initialized(self) -> bool:
        return self.frozen_net is not None

    @property
    def plan(self) -> ContractionPlan:
        return plan_contraction(self.core_shapes, self.edges, self.open_legs)

    def core_values(self) -> dict[str, np.ndarray]:
        vals = {k: p.value for k, p in self.params.items()}
        vals.update(self.constants)
        return vals

    @property
    def trainable_net(self) -> TensorNetwork:
        return TensorNetwork(self.core_values(), self.edges, self.open_legs)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())


def _make_state(kind, rank, dims, shapes, edges, open_legs, target_axes, kernel_shape,
                prefix, scaling, constants=None):
    # target_axes: for each axis of the kernel-factor tensor, the open leg feeding it
    open_legs = tuple(tuple(l) for l in open_legs)
    out_perm = tuple(open_legs.index(tuple(l)) for l in target_axes)
    constants = dict(constants or {})
    params = {
        name: Parameter(f"{prefix}{name}", np.zeros(shape), trainable=True)
        for name, shape in shapes.items() if name not in constants
    }
    return AdapterState(
        kind=kind, rank=int(rank), dims=dims,
        core_shapes={k: tuple(v) for k, v in shapes.items()},
        edges=tuple(tuple(e) for e in edges), open_legs=open_legs,
        out_perm=out_perm, kernel_shape=tuple(kernel_shape),
        params=params, constants=constants, scaling=float(scaling),
    )


def _check_rank(r):
    if not isinstance(r, (int, np.integer)) or r < 1:
        raise AdapterError(f"rank must be a positive integer, got {r!r}")


TENVOO_L_EDGES = (
    ("A1", 2, "A2", 1), ("A1", 3, "D1", 0), ("A2", 2, "D1", 1), ("A2", 3, "Kd", 1),
    ("B1", 2, "B2", 1), ("B1", 3, "D2", 0), ("B2", 2, "D2", 1), ("B2", 3, "Kw", 1),
    ("D1", 2, "D2", 2), ("D1", 3, "M", 0), ("D2", 3, "M", 1), ("M", 2, "Kh", 1),
    ("Kd", 2, "Kh", 2), ("Kd", 3, "Kw", 2), ("Kh", 3, "Kw", 3),
)

TENVOO_Q_EDGES = (
    ("A1", 2, "G1", 0), ("A1", 3, "G1", 1), ("G1", 2, "G2", 0), ("G1", 3, "A2", 1),
    ("G2", 1, "Kd", 1), ("G2", 2, "Kh", 1), ("G2", 3, "G3", 0),
    ("G3", 1, "B2", 1), ("G3", 2, "B1", 2), ("G3", 3, "B1", 3),
    ("A2", 2, "Kd", 2), ("A2", 3, "Kw", 1), ("B2", 2, "Kw", 2), ("B2", 3, "Kh", 2),
    ("Kd", 3, "Kw", 3),
)

# open legs in core order; the kernel-factor order is (o1,o2,o3,i1,i2,i3,kd,kh,kw)
_TENVOO_OPEN = (("A1", 0), ("A1", 1), ("A2", 0), ("B1", 0), ("B1", 1), ("B2", 0),
                ("Kd", 0), ("Kh", 0), ("Kw", 0))
_TENVOO_TARGET = (("B1", 0), ("B1", 1), ("B2", 0), ("A1", 0), ("A1", 1), ("A2", 0),
                  ("Kd", 0), ("Kh", 0), ("Kw", 0))


def build_tenvoo_l(dims: ConvKernelDims, r: int, prefix: str = "", scaling: float = 1.0) -> AdapterState:
    _check_rank(r)
    (i1, i2, i3), (o1, o2, o3) = dims.i, dims.o
    shapes = {
        "A1": (i1, i2, r, r), "A2": (i3, r, r, r),
        "B1": (o1, o2, r, r), "B2": (o3, r, r, r),
        "Kd": (dims.k_d, r, r, r), "Kh": (dims.k_h, r, r, r), "Kw": (dims.k_w, r, r, r),
        "M": (r, r, r), "D1": (r, r, r, r), "D2": (r, r, r, r),
    }
    return _make_state(AdapterKind.TENVOO_L, r, dims, shapes, TENVOO_L_EDGES, _TENVOO_OPEN,
                       _TENVOO_TARGET, dims.kernel_shape, prefix, scaling)


def build_tenvoo_q(dims: ConvKernelDims, r: int, prefix: str = "", scaling: float = 1.0) -> AdapterState:
    _check_rank(r)
    (i1, i2, i3), (o1, o2, o3) = dims.i, dims.o
    shapes = {
        "A1": (i1, i2, r, r), "B1": (o1, o2, r, r), "Kh": (dims.k_h, r, r),
        "A2": (i3, r, r, r), "B2": (o3, r, r, r),
        "Kd": (dims.k_d, r, r, r), "Kw": (dims.k_w, r, r, r),
        "G1": (r, r, r, r), "G2": (r, r, r, r), "G3": (r, r, r, r),
    }
    return _make_state(AdapterKind.TENVOO_Q, r, dims, shapes, TENVOO_Q_EDGES, _TENVOO_OPEN,
                       _TENVOO_TARGET, dims.kernel_shape, prefix, scaling)


def build_lora2d(c_out: int, c_in: int, k_h: int, k_w: int, r: int,
                 prefix: str = "", scaling: float = 1.0) -> AdapterState:
    _check_rank(r)
    shapes = {"A": (r, c_in, k_h), "B": (c_out, k_w, r)}
    edges = (("A", 0, "B", 2),)
    open_legs = (("A", 1), ("A", 2), ("B", 0), ("B", 1))
    target = (("B", 0), ("A", 1), ("A", 2), ("B", 1))
    dims = {"c_out": c_out, "c_in": c_in, "k_h": k_h, "k_w": k_w}
    return _make_state(AdapterKind.LORA2D, r, dims, shapes, edges, open_legs, target,
                       (c_out, c_in, k_h, k_w), prefix, scaling)


def build_lora3d(dims: ConvKernelDims, r: int, prefix: str = "", scaling: float = 1.0) -> AdapterState:
    _check_rank(r)
    shapes = {"A": (r, dims.c_in, dims.k_d, dims.k_h, dims.k_w), "B": (dims.c_out, r)}
    edges = (("A", 0, "B", 1),)
    open_legs = (("A", 1), ("A", 2), ("A", 3), ("A", 4), ("B", 0))
    target = (("B", 0), ("A", 1), ("A", 2), ("A", 3), ("A", 4))
    return _make_state(AdapterKind.LORA3D, r, dims, shapes, edges, open_legs, target,
                       dims.kernel_shape, prefix, scaling)


def build_quanta_linear(d_out: int | LinearDims, d_in: int | None = None, r: int = 1,
                        prefix: str = "", scaling: float = 1.0) -> AdapterState:
    _check_rank(r)
    dims = d_out if isinstance(d_out, LinearDims) else LinearDims.from_shape(d_out, d_in)
    (m1, m2, m3), (n1, n2, n3) = dims.m, dims.n
    shapes = {"U1": (m1, n1, r), "U2": (m2, n2, r, r), "U3": (m3, n3, r)}
    edges = (("U1", 2, "U2", 2), ("U2", 3, "U3", 2))
    open_legs = (("U1", 0), ("U1", 1), ("U2", 0), ("U2", 1), ("U3", 0), ("U3", 1))
    target = (("U1", 0), ("U2", 0), ("U3", 0), ("U1", 1), ("U2", 1), ("U3", 1))
    return _make_state(AdapterKind.QUANTA_LINEAR, r, dims, shapes, edges, open_legs, target,
                       dims.kernel_shape, prefix, scaling)


def build_adapter(kind, shape: tuple[int, ...], r: int, prefix: str = "",
                  scaling: float = 1.0) -> AdapterState:
    """Build an adapter of ``kind`` for a weight of the given shape."""
    kind = AdapterKind.parse(kind)
    if kind is AdapterKind.QUANTA_LINEAR:
        if len(shape) != 2:
            raise AdapterError(f"QuantaLinear needs a 2-d weight, got {shape}")
        return build_quanta_linear(shape[0], shape[1], r, prefix, scaling)
    if kind is AdapterKind.LORA2D:
        if len(shape) != 4:
            raise AdapterError(f"LoRA2D needs a 4-d kernel, got {shape}")
        return build_lora2d(*shape, r, prefix=prefix, scaling=scaling)
    if len(shape) != 5:
        raise AdapterError(f"{kind.value} needs a 5-d kernel, got {shape}")
    dims = ConvKernelDims.from_shape(*shape)
    builder = {AdapterKind.TENVOO_L: build_tenvoo_l, AdapterKind.TENVOO_Q: build_tenvoo_q,
               AdapterKind.LORA3D: build_lora3d}[kind]
    return builder(dims, r, prefix, scaling)


def _rank_legs(state: AdapterState) -> dict[str, int]:
    count = {k: 0 for k in state.core_shapes}
    for ca, _, cb, _ in state.edges:
        count[ca] += 1
        count[cb] += 1
    return count


def snapshot_frozen(state: AdapterState) -> AdapterState:
    """(Re)take the frozen copy from the current trainable cores."""
    state.frozen_net = TensorNetwork(
        {k: np.array(v, copy=True) for k, v in state.core_values().items()},
        state.edges, state.open_legs,
    )
    state.frozen_value = np.asarray(execute_plan(state.plan, state.frozen_net.cores))
    state.frozen_value.setflags(write=False)
    return state


def init_adapter(state: AdapterState, seed: int, std_exponent: float = 0.5) -> AdapterState:
    """Draw trainable cores and take the frozen snapshot.

    Each core is drawn from ``N(0, sigma^2)`` with
    ``sigma = r ** (-std_exponent * L)`` where ``L`` counts the core's
    rank legs.
    """
    rng = np.random.default_rng(seed)
    legs = _rank_legs(state)
    r = state.rank
    for name in sorted(state.params):
        p = state.params[name]
        sigma = float(r) ** (-std_exponent * legs[name])
        p.value = rng.normal(0.0, sigma, size=state.core_shapes[name])
    return snapshot_frozen(state)


def _require_init(state: AdapterState):
    if not state.initialized:
        raise AdapterError("adapter has not been initialized")


def materialize_delta(state: AdapterState) -> np.ndarray:
    """``scaling * (T(trainable) - T(frozen))`` laid out as the kernel shape."""
    _require_init(state)
    t = execute_plan(state.plan, state.core_values())
    d = (t - state.frozen_value) * state.scaling
    return np.transpose(d, state.out_perm).reshape(state.kernel_shape)


def delta_node(state: AdapterState) -> Node:
    """Recorded version of :func:`materialize_delta`; gradients reach the cores."""
    _require_init(state)
    tensors = dict(state.params)
    tensors.update({k: ad.lift(v) for k, v in state.constants.items()})
    t = execute_plan(state.plan, tensors, ad.tensordot, ad.transpose)
    d = ad.mul(ad.sub(t, state.frozen_value), state.scaling)
    return ad.reshape(ad.transpose(d, state.out_perm), state.kernel_shape)


def _check_kernel(kernel, state):
    if tuple(np.shape(kernel)) != state.kernel_shape:
        raise ShapeMismatchError(
            f"kernel shape {np.shape(kernel)} does not match adapter {state.kernel_shape}"
        )


def merge(base_kernel, state: AdapterState) -> np.ndarray:
    _check_kernel(base_kernel, state)
    return np.asarray(base_kernel, dtype=np.float64) + materialize_delta(state)


def unmerge(merged, state: AdapterState) -> np.ndarray:
    _check_kernel(merged, state)
    return np.asarray(merged, dtype=np.float64) - materialize_delta(state)


def param_count(state: AdapterState) -> int:
    return int(sum(math.prod(state.core_shapes[k]) for k in state.params))


def formula_param_count(kind, dims, r: int) -> int:
    """Closed-form trainable-parameter count for each adapter kind."""
    kind = AdapterKind.parse(kind)
    if kind is AdapterKind.TENVOO_L:
        (i1, i2, i3), (o1, o2, o3) = dims.i, dims.o
        return ((i1 * i2 + o1 * o2) * r**2
                + (i3 + o3 + dims.k_d + dims.k_h + dims.k_w + 1) * r**3 + 2 * r**4)
    if kind is AdapterKind.TENVOO_Q:
        (i1, i2, i3), (o1, o2, o3) = dims.i, dims.o
        return ((i1 * i2 + o1 * o2 + dims.k_h) * r**2
                + (i3 + o3 + dims.k_d + dims.k_w) * r**3 + 3 * r**4)
    if kind is AdapterKind.LORA3D:
        return r * (dims.c_in * dims.k_d * dims.k_h * dims.k_w + dims.c_out)
    if kind is AdapterKind.LORA2D:
        return r * (dims["c_in"] * dims["k_h"] + dims["c_out"] * dims["k_w"])
    (m1, m2, m3), (n1, n2, n3) = dims.m, dims.n
    return r * m1 * n1 + r * r * m2 * n2 + r * m3 * n3


def superdiagonal(r: int, order: int = 3) -> np.ndarray:
    """Copy tensor: 1 where all indices agree, else 0."""
    t = np.zeros((r,) * order)
    for j in range(r):
        t[(j,) * order] = 1.0
    return t


def degenerate_to_2d(state: AdapterState) -> AdapterState:
    """Drop the height core of a TenVOO-L adapter.

    The three rank legs that met the height core are joined by a fixed
    copy tensor, so the network stays connected and the remaining cores
    keep their shapes and values. The result materializes to
    ``[c_out, c_in, k_d, k_w]``.
    """
    if state.kind is not AdapterKind.TENVOO_L or "Kh" not in state.core_shapes:
        raise AdapterError(f"degenerate_to_2d needs a 3D TenVOO-L adapter, got {state.kind.value}")
    _require_init(state)
    r = state.rank
    shapes = {k: v for k, v in state.core_shapes.items() if k != "Kh"}
    shapes["Kh_id"] = (r, r, r)

    def rewire(core, leg):
        return ("Kh_id", leg - 1) if core == "Kh" else (core, leg)

    edges = tuple(rewire(ca, la) + rewire(cb, lb) for ca, la, cb, lb in state.edges)
    open_legs = tuple(l for l in state.open_legs if l[0] != "Kh")
    target = tuple(l for l in (state.open_legs[i] for i in state.out_perm) if l[0] != "Kh")
    out_perm = tuple(open_legs.index(l) for l in target)
    d = state.dims
    ident = superdiagonal(r)
    params = {k: p for k, p in state.params.items() if k != "Kh"}
    new = AdapterState(
        kind=AdapterKind.TENVOO_L, rank=r, dims=d, core_shapes=shapes, edges=edges,
        open_legs=open_legs, out_perm=out_perm,
        kernel_shape=(d.c_out, d.c_in, d.k_d, d.k_w),
        params=params, constants={"Kh_id": ident}, scaling=state.scaling,
    )
    frozen = {k: v for k, v in state.frozen_net.cores.items() if k != "Kh"}
    frozen["Kh_id"] = ident
    new.frozen_net = TensorNetwork(frozen, edges, open_legs)
    new.frozen_value = np.asarray(execute_plan(new.plan, new.frozen_net.cores))
    return new


def _dims_to_dict(dims) -> dict:
    if isinstance(dims, ConvKernelDims):
        return {"type": "conv", "c_out": dims.c_out, "c_in": dims.c_in, "k_d": dims.k_d,
                "k_h": dims.k_h, "k_w": dims.k_w, "o": list(dims.o), "i": list(dims.i)}
    if isinstance(dims, LinearDims):
        return {"type": "linear", "d_out": dims.d_out, "d_in": dims.d_in,
                "m": list(dims.m), "n": list(dims.n)}
    return {"type": "conv2d", **dims}


def _dims_from_dict(d: Mapping):
    d = dict(d)
    t = d.pop("type")
    if t == "conv":
        return ConvKernelDims(d["c_out"], d["c_in"], d["k_d"], d["k_h"], d["k_w"],
                              tuple(d["o"]), tuple(d["i"]))
    if t == "linear":
        return LinearDims(d["d_out"], d["d_in"], tuple(d["m"]), tuple(d["n"]))
    return d


def topology_to_dict(state: AdapterState) -> dict:
    """JSON-ready description of an adapter (no core values)."""
    return {
        "kind": state.kind.value,
        "rank": state.rank,
        "scaling": state.scaling,
        "dims": _dims_to_dict(state.dims),
        "core_shapes": {k: list(v) for k, v in state.core_shapes.items()},
        "trainable_cores": sorted(state.params),
        "constant_cores": sorted(state.constants),
        "edges": [list(e) for e in state.edges],
        "open_legs": [list(l) for l in state.open_legs],
        "out_perm": list(state.out_perm),
        "kernel_shape": list(state.kernel_shape),
        "param_names": {k: p.name for k, p in state.params.items()},
    }


def state_from_topology(topo: Mapping, core_values: Mapping[str, np.ndarray],
                        frozen_values: Mapping[str, np.ndarray]) -> AdapterState:
    """Rebuild an adapter from :func:`topology_to_dict` output plus core arrays."""
    topo = json.loads(json.dumps(topo))
    shapes = {k: tuple(v) for k, v in topo["core_shapes"].items()}
    constants = {k: np.asarray(frozen_values[k], dtype=np.float64) for k in topo["constant_cores"]}
    params = {
        k: Parameter(topo["param_names"][k], np.asarray(core_values[k], dtype=np.float64))
        for k in topo["trainable_cores"]
    }
    for k, p in params.items():
        if p.shape != shapes[k]:
            raise ShapeMismatchError(f"core {k!r}: expected {shapes[k]}, got {p.shape}")
    state = AdapterState(
        kind=AdapterKind.parse(topo["kind"]), rank=topo["rank"],
        dims=_dims_from_dict(topo["dims"]), core_shapes=shapes,
        edges=tuple(tuple(e) for e in topo["edges"]),
        open_legs=tuple(tuple(l) for l in topo["open_legs"]),
        out_perm=tuple(topo["out_perm"]), kernel_shape=tuple(topo["kernel_shape"]),
        params=params, constants=constants, scaling=topo["scaling"],
    )
    state.frozen_net = TensorNetwork({k: frozen_values[k] for k in shapes}, state.edges, state.open_legs)
    state.frozen_value = np.asarray(execute_plan(state.plan, state.frozen_net.cores))
    return state
