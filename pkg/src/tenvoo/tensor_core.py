"""Dense tensors, axis manipulation and tensor-network contraction.

Dense tensors are plain ``numpy.ndarray`` objects in float64, row-major.
A :class:`TensorNetwork` names its cores and pairs their legs with edges;
:func:`contract_network` reduces it to a single tensor using a greedy
pairwise order that keeps intermediate tensors small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "TensorError",
    "ShapeMismatchError",
    "UnknownLegError",
    "NetworkError",
    "as_tensor",
    "contract_pair",
    "reshape",
    "permute",
    "factorize_channels",
    "TensorNetwork",
    "ContractionPlan",
    "plan_contraction",
    "execute_plan",
    "contract_network",
]

DTYPE = np.float64

Edge = tuple[str, int, str, int]
Leg = tuple[str, int]


class TensorError(ValueError):
    """Base class for tensor shape and network errors."""


class ShapeMismatchError(TensorError):
    pass


class UnknownLegError(TensorError):
    pass


class NetworkError(TensorError):
    """Raised for malformed networks: dangling legs, disconnected graphs, ..."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _check_leg(shape: Sequence[int], leg: int, which: str) -> None:
    if not isinstance(leg, (int, np.integer)) or not 0 <= leg < len(shape):
        raise UnknownLegError(f"{which} has no leg {leg!r} (ndim={len(shape)})")


def contract_pair(a, b, pairs: Iterable[tuple[int, int]]) -> np.ndarray:
    """Sum over the paired legs of ``a`` and ``b``.

    The result carries the unpaired legs of ``a`` in order followed by the
    unpaired legs of ``b``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    pairs = list(pairs)
    legs_a, legs_b = [], []
    for la, lb in pairs:
        _check_leg(a.shape, la, "a")
        _check_leg(b.shape, lb, "b")
        if a.shape[la] != b.shape[lb]:
            raise ShapeMismatchError(
                f"leg pair (a:{la}, b:{lb}) has lengths {a.shape[la]} != {b.shape[lb]}"
            )
        legs_a.append(int(la))
        legs_b.append(int(lb))
    if len(set(legs_a)) != len(legs_a) or len(set(legs_b)) != len(legs_b):
        raise UnknownLegError(f"a leg appears in more than one pair: {pairs}")
    return np.tensordot(a, b, axes=(legs_a, legs_b))


def reshape(t, new_shape: Sequence[int]) -> np.ndarray:
    t = as_tensor(t)
    new_shape = tuple(int(s) for s in new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeMismatchError(
            f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}"
        )
    return t.reshape(new_shape)


def permute(t, order: Sequence[int]) -> np.ndarray:
    t = as_tensor(t)
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(t.ndim)):
        raise TensorError(f"{order} is not a permutation of {t.ndim} axes")
    return np.transpose(t, order)


@lru_cache(maxsize=None)
def factorize_channels(n: int) -> tuple[int, int, int]:
    """Split ``n`` into three ordered factors that are as balanced as possible.

    Balance is measured by ``max/min``; ties go to the lexicographically
    smallest triple. A prime ``n`` yields ``(1, 1, n)``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    best = None
    for f1 in range(1, int(round(n ** (1 / 3))) + 2):
        if n % f1:
            continue
        rest = n // f1
        for f2 in range(f1, math.isqrt(rest) + 1):
            if rest % f2:
                continue
            f3 = rest // f2
            key = (Fraction(f3, f1), (f1, f2, f3))
            if best is None or key < best:
                best = key
    return best[1]


@dataclass(frozen=True)
class TensorNetwork:
    """Named cores joined by leg-pairing edges.

    ``edges`` holds ``(core_a, leg_a, core_b, leg_b)`` tuples and
    ``open_legs`` fixes the axis order of the contracted result.
    Core arrays are copied and made read-only on construction.
    """

    cores: Mapping[str, np.ndarray]
    edges: tuple[Edge, ...]
    open_legs: tuple[Leg, ...]
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        frozen = {}
        for name, arr in self.cores.items():
            arr = np.array(arr, dtype=DTYPE, copy=True)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "cores", frozen)
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        object.__setattr__(self, "open_legs", tuple(tuple(l) for l in self.open_legs))
        if self.validate:
            check_topology(self.shapes, self.edges, self.open_legs)

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.cores.items()}

    @property
    def output_shape(self) -> tuple[int, ...]:
        return tuple(self.cores[c].shape[l] for c, l in self.open_legs)

    def with_cores(self, **updates) -> "TensorNetwork":
        cores = dict(self.cores)
        for k, v in updates.items():
            if k not in cores:
                raise NetworkError(f"unknown core {k!r}")
            if np.shape(v) != cores[k].shape:
                raise ShapeMismatchError(
                    f"core {k!r} expects shape {cores[k].shape}, got {np.shape(v)}"
                )
            cores[k] = v
        return TensorNetwork(cores, self.edges, self.open_legs)

    def num_entries(self) -> int:
        return sum(v.size for v in self.cores.values())


def check_topology(
    shapes: Mapping[str, Sequence[int]],
    edges: Sequence[Edge],
    open_legs: Sequence[Leg],
) -> None:
    seen: dict[Leg, str] = {}

    def claim(leg: Leg, what: str):
        core, idx = leg
        if core not in shapes:
            raise NetworkError(f"{what} refers to unknown core {core!r}")
        _check_leg(shapes[core], idx, f"core {core!r}")
        if leg in seen:
            raise NetworkError(f"leg {leg} used twice ({seen[leg]} and {what})")
        seen[leg] = what

    for e in edges:
        ca, la, cb, lb = e
        if ca == cb:
            raise NetworkError(f"self-edge on core {ca!r} is not supported")
        claim((ca, la), f"edge {e}")
        claim((cb, lb), f"edge {e}")
        if shapes[ca][la] != shapes[cb][lb]:
            raise ShapeMismatchError(
                f"edge {e} joins legs of lengths {shapes[ca][la]} and {shapes[cb][lb]}"
            )
    for leg in open_legs:
        claim(tuple(leg), "open_legs")
    for core, shape in shapes.items():
        for idx in range(len(shape)):
            if (core, idx) not in seen:
                raise NetworkError(f"dangling leg ({core!r}, {idx})")

    names = list(shapes)
    if not names:
        raise NetworkError("network has no cores")
    adj: dict[str, set[str]] = {n: set() for n in names}
    for ca, _, cb, _ in edges:
        adj[ca].add(cb)
        adj[cb].add(ca)
    reached = {names[0]}
    stack = [names[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in reached:
                reached.add(nb)
                stack.append(nb)
    if len(reached) != len(names):
        missing = sorted(set(names) - reached)
        raise NetworkError(f"network is disconnected; unreachable cores: {missing}")


@dataclass(frozen=True)
class ContractionPlan:
    """Pairwise contraction steps plus the final output permutation.

    Each step is ``(left, right, axes_left, axes_right, result)``; the
    result name refers to a new intermediate.
    """

    steps: tuple[tuple[str, str, tuple[int, ...], tuple[int, ...], str], ...]
    final: str
    output_perm: tuple[int, ...]


def _labels(shapes, edges, open_legs):
    labels = {c: [None] * len(s) for c, s in shapes.items()}
    for k, (ca, la, cb, lb) in enumerate(edges):
        labels[ca][la] = ("e", k)
        labels[cb][lb] = ("e", k)
    for k, (c, l) in enumerate(open_legs):
        labels[c][l] = ("o", k)
    return labels


def _pair_step(lab_a, lab_b):
    shared = [x for x in lab_a if x in lab_b]
    axes_a = tuple(lab_a.index(x) for x in shared)
    axes_b = tuple(lab_b.index(x) for x in shared)
    out = [x for x in lab_a if x not in shared] + [x for x in lab_b if x not in shared]
    return axes_a, axes_b, out


def _finish(labels, sizes, steps, name, open_legs):
    final_labels = labels[name]
    perm = tuple(final_labels.index(("o", k)) for k in range(len(open_legs)))
    return ContractionPlan(tuple(steps), name, perm)


@lru_cache(maxsize=256)
def _greedy_plan(shapes_key, edges, open_legs) -> ContractionPlan:
    shapes = dict(shapes_key)
    labels = _labels(shapes, edges, open_legs)
    sizes = {}
    for c, s in shapes.items():
        for lab, n in zip(labels[c], s):
            sizes[lab] = n
    live = {c: list(labels[c]) for c in shapes}
    order = {c: i for i, c in enumerate(sorted(shapes))}
    steps = []
    counter = 0
    while len(live) > 1:
        best = None
        names = sorted(live, key=order.__getitem__)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if not set(live[a]) & set(live[b]):
                    continue
                _, _, out = _pair_step(live[a], live[b])
                size = math.prod(sizes[x] for x in out)
                flops = math.prod(sizes[x] for x in set(live[a]) | set(live[b]))
                key = (size, flops, order[a], order[b])
                if best is None or key < best[0]:
                    best = (key, a, b)
        if best is None:
            raise NetworkError("network is disconnected")
        _, a, b = best
        axes_a, axes_b, out = _pair_step(live[a], live[b])
        new = f"#{counter}"
        counter += 1
        steps.append((a, b, axes_a, axes_b, new))
        del live[a], live[b]
        live[new] = out
        order[new] = len(order)
    (name,) = live
    labels.update(live)
    return _finish(labels, sizes, steps, name, open_legs)


def _sequential_plan(shapes, edges, open_legs, sequence) -> ContractionPlan:
    if sorted(sequence) != sorted(shapes):
        raise NetworkError(f"order {list(sequence)} must list every core exactly once")
    labels = _labels(shapes, edges, open_legs)
    live = {c: list(labels[c]) for c in shapes}
    steps = []
    cur = sequence[0]
    for k, nxt in enumerate(sequence[1:]):
        axes_a, axes_b, out = _pair_step(live[cur], live[nxt])
        new = f"#{k}"
        steps.append((cur, nxt, axes_a, axes_b, new))
        live[new] = out
        cur = new
    labels.update(live)
    return _finish(labels, None, steps, cur, open_legs)


def plan_contraction(
    shapes: Mapping[str, Sequence[int]],
    edges: Sequence[Edge],
    open_legs: Sequence[Leg],
    order: Sequence[str] | None = None,
) -> ContractionPlan:
    """Build a contraction plan from topology alone.

    Without ``order`` the greedy rule picks, at each step, the connected
    pair whose result is smallest. With ``order`` cores are absorbed one
    at a time in the given sequence.
    """
    edges = tuple(tuple(e) for e in edges)
    open_legs = tuple(tuple(l) for l in open_legs)
    check_topology(shapes, edges, open_legs)
    if order is not None:
        return _sequential_plan(dict(shapes), edges, open_legs, list(order))
    key = tuple(sorted((k, tuple(v)) for k, v in shapes.items()))
    return _greedy_plan(key, edges, open_legs)


def execute_plan(
    plan: ContractionPlan,
    tensors: Mapping[str, object],
    tensordot: Callable = np.tensordot,
    transpose: Callable = np.transpose,
):
    """Run ``plan`` on ``tensors`` with the given primitives.

    The primitives are swappable so the same plan drives both plain arrays
    and recorded autodiff nodes, which keeps both paths bit-identical.
    """
    live = dict(tensors)
    for a, b, axes_a, axes_b, new in plan.steps:
        live[new] = tensordot(live.pop(a), live.pop(b), axes=(list(axes_a), list(axes_b)))
    out = live[plan.final]
    if plan.output_perm != tuple(range(len(plan.output_perm))):
        out = transpose(out, plan.output_perm)
    return out


def contract_network(net: TensorNetwork, order: Sequence[str] | None = None) -> np.ndarray:
    plan = plan_contraction(net.shapes, net.edges, net.open_legs, order)
    return np.asarray(execute_plan(plan, net.cores), dtype=DTYPE)
