"""Small differentiable-function toolkit on numpy arrays.

Forward evaluation records every primitive on an explicit :class:`Tape`;
:func:`backward` walks the tape in reverse to accumulate exact gradients for
parameters and tracked inputs. Everything is float64.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

CKPT_MAGIC = "CTXDIFF-CKPT-1"


class ParamSet:
    """Ordered collection of named float64 tensors.

    ``version`` is bumped by every optimizer update so stale tapes can be
    detected.
    """

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        self.version = 0
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> None:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._arrays[name] = np.array(arr, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list[str]:
        return list(self._arrays)

    @property
    def num_params(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def shapes(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self._arrays.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._arrays.items()})

    def bump(self) -> None:
        self.version += 1

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self._arrays.items()}


class Node:
    __slots__ = ("tape", "value", "parents", "index")

    def __init__(self, tape: "Tape", value: np.ndarray, parents, index: int):
        self.tape = tape
        self.value = value
        # list of (parent node, vjp: upstream grad -> grad wrt parent)
        self.parents = parents
        self.index = index

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Record of one forward evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[tuple[int, str], Node] = {}
        self._param_sets: dict[int, tuple[ParamSet, int]] = {}
        self.consumed = False

    def _new(self, value, parents=()) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64), list(parents), len(self.nodes))
        self.nodes.append(node)
        return node

    def param(self, params: ParamSet, name: str) -> Node:
        key = (id(params), name)
        node = self._param_nodes.get(key)
        if node is None:
            node = self._new(params[name])
            self._param_nodes[key] = node
            self._param_sets[id(params)] = (params, params.version)
        return node

    def input(self, value) -> Node:
        return self._new(value)

    const = input


@dataclass
class Gradients:
    tape: Tape
    grads: list

    def wrt(self, node: Node) -> np.ndarray:
        g = self.grads[node.index]
        return np.zeros_like(node.value) if g is None else g

    def for_params(self, params: ParamSet) -> dict[str, np.ndarray]:
        out = {}
        for name in params:
            node = self.tape._param_nodes.get((id(params), name))
            out[name] = np.zeros_like(params[name]) if node is None else self.wrt(node)
        return out


def backward(tape: Tape, output: Node, grad_output=None) -> Gradients:
    """Reverse-mode accumulation from ``output`` back through ``tape``."""
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    for params, version in tape._param_sets.values():
        if params.version != version:
            raise RuntimeError("parameters were mutated after the tape was recorded")
    if output.tape is not tape:
        raise ValueError("output node belongs to a different tape")
    grads: list = [None] * len(tape.nodes)
    if grad_output is None:
        grad_output = np.ones_like(output.value)
    grads[output.index] = np.asarray(grad_output, dtype=np.float64)
    for node in reversed(tape.nodes[: output.index + 1]):
        g = grads[node.index]
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if grads[parent.index] is None:
                grads[parent.index] = contrib
            else:
                grads[parent.index] = grads[parent.index] + contrib
    tape.consumed = True
    return Gradients(tape, grads)


# ---------------------------------------------------------------- primitives


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.const(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ValueError("at least one operand must be a Node")


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    return tape._new(
        a.value + b.value,
        [(a, lambda g, s=a.shape: _unbroadcast(g, s)), (b, lambda g, s=b.shape: _unbroadcast(g, s))],
    )


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    return tape._new(
        a.value - b.value,
        [(a, lambda g, s=a.shape: _unbroadcast(g, s)), (b, lambda g, s=b.shape: -_unbroadcast(g, s))],
    )


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    av, bv = a.value, b.value
    return tape._new(
        av * bv,
        [(a, lambda g: _unbroadcast(g * bv, av.shape)), (b, lambda g: _unbroadcast(g * av, bv.shape))],
    )


def matmul(x: Node, w: Node) -> Node:
    xv, wv = x.value, w.value
    return x.tape._new(xv @ wv, [(x, lambda g: g @ wv.T), (w, lambda g: xv.T @ g)])


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return x.tape._new(y, [(x, lambda g: g * (1.0 - y * y))])


def silu(x: Node) -> Node:
    xv = x.value
    sig = 1.0 / (1.0 + np.exp(-xv))
    return x.tape._new(xv * sig, [(x, lambda g: g * (sig * (1.0 + xv * (1.0 - sig))))])


ACTIVATIONS: dict[str, Callable[[Node], Node]] = {"silu": silu, "tanh": tanh}


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    tape = nodes[0].tape
    values = [n.value for n in nodes]
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    parents = []
    for i, n in enumerate(nodes):
        parents.append((n, lambda g, i=i: np.split(g, bounds, axis=axis)[i]))
    return tape._new(np.concatenate(values, axis=axis), parents)


def embedding(table: Node, ids) -> Node:
    ids = np.asarray(ids, dtype=np.int64)
    tv = table.value

    def vjp(g):
        out = np.zeros_like(tv)
        np.add.at(out, ids, g)
        return out

    return table.tape._new(tv[ids], [(table, vjp)])


def sum_rows(x: Node) -> Node:
    """Sum over the last axis."""
    shape = x.shape
    return x.tape._new(x.value.sum(axis=-1), [(x, lambda g: np.broadcast_to(g[..., None], shape).copy())])


def mean(x: Node) -> Node:
    n = x.value.size
    shape = x.shape
    return x.tape._new(np.mean(x.value), [(x, lambda g: np.full(shape, g / n))])


# ---------------------------------------------------------------- features


def timestep_features(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t / T``; shape ``(n, dim)``."""
    if dim % 2:
        raise ValueError("time feature dimension must be even")
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    half = dim // 2
    freqs = np.pi * np.geomspace(1.0, 1000.0, half)
    args = s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ---------------------------------------------------------------- MLP


def init_dense(params: ParamSet, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    params.add(f"{name}.W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    params.add(f"{name}.b", rng.uniform(-bound, bound, size=(fan_out,)))


def init_embedding(params: ParamSet, name: str, rows: int, dim: int, rng: np.random.Generator) -> None:
    params.add(name, rng.normal(0.0, 0.02, size=(rows, dim)))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, prefix: str = "mlp", params: ParamSet | None = None) -> ParamSet:
    params = ParamSet() if params is None else params
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_dense(params, f"{prefix}.{i}", a, b, rng)
    return params


def dense(params: ParamSet, name: str, x: Node) -> Node:
    tape = x.tape
    return linear(x, tape.param(params, f"{name}.W"), tape.param(params, f"{name}.b"))


def forward_mlp(params: ParamSet, inputs, prefix: str = "mlp", activation: str = "silu", tape: Tape | None = None) -> Node:
    """Dense layers with ``activation`` between them (none after the last).

    ``inputs`` may be an array (wrapped as a tracked input on a fresh tape)
    or a node already on a tape. The returned node's ``tape`` feeds
    :func:`backward`.
    """
    if isinstance(inputs, Node):
        x = inputs
    else:
        tape = Tape() if tape is None else tape
        x = tape.input(np.atleast_2d(inputs))
    act = ACTIVATIONS[activation]
    n_layers = 0
    while f"{prefix}.{n_layers}.W" in params:
        n_layers += 1
    if n_layers == 0:
        raise KeyError(f"no layers with prefix {prefix!r}")
    for i in range(n_layers):
        w = params[f"{prefix}.{i}.W"]
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"layer {prefix}.{i} expects {w.shape[0]} inputs, got {x.shape[-1]}")
        x = dense(params, f"{prefix}.{i}", x)
        if i < n_layers - 1:
            x = act(x)
    return x


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_coords: int
    tolerance: float
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    params: ParamSet | Sequence[ParamSet],
    loss_fn: Callable[[], tuple[float, object]],
    step_size: float = 1e-4,
    tolerance: float = 1e-4,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must be deterministic and return ``(loss, grads)`` where
    ``grads`` is a dict (single ParamSet) or a list of dicts aligned with
    ``params``. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    psets = [params] if isinstance(params, ParamSet) else list(params)
    loss0, grads = loss_fn()
    if not np.isfinite(loss0):
        raise FloatingPointError("non-finite loss at probe point")
    if isinstance(grads, dict):
        grads = [grads]
    rng = np.random.default_rng(0) if rng is None else rng
    max_rel = max_abs = 0.0
    worst = None
    count = 0
    for ps, g in zip(psets, grads):
        for name in ps:
            arr = ps[name]
            flat = arr.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
                idx = rng.choice(flat.size, max_coords_per_tensor, replace=False)
            ga = np.asarray(g[name]).reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step_size
                lp, _ = loss_fn()
                flat[i] = orig - step_size
                lm, _ = loss_fn()
                flat[i] = orig
                num = (lp - lm) / (2 * step_size)
                a = ga[i]
                abs_err = abs(a - num)
                rel = abs_err / max(abs(a), abs(num), floor)
                count += 1
                max_abs = max(max_abs, abs_err)
                if rel > max_rel:
                    max_rel = rel
                    worst = (name, int(i), float(a), float(num))
    return GradCheckReport(max_rel, max_abs, count, tolerance, worst)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamSet) -> "AdamWState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def optimizer_step(
    params: ParamSet,
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> ParamSet:
    """One adaptive-moment update with decoupled weight decay (in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name in params:
        p = params[name]
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= (lr / bc1) * m / (np.sqrt(v) / math.sqrt(bc2) + eps)
    params.bump()
    return params


# ---------------------------------------------------------------- checkpoints


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialize ``tensors`` (in insertion order) after a one-line JSON header."""
    header = {
        "magic": CKPT_MAGIC,
        "tensors": [[name, list(np.shape(arr))] for name, arr in tensors.items()],
    }
    header.update(meta or {})
    buf = io.BytesIO()
    buf.write(_header_bytes(header))
    buf.write(b"\n")
    for arr in tensors.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    if header.get("magic") != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    offset = nl + 1
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64)
        tensors[name] = arr.reshape(shape)
        offset += 8 * n
    if offset != len(data):
        raise ValueError("checkpoint payload length does not match header")
    return tensors, header


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    data = dumps_checkpoint(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
