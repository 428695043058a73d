"""Small dense-tensor autodiff engine on top of numpy.

Three evaluation modes share one set of primitives:

* plain ``np.ndarray`` inputs are evaluated directly;
* :class:`Dual` inputs propagate a tangent alongside the primal (forward mode);
* :class:`Var` inputs are recorded on a :class:`GradTape` for reverse mode.

Network code is written once against the functions in this module (``add``,
``matmul``, ``silu`` ...) or the operator overloads, and runs in any mode.
Mixing ``Dual`` and ``Var`` in a single op is rejected: the training code never
needs forward-over-reverse.
"""
from __future__ import annotations

import numbers
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "UnsupportedOpError",
    "Primitive",
    "Dual",
    "Var",
    "GradTape",
    "bind",
    "jvp_eval",
    "grad_eval",
    "value_of",
    "stopgrad",
    "add", "sub", "mul", "div", "neg", "matmul",
    "exp", "log", "sin", "cos", "tan", "arctan", "sqrt", "silu",
    "sum", "mean", "max", "broadcast_to", "concat", "slice_", "reshape", "transpose",
]


class UnsupportedOpError(TypeError):
    """Raised when a traced value hits an operation with no differentiation rule."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"unsupported primitive for traced values: {op!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass(frozen=True)
class Primitive:
    """An operation with a value rule, a forward-mode rule and a reverse-mode rule.

    ``jvp(primals, tangents, out, **params)`` gets ``None`` for constant inputs.
    ``vjp(g, primals, out, needs, **params)`` returns one cotangent per input,
    ``None`` where ``needs`` is False.
    """

    name: str
    impl: Callable[..., np.ndarray]
    jvp: Callable[..., np.ndarray]
    vjp: Callable[..., Sequence[np.ndarray | None]]


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# traced value types


class _Traced:
    __slots__ = ()
    # numpy defers binary operators to us and routes ufunc calls through
    # __array_ufunc__, where unsupported ufuncs are reported by name.
    __array_priority__ = 1000

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs.get("out") is not None:
            raise UnsupportedOpError(f"{ufunc.__name__}.{method}")
        fn = _UFUNCS.get(ufunc)
        if fn is None:
            raise UnsupportedOpError(ufunc.__name__)
        if kwargs:
            raise UnsupportedOpError(ufunc.__name__, f"keyword arguments {sorted(kwargs)}")
        return fn(*inputs)

    def __array_function__(self, func, types, args, kwargs):
        fn = _ARRAY_FUNCS.get(func)
        if fn is None:
            raise UnsupportedOpError(func.__name__)
        return fn(*args, **kwargs)

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return slice_(self, idx)

    def __pow__(self, p):
        if p == 2:
            return mul(self, self)
        raise UnsupportedOpError("power", f"exponent {p!r}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.primal.shape

    @property
    def ndim(self) -> int:
        return self.primal.ndim

    @property
    def size(self) -> int:
        return self.primal.size

    def __len__(self) -> int:
        return len(self.primal)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def max(self, axis=None, keepdims=False): return max(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self): return transpose(self)


class Dual(_Traced):
    """Primal value paired with a tangent of the same shape."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        primal = _as_array(primal)
        tangent = _as_array(tangent)
        if tangent.shape != primal.shape:
            tangent = np.broadcast_to(tangent, primal.shape)
        self.primal = primal
        self.tangent = tangent

    def __repr__(self) -> str:
        return f"Dual(shape={self.primal.shape})"


class Var(_Traced):
    """A node on a :class:`GradTape`."""

    __slots__ = ("primal", "tape", "index", "prim", "args", "params")

    def __init__(self, value, tape: "GradTape", prim=None, args=(), params=None):
        self.primal = value
        self.tape = tape
        self.prim = prim
        self.args = args
        self.params = params or {}
        self.index = tape._record(self)

    @property
    def value(self) -> np.ndarray:
        return self.primal

    def __repr__(self) -> str:
        kind = self.prim.name if self.prim else "leaf"
        return f"Var({kind}, shape={self.primal.shape})"


class GradTape:
    """Records ``Var`` nodes in creation order, which is a topological order."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}

    def _record(self, node: Var) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def watch(self, value, name: str | None = None) -> Var:
        leaf = Var(_as_array(value), self)
        if name is not None:
            self.leaves[name] = leaf
        return leaf

    def gradient(self, out: Var, wrt: dict[str, Var]) -> dict[str, np.ndarray]:
        if out.size != 1:
            raise ValueError(f"gradient needs a scalar output, got shape {out.shape}")
        cot: dict[int, np.ndarray] = {out.index: np.ones_like(out.primal)}
        for node in reversed(self.nodes[: out.index + 1]):
            g = cot.pop(node.index, None)
            if g is None or node.prim is None:
                if g is not None:
                    cot[node.index] = g  # leaf: keep for the caller
                continue
            vals = [a.primal if isinstance(a, Var) else a for a in node.args]
            needs = [isinstance(a, Var) for a in node.args]
            grads = node.prim.vjp(g, vals, node.primal, needs, **node.params)
            for a, ga in zip(node.args, grads):
                if isinstance(a, Var) and ga is not None:
                    prev = cot.get(a.index)
                    cot[a.index] = ga if prev is None else prev + ga
        return {
            k: cot.get(v.index, np.zeros_like(v.primal)) for k, v in wrt.items()
        }

    def replay(self, leaf_values: dict[str, np.ndarray], out: Var) -> np.ndarray:
        """Re-evaluate the recorded graph with new leaf values."""
        vals: dict[int, np.ndarray] = {}
        by_index = {v.index: k for k, v in self.leaves.items()}
        for node in self.nodes[: out.index + 1]:
            if node.prim is None:
                name = by_index.get(node.index)
                vals[node.index] = (
                    _as_array(leaf_values[name]) if name in leaf_values else node.primal
                )
                continue
            args = [vals[a.index] if isinstance(a, Var) else a for a in node.args]
            vals[node.index] = node.prim.impl(*args, **node.params)
        return vals[out.index]


# ---------------------------------------------------------------------------
# dispatch


def value_of(x) -> np.ndarray:
    """Primal value of a plain, dual or taped value."""
    if isinstance(x, _Traced):
        return x.primal
    return _as_array(x)


def bind(prim: Primitive, *args, **params):
    has_var = has_dual = False
    for a in args:
        if isinstance(a, Var):
            has_var = True
        elif isinstance(a, Dual):
            has_dual = True
    if has_var and has_dual:
        raise UnsupportedOpError(prim.name, "mixed forward- and reverse-mode operands")
    if has_dual:
        primals = [a.primal if isinstance(a, Dual) else _as_array(a) for a in args]
        tangents = [a.tangent if isinstance(a, Dual) else None for a in args]
        out = prim.impl(*primals, **params)
        tout = prim.jvp(primals, tangents, out, **params)
        if tout is None:
            tout = np.zeros_like(out)
        return Dual(out, tout)
    if has_var:
        tape = next(a.tape for a in args if isinstance(a, Var))
        norm_args = tuple(a if isinstance(a, Var) else _as_array(a) for a in args)
        vals = [a.primal if isinstance(a, Var) else a for a in norm_args]
        out = prim.impl(*vals, **params)
        return Var(out, tape, prim, norm_args, params)
    return prim.impl(*[_as_array(a) for a in args], **params)


def _tsum(*terms):
    acc = None
    for t in terms:
        if t is None:
            continue
        acc = t if acc is None else acc + t
    return acc


def _bcast(t, shape):
    if t is None:
        return None
    return t if t.shape == shape else np.broadcast_to(t, shape)


# ---------------------------------------------------------------------------
# elementwise binary


def _add_vjp(g, p, out, needs):
    return [unbroadcast(g, p[0].shape) if needs[0] else None,
            unbroadcast(g, p[1].shape) if needs[1] else None]


_ADD = Primitive(
    "add", np.add,
    lambda p, t, out: _bcast(_tsum(t[0], t[1]), out.shape),
    _add_vjp,
)

_SUB = Primitive(
    "sub", np.subtract,
    lambda p, t, out: _bcast(_tsum(t[0], None if t[1] is None else -t[1]), out.shape),
    lambda g, p, out, needs: [unbroadcast(g, p[0].shape) if needs[0] else None,
                              unbroadcast(-g, p[1].shape) if needs[1] else None],
)

_MUL = Primitive(
    "mul", np.multiply,
    lambda p, t, out: _bcast(_tsum(None if t[0] is None else t[0] * p[1],
                                   None if t[1] is None else p[0] * t[1]), out.shape),
    lambda g, p, out, needs: [unbroadcast(g * p[1], p[0].shape) if needs[0] else None,
                              unbroadcast(g * p[0], p[1].shape) if needs[1] else None],
)


def _div_jvp(p, t, out):
    a = None if t[0] is None else t[0] / p[1]
    b = None if t[1] is None else -out * t[1] / p[1]
    return _bcast(_tsum(a, b), out.shape)


_DIV = Primitive(
    "div", np.true_divide, _div_jvp,
    lambda g, p, out, needs: [unbroadcast(g / p[1], p[0].shape) if needs[0] else None,
                              unbroadcast(-g * out / p[1], p[1].shape) if needs[1] else None],
)


def _matmul_jvp(p, t, out):
    a = None if t[0] is None else t[0] @ p[1]
    b = None if t[1] is None else p[0] @ t[1]
    return _tsum(a, b)


def _mT(x):
    return np.swapaxes(x, -1, -2) if x.ndim >= 2 else x


def _matmul_vjp(g, p, out, needs):
    a, b = p
    ga = gb = None
    if needs[0]:
        if b.ndim == 1:
            ga = np.multiply.outer(g, b) if a.ndim > 1 else g * b
        else:
            ga = g @ _mT(b) if a.ndim > 1 else (g[..., None, :] @ _mT(b))[..., 0, :]
        ga = unbroadcast(ga, a.shape)
    if needs[1]:
        if a.ndim == 1:
            gb = np.multiply.outer(a, g) if b.ndim > 1 else g * a
        else:
            gb = _mT(a) @ g if b.ndim > 1 else (_mT(a) @ g[..., :, None])[..., 0]
        gb = unbroadcast(gb, b.shape)
    return [ga, gb]


_MATMUL = Primitive("matmul", np.matmul, _matmul_jvp, _matmul_vjp)


# ---------------------------------------------------------------------------
# elementwise unary


def _unary(name, f, dfdx):
    """Elementwise primitive from ``f`` and its derivative ``dfdx(x, out)``."""
    return Primitive(
        name, f,
        lambda p, t, out: t[0] * dfdx(p[0], out),
        lambda g, p, out, needs: [g * dfdx(p[0], out)],
    )


def _silu(x):
    return x * expit(x)


def _dsilu(x, out):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


_NEG = Primitive("neg", np.negative, lambda p, t, out: -t[0], lambda g, p, out, needs: [-g])
_EXP = _unary("exp", np.exp, lambda x, out: out)
_LOG = _unary("log", np.log, lambda x, out: 1.0 / x)
_SIN = _unary("sin", np.sin, lambda x, out: np.cos(x))
_COS = _unary("cos", np.cos, lambda x, out: -np.sin(x))
_TAN = _unary("tan", np.tan, lambda x, out: 1.0 + out * out)
_ARCTAN = _unary("arctan", np.arctan, lambda x, out: 1.0 / (1.0 + x * x))
_SQRT = _unary("sqrt", np.sqrt, lambda x, out: 0.5 / out)
_SILU = _unary("silu", _silu, _dsilu)


# ---------------------------------------------------------------------------
# reductions


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if not keepdims else g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


_SUM = Primitive(
    "sum",
    lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims),
    lambda p, t, out, axis=None, keepdims=False: np.sum(t[0], axis=axis, keepdims=keepdims),
    lambda g, p, out, needs, axis=None, keepdims=False: [_expand(g, p[0].shape, axis, keepdims)],
)

_MEAN = Primitive(
    "mean",
    lambda x, axis=None, keepdims=False: np.mean(x, axis=axis, keepdims=keepdims),
    lambda p, t, out, axis=None, keepdims=False: np.mean(t[0], axis=axis, keepdims=keepdims),
    lambda g, p, out, needs, axis=None, keepdims=False: [
        _expand(g, p[0].shape, axis, keepdims) / _count(p[0].shape, axis)
    ],
)


def _argmax_mask(x, axis):
    # one-hot of the first maximal entry along ``axis``
    if axis is None:
        m = np.zeros(x.size)
        m[np.argmax(x)] = 1.0
        return m.reshape(x.shape)
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    m = np.zeros_like(x)
    np.put_along_axis(m, idx, 1.0, axis=axis)
    return m


def _max_jvp(p, t, out, axis=None, keepdims=False):
    return np.sum(t[0] * _argmax_mask(p[0], axis), axis=axis, keepdims=keepdims)


def _max_vjp(g, p, out, needs, axis=None, keepdims=False):
    return [_expand(g, p[0].shape, axis, keepdims) * _argmax_mask(p[0], axis)]


_MAX = Primitive(
    "max", lambda x, axis=None, keepdims=False: np.max(x, axis=axis, keepdims=keepdims),
    _max_jvp, _max_vjp,
)


# ---------------------------------------------------------------------------
# layout


_BROADCAST = Primitive(
    "broadcast_to",
    lambda x, shape: np.broadcast_to(x, shape),
    lambda p, t, out, shape: np.broadcast_to(t[0], shape),
    lambda g, p, out, needs, shape: [unbroadcast(g, p[0].shape)],
)

_RESHAPE = Primitive(
    "reshape",
    lambda x, shape: np.reshape(x, shape),
    lambda p, t, out, shape: np.reshape(t[0], shape),
    lambda g, p, out, needs, shape: [np.reshape(g, p[0].shape)],
)

_TRANSPOSE = Primitive(
    "transpose",
    lambda x, axes: np.transpose(x, axes),
    lambda p, t, out, axes: np.transpose(t[0], axes),
    lambda g, p, out, needs, axes: [np.transpose(g, np.argsort(axes))],
)


def _slice_vjp(g, p, out, needs, idx):
    z = np.zeros_like(p[0])
    np.add.at(z, idx, g)
    return [z]


_SLICE = Primitive(
    "slice",
    lambda x, idx: x[idx],
    lambda p, t, out, idx: t[0][idx],
    _slice_vjp,
)


def _concat_impl(*xs, axis=0):
    return np.concatenate(xs, axis=axis)


def _concat_jvp(p, t, out, axis=0):
    return np.concatenate(
        [np.zeros_like(pi) if ti is None else ti for pi, ti in zip(p, t)], axis=axis
    )


def _concat_vjp(g, p, out, needs, axis=0):
    bounds = np.cumsum([x.shape[axis] for x in p])[:-1]
    parts = np.split(g, bounds, axis=axis)
    return [pt if n else None for pt, n in zip(parts, needs)]


_CONCAT = Primitive("concat", _concat_impl, _concat_jvp, _concat_vjp)


# ---------------------------------------------------------------------------
# public op functions


def add(a, b): return bind(_ADD, a, b)
def sub(a, b): return bind(_SUB, a, b)
def mul(a, b): return bind(_MUL, a, b)
def div(a, b): return bind(_DIV, a, b)
def neg(a): return bind(_NEG, a)
def matmul(a, b): return bind(_MATMUL, a, b)
def exp(a): return bind(_EXP, a)
def log(a): return bind(_LOG, a)
def sin(a): return bind(_SIN, a)
def cos(a): return bind(_COS, a)
def tan(a): return bind(_TAN, a)
def arctan(a): return bind(_ARCTAN, a)
def sqrt(a): return bind(_SQRT, a)


def silu(a):
    """x * sigmoid(x)."""
    return bind(_SILU, a)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return bind(_SUM, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return bind(_MEAN, a, axis=axis, keepdims=keepdims)


def max(a, axis=None, keepdims=False):  # noqa: A001
    if axis is not None and not isinstance(axis, numbers.Integral):
        raise UnsupportedOpError("max", "only a single reduction axis is supported")
    return bind(_MAX, a, axis=axis, keepdims=keepdims)


def broadcast_to(a, shape):
    return bind(_BROADCAST, a, shape=tuple(shape))


def reshape(a, shape):
    if isinstance(shape, numbers.Integral):
        shape = (int(shape),)
    return bind(_RESHAPE, a, shape=tuple(shape))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(np.ndim(value_of(a)))))
    return bind(_TRANSPOSE, a, axes=tuple(axes))


def swapaxes(a, i, j):
    axes = list(range(np.ndim(value_of(a))))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def slice_(a, idx):
    return bind(_SLICE, a, idx=idx)


def concat(xs, axis=0):
    return bind(_CONCAT, *xs, axis=axis)


def stopgrad(x):
    """Identity on values, zero map on derivatives."""
    if isinstance(x, Var):
        return x.primal
    if isinstance(x, Dual):
        return Dual(x.primal, np.zeros_like(x.primal))
    return x


_UFUNCS: dict[Any, Callable] = {
    np.add: add, np.subtract: sub, np.multiply: mul, np.true_divide: div,
    np.negative: neg, np.matmul: matmul, np.exp: exp, np.log: log, np.sin: sin,
    np.cos: cos, np.tan: tan, np.arctan: arctan, np.sqrt: sqrt,
}

_ARRAY_FUNCS: dict[Any, Callable] = {
    np.sum: sum, np.mean: mean, np.max: max, np.reshape: reshape,
    np.transpose: transpose, np.broadcast_to: broadcast_to, np.swapaxes: swapaxes,
    np.concatenate: lambda xs, axis=0: concat(xs, axis),
}


# ---------------------------------------------------------------------------
# entry points


def _tree_map(fn, *trees):
    first = trees[0]
    if isinstance(first, (tuple, list)):
        return type(first)(_tree_map(fn, *parts) for parts in zip(*trees))
    if isinstance(first, dict):
        return {k: _tree_map(fn, *(t[k] for t in trees)) for k in first}
    return fn(*trees)


def jvp_eval(f: Callable, x, v):
    """Evaluate ``f(x)`` and the directional derivative ``J_f(x) v``.

    ``x`` and ``v`` may be arrays or matching tuples/dicts of arrays; ``f``
    receives the same structure. Returns ``(y, dy)`` mirroring ``f``'s output.
    """

    def make(xi, vi):
        xi = _as_array(xi)
        vi = _as_array(vi)
        if xi.shape != vi.shape:
            raise ValueError(f"tangent shape {vi.shape} does not match input {xi.shape}")
        return Dual(xi, vi)

    out = f(_tree_map(make, x, v))

    y = _tree_map(lambda o: o.primal if isinstance(o, Dual) else _as_array(o), out)
    dy = _tree_map(
        lambda o: o.tangent if isinstance(o, Dual) else np.zeros_like(_as_array(o)), out
    )
    return y, dy


def grad_eval(loss: Callable[[dict], Any], params: dict[str, np.ndarray], has_aux: bool = False):
    """Value and gradient of a scalar ``loss(params)`` w.r.t. every entry of ``params``.

    With ``has_aux`` the loss returns ``(scalar, aux)`` and ``aux`` is passed
    through with its traced leaves replaced by plain values.
    """
    tape = GradTape()
    try:
        leaves = {k: tape.watch(v, name=k) for k, v in params.items()}
        res = loss(leaves)
        aux = None
        if has_aux:
            res, aux = res
            aux = _tree_map(lambda a: value_of(a) if isinstance(a, _Traced) else a, aux)
        if np.size(value_of(res)) != 1:
            raise ValueError(f"grad_eval needs a scalar loss, got shape {np.shape(value_of(res))}")
        if not isinstance(res, Var):
            grads = {k: np.zeros_like(_as_array(v)) for k, v in params.items()}
            val = float(value_of(res))
        else:
            grads = tape.gradient(res, leaves)
            val = float(res.primal.reshape(()))
    finally:
        # nodes and tape reference each other; drop the graph without waiting for gc
        tape.nodes.clear()
        tape.leaves.clear()
    return (val, grads, aux) if has_aux else (val, grads)
