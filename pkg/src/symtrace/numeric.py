"""Reference numpy interpreter for symbolic graphs.

Evaluates a graph on one logical device in float64: einsums run through
``np.einsum``, communication nodes and layout slices are identities (the
logical value is what every device would jointly hold), and each named
elementwise function has an exact forward and backward implementation here.
The interpreter exists to *check* the synthesizer — finite-difference tests
compare the gradient graphs produced by reverse-mode differentiation
against numeric derivatives — so clarity beats speed throughout.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .errors import InvalidSpecError
from .graph import (
    CommNode,
    Einsum,
    Elementwise,
    Fused,
    OpNode,
    PScan,
    STGraph,
    SliceOp,
)
from .symbols import SymbolTable


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _gelu(x):
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _gelu_grad(x):
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    d_inner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _shift(x: np.ndarray, axis: int, delta: int) -> np.ndarray:
    """Slide values ``delta`` places toward higher indices, filling with 0."""
    out = np.zeros_like(x)
    if delta == 0:
        return x.copy()
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    if delta > 0:
        src[axis] = slice(0, -delta if delta < x.shape[axis] else 0)
        dst[axis] = slice(delta, None)
    else:
        d = -delta
        src[axis] = slice(d, None)
        dst[axis] = slice(0, -d if d < x.shape[axis] else 0)
    if x.shape[axis] > abs(delta):
        out[tuple(dst)] = x[tuple(src)]
    return out


def _ce_count(logits: np.ndarray) -> float:
    n = 1
    for d in logits.shape[:-1]:
        n *= d
    return float(n)


class Evaluator:
    """Runs a graph over concrete float64 arrays.

    ``feeds`` supplies every graph input by name; ``table`` binds the
    model-dimension symbols (and any parallel symbols, normally to 1 —
    this interpreter sees the single-device logical computation).
    """

    def __init__(self, graph: STGraph, table: SymbolTable,
                 feeds: Dict[str, np.ndarray]):
        self.g = graph
        self.table = table
        self.env: Dict[str, np.ndarray] = {
            k: np.asarray(v, dtype=np.float64) for k, v in feeds.items()}

    # -- shape helpers --

    def shape_of(self, name: str) -> tuple:
        t = self.g.tensor(name)
        return tuple(d.evaluate(self.table, where=name) for d in t.dims)

    def dim_value(self, obj) -> float:
        if hasattr(obj, "evaluate"):
            return float(obj.evaluate(self.table))
        return float(obj)

    # -- main loop --

    def run(self, upto: Optional[str] = None) -> Dict[str, np.ndarray]:
        for node in self.g.topo_order():
            self.eval_node(node)
            if upto is not None and node.out == upto:
                break
        return self.env

    def value(self, name: str) -> np.ndarray:
        if name not in self.env:
            raise InvalidSpecError(f"tensor {name!r} was never evaluated")
        return self.env[name]

    def eval_node(self, node: OpNode) -> np.ndarray:
        if isinstance(node, Einsum):
            out = self._einsum(node)
        elif isinstance(node, Fused):
            for m in node.members:
                self.eval_node(m)
            out = self.env[node.out]
            return out
        elif isinstance(node, PScan):
            out = self._pscan(node)
        elif isinstance(node, (CommNode, SliceOp)):
            out = self.env[node.ins[0]]
        elif isinstance(node, Elementwise):
            out = self._elementwise(node)
        else:
            raise InvalidSpecError(f"cannot evaluate node kind {node.kind!r}")
        self.env[node.out] = out
        return out

    def _einsum(self, node: Einsum) -> np.ndarray:
        spec = node.spec
        subs = ",".join("".join(t) for t in spec.inputs)
        subs += "->" + "".join(spec.output)
        args = [self.env[t] for t in node.ins]
        return np.einsum(subs, *args)

    def _pscan(self, node: PScan) -> np.ndarray:
        gates = self.env[node.ins[0]]
        values = self.env[node.ins[1]]
        axis = node.scan_dim
        g = np.moveaxis(gates, axis, 0)
        b = np.moveaxis(values, axis, 0)
        h = np.zeros_like(b)
        n = b.shape[0]
        rng = range(n - 1, -1, -1) if node.reverse else range(n)
        carry = np.zeros_like(b[0])
        for t in rng:
            carry = g[t] * carry + b[t]
            h[t] = carry
        return np.moveaxis(h, 0, axis)

    def _elementwise(self, node: Elementwise) -> np.ndarray:
        fn = node.fn
        a = [self.env[t] for t in node.ins]
        p = node.params
        if fn == "add" or fn == "residual":
            out = a[0].copy()
            for x in a[1:]:
                out = out + x
            return out
        if fn == "mul":
            out = a[0]
            for x in a[1:]:
                out = out * x
            return out
        if fn == "sub":
            return a[0] - a[1]
        if fn == "neg":
            return -a[0]
        if fn in ("identity", "dropout"):
            return a[0]
        if fn == "scale":
            return a[0] * self._scale_factor(p)
        if fn == "relu":
            return np.maximum(a[0], 0.0)
        if fn == "relu_bwd":
            x, dy = a
            return dy * (x > 0)
        if fn == "gelu":
            return _gelu(a[0])
        if fn == "gelu_bwd":
            x, dy = a
            return dy * _gelu_grad(x)
        if fn == "silu":
            return a[0] * _sigmoid(a[0])
        if fn == "silu_bwd":
            x, dy = a
            s = _sigmoid(x)
            return dy * (s + x * s * (1.0 - s))
        if fn == "sigmoid":
            return _sigmoid(a[0])
        if fn == "sigmoid_bwd":
            y, dy = a
            return dy * y * (1.0 - y)
        if fn == "exp":
            return np.exp(a[0])
        if fn == "exp_bwd":
            y, dy = a
            return dy * y
        if fn == "softmax":
            axis = int(p[0]) if p else -1
            return _softmax(a[0], axis)
        if fn == "softmax_bwd":
            y, dy = a
            axis = int(p[0]) if p else -1
            return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))
        if fn == "rmsnorm":
            x = a[0]
            eps = float(p[0]) if p else 1e-5
            r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
            return x * r
        if fn == "rmsnorm_bwd":
            x, dy = a
            eps = float(p[0]) if p else 1e-5
            h = x.shape[-1]
            r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
            dot = np.sum(x * dy, axis=-1, keepdims=True)
            return r * dy - (r ** 3) * x * dot / h
        if fn == "layernorm":
            x = a[0]
            eps = float(p[0]) if p else 1e-5
            mu = np.mean(x, axis=-1, keepdims=True)
            var = np.var(x, axis=-1, keepdims=True)
            return (x - mu) / np.sqrt(var + eps)
        if fn == "layernorm_bwd":
            x, dy = a
            eps = float(p[0]) if p else 1e-5
            h = x.shape[-1]
            mu = np.mean(x, axis=-1, keepdims=True)
            s = np.sqrt(np.var(x, axis=-1, keepdims=True) + eps)
            xhat = (x - mu) / s
            sum_dy = np.sum(dy, axis=-1, keepdims=True)
            sum_dyx = np.sum(dy * xhat, axis=-1, keepdims=True)
            return (dy - sum_dy / h - xhat * sum_dyx / h) / s
        if fn == "cross_entropy":
            logits, onehot = a
            n = _ce_count(logits)
            return np.asarray(
                -np.sum(onehot * _log_softmax(logits, -1)) / n)
        if fn == "cross_entropy_bwd":
            logits, onehot, dy = a
            n = _ce_count(logits)
            return (_softmax(logits, -1) - onehot) * (dy / n)
        if fn == "shift":
            axis, delta = int(p[0]), int(p[1])
            return _shift(a[0], axis, delta)
        if fn == "transpose" or fn == "permute":
            return np.transpose(a[0], tuple(int(i) for i in p))
        if fn == "reshape":
            return a[0].reshape(self.shape_of(node.out))
        if fn == "narrow":
            axis = int(p[0])
            start = int(self.dim_value(p[1]))
            length = int(self.dim_value(p[2]))
            sl = [slice(None)] * a[0].ndim
            sl[axis] = slice(start, start + length)
            return a[0][tuple(sl)]
        if fn == "pad":
            axis = int(p[0])
            start = int(self.dim_value(p[1]))
            out = np.zeros(self.shape_of(node.out))
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(start, start + a[0].shape[axis])
            out[tuple(sl)] = a[0]
            return out
        if fn == "concat":
            axis = int(p[0]) if p else 0
            return np.concatenate(a, axis=axis)
        if fn == "sgd_update":
            w, grad = a
            lr = float(p[0]) if p else 1e-3
            return w - lr * grad
        if fn == "adam_m":
            m, grad = a
            beta1 = float(p[0]) if p else 0.9
            return beta1 * m + (1 - beta1) * grad
        if fn == "adam_v":
            v, grad = a
            beta2 = float(p[0]) if p else 0.999
            return beta2 * v + (1 - beta2) * grad * grad
        if fn == "adam_update":
            w, m, v = a
            lr = float(p[0]) if p else 1e-3
            eps = 1e-8
            return w - lr * m / (np.sqrt(v) + eps)
        raise InvalidSpecError(f"no numeric rule for elementwise {fn!r}")

    def _scale_factor(self, params) -> float:
        if not params:
            return 1.0
        kind = params[0]
        if kind == "rsqrt_of":
            return 1.0 / math.sqrt(self.dim_value(params[1]))
        if kind == "factor":
            return float(params[1])
        raise InvalidSpecError(f"unknown scale parameterization {params!r}")


def random_feeds(graph: STGraph, table: SymbolTable,
                 rng: np.random.Generator,
                 scale: float = 0.5) -> Dict[str, np.ndarray]:
    """Gaussian values for every unproduced tensor the graph reads."""
    feeds: Dict[str, np.ndarray] = {}
    ev = Evaluator(graph, table, {})
    for name in graph.graph_inputs():
        feeds[name] = rng.normal(0.0, scale, size=ev.shape_of(name))
    return feeds


def finite_diff_grad(graph: STGraph, table: SymbolTable,
                     feeds: Dict[str, np.ndarray], loss: str,
                     wrt: str, eps: float = 1e-5) -> np.ndarray:
    """Central-difference d(loss)/d(wrt), element by element."""
    base = {k: np.array(v, dtype=np.float64) for k, v in feeds.items()}
    out = np.zeros_like(base[wrt])
    flat = base[wrt].reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = Evaluator(graph, table, base).run(upto=loss)[loss]
        flat[i] = orig - eps
        lo = Evaluator(graph, table, base).run(upto=loss)[loss]
        flat[i] = orig
        out.reshape(-1)[i] = (float(hi) - float(lo)) / (2 * eps)
    return out
