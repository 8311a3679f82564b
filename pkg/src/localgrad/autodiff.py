"""Reverse-mode automatic differentiation over dense float64 arrays.

A define-by-run tape records primitive operations; ``backward`` walks the
tape in reverse and accumulates gradients into reachable :class:`Parameter`
objects. Nodes can be flagged as gradient boundaries: gradient arriving at
a boundary node is dropped instead of propagated, which is what makes
gradient-isolated block training well-defined.

Everything is double precision. The tape is rebuilt on every training step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes do not conform to a primitive's shape rule."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("inputs", "vjp", "param", "boundary")

    def __init__(self, inputs, vjp, param=None, boundary=False):
        self.inputs = inputs        # tuple of node ids (None for constants)
        self.vjp = vjp              # out_grad -> tuple of input grads
        self.param = param          # Parameter for leaf nodes
        self.boundary = boundary    # gradient is dropped here


_ACTIVE_TAPE: Optional["Tape"] = None

# When set to a one-element list, relu records the smallest |x| it sees.
# grad_check uses this to exclude coordinates near the non-differentiable
# point at 0.
_KINK_WATCH: Optional[list] = None


class Tape:
    """Append-only record of one forward computation.

    Use as a context manager; operations executed inside the block are
    recorded if they involve tracked tensors. Only one tape is active at a
    time (single-threaded by contract).
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_cache: dict[int, int] = {}  # id(Parameter) -> node id

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, inputs, vjp, param=None, boundary=False) -> int:
        self.nodes.append(_Node(inputs, vjp, param, boundary))
        return len(self.nodes) - 1

    def leaf(self, param: "Parameter") -> int:
        nid = self._leaf_cache.get(id(param))
        if nid is None:
            nid = self._record((), None, param=param)
            self._leaf_cache[id(param)] = nid
        return nid


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


class Tensor:
    """Dense float64 array plus an optional handle into the active tape.

    A tensor without a node handle is a constant: it contributes zero
    gradient to any backward pass.
    """

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node: Optional[int] = None, tape: Optional[Tape] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tracked = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tracked})"


_param_counter = 0


class Parameter:
    """Trainable value with an accumulated gradient of identical shape.

    ``reads`` counts how many times the value was pulled into a forward
    pass (used by the inference-path access-tracking checks) and
    ``updates`` counts optimizer writes.
    """

    def __init__(self, value, name: Optional[str] = None, decay: bool = True):
        global _param_counter
        arr = np.array(value, dtype=np.float64)
        self.value = Tensor(arr)
        self.grad = np.zeros_like(arr)
        if name is None:
            _param_counter += 1
            name = f"p{_param_counter}"
        self.id = name
        self.decay = decay   # whether weight decay applies
        self.reads = 0
        self.updates = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.data.shape

    def tensor(self) -> Tensor:
        """Return the value as a Tensor, registering a tape leaf if recording."""
        self.reads += 1
        tape = _ACTIVE_TAPE
        if tape is None:
            return Tensor(self.value.data)
        return Tensor(self.value.data, tape.leaf(self), tape)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.id}, shape={self.shape})"


# ---------------------------------------------------------------------------
# Recording helper
# ---------------------------------------------------------------------------

def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap a primitive's output, recording it when any input is tracked."""
    tape = _ACTIVE_TAPE
    if tape is None or all(t.node is None for t in inputs):
        return Tensor(data)
    nid = tape._record(tuple(t.node for t in inputs), vjp)
    return Tensor(data, nid, tape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over axes that were broadcast so it matches ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: expected (n,k) @ (k,m), got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _result(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    a_shape, b_shape = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _result(out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    if _KINK_WATCH is not None and xd.size:
        _KINK_WATCH[0] = min(_KINK_WATCH[0], float(np.abs(xd).min()))
    out = np.maximum(xd, 0.0)

    def vjp(g):
        # derivative at exactly 0 is defined as 0
        return (g * (xd > 0.0),)

    return _result(out, (x,), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def vjp(g):
        return (g * c,)

    return _result(out, (x,), vjp)


def flatten(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: expected at least 2 dims, got shape {x.shape}")
    in_shape = x.shape
    out = x.data.reshape(in_shape[0], -1)

    def vjp(g):
        return (g.reshape(in_shape),)

    return _result(out, (x,), vjp)


def avgpool_global(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(
            f"avgpool_global: expected (N,C,H,W), got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    inv = 1.0 / (h * w)

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, (n, c, h, w)),)

    return _result(out, (x,), vjp)


def _conv_pad(padding, kh: int) -> int:
    if padding == "same":
        if kh % 2 == 0:
            raise ShapeError("conv2d: same-padding requires an odd kernel size")
        return (kh - 1) // 2
    p = int(padding)
    if p < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {p}")
    return p


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + ho, j:j + wo]
    return cols


def conv2d(x: Tensor, kernel: Tensor, padding=0) -> Tensor:
    """Stride-1 2-D cross-correlation, optional zero padding, square kernels."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected x (N,C,H,W) and kernel (O,C,kh,kw), "
            f"got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernels must be square, got {kh}x{kw}")
    if cin != cin_k:
        raise ShapeError(
            f"conv2d: input has {cin} channels but kernel expects {cin_k}")
    p = _conv_pad(padding, kh)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = h + 2 * p, w + 2 * p
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = _im2col(xp, kh, kw)                       # (N,C,kh,kw,Ho,Wo)
    kd = kernel.data
    out = np.tensordot(kd, cols, axes=([1, 2, 3], [1, 2, 3]))  # (O,N,Ho,Wo)
    out = out.transpose(1, 0, 2, 3).copy()

    def vjp(g):
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(g, kd, axes=([1], [0]))  # (N,Ho,Wo,C,kh,kw)
        gxp = np.zeros((n, cin, hp, wp), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gk

    return _result(out, (x, kernel), vjp)


def sum_all(x: Tensor) -> Tensor:
    in_shape = x.shape
    out = np.asarray(x.data.sum())

    def vjp(g):
        return (np.full(in_shape, float(g)),)

    return _result(out, (x,), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(
            f"softmax_cross_entropy: expected (batch, classes) logits, got {logits.shape}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != ld.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: expected {ld.shape[0]} labels, got shape {y.shape}")
    n, classes = ld.shape
    if y.size:
        bad = np.where((y < 0) | (y >= classes))[0]
        if bad.size:
            i = int(bad[0])
            raise ValueError(
                f"softmax_cross_entropy: label {int(y[i])} at index {i} "
                f"out of range [0, {classes})")
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = lse - shifted[rows, y]
    out = np.asarray(losses.mean())
    probs = np.exp(shifted - lse[:, None])

    def vjp(g):
        gl = probs.copy()
        gl[rows, y] -= 1.0
        gl *= float(g) / n
        return (gl,)

    return _result(out, (logits,), vjp)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; gradient is dropped at this node."""
    tape = _ACTIVE_TAPE
    if tape is None or x.node is None:
        return Tensor(x.data)
    nid = tape._record((x.node,), None, boundary=True)
    return Tensor(x.data, nid, tape)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "relu": relu,
    "conv2d": conv2d,
    "avgpool_global": avgpool_global,
    "flatten": flatten,
    "scale": scale,
}


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by primitive name. Raises ShapeError on nonconforming inputs."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(theta) into every reachable Parameter's grad.

    Traversal never crosses a boundary node, so parameters separated from
    the loss by a stop-gradient receive exactly zero (they are not visited).
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None or loss.tape is None:
        raise ValueError("backward: loss is not recorded on a tape")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=np.float64)}
    for nid in range(loss.node, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.param is not None:
            node.param.grad += g
            continue
        if node.boundary:
            continue
        for in_id, gin in zip(node.inputs, node.vjp(g)):
            if in_id is None:
                continue
            prev = grads.get(in_id)
            # never accumulate in place: vjp outputs may share buffers
            grads[in_id] = gin if prev is None else prev + gin


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    checked: int
    skipped: int
    worst: str = ""
    failures: list = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max relative error {self.max_rel_error:.3e} "
                f"({self.checked} coords, {self.skipped} skipped near kinks)"
                + (f"; worst at {self.worst}" if self.worst else ""))


def _eval_value(f) -> tuple[float, float]:
    """Evaluate f without recording; also return the closest relu-kink distance."""
    global _KINK_WATCH
    _KINK_WATCH = [math.inf]
    try:
        out = f()
        return float(out.data), _KINK_WATCH[0]
    finally:
        _KINK_WATCH = None


def grad_check(f, params: Sequence[Parameter], tol: float = 1e-5,
               step: float = 1e-5, max_coords_per_param: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` is a zero-argument callable composing primitives into a scalar;
    it must be deterministic. Coordinates whose perturbed evaluations bring
    a relu input within 1e-6 of its kink are excluded. When
    ``max_coords_per_param`` is given, a seeded sample of coordinates is
    checked instead of all of them.
    """
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
        if loss.data.shape != ():
            raise ShapeError("grad_check: f must return a scalar")
        backward(loss)
    if not np.isfinite(loss.data):
        return GradCheckReport(False, math.inf, 0, 0, "loss",
                               ["non-finite loss value"])
    analytic = {p.id: p.grad.copy() for p in params}
    for p in params:
        if not np.isfinite(analytic[p.id]).all():
            return GradCheckReport(False, math.inf, 0, 0, p.id,
                                   [f"non-finite analytic gradient in {p.id}"])

    rng = np.random.default_rng(seed)
    max_rel, worst = 0.0, ""
    checked = skipped = 0
    failures: list[str] = []
    for p in params:
        flat = p.value.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            lp, kink_p = _eval_value(f)
            flat[idx] = orig - step
            lm, kink_m = _eval_value(f)
            flat[idx] = orig
            where = f"{p.id}[{idx}]"
            if not (math.isfinite(lp) and math.isfinite(lm)):
                return GradCheckReport(False, math.inf, checked, skipped, where,
                                       [f"non-finite value at {where}"])
            # a perturbed evaluation within the step of a relu kink may have
            # crossed it, so the central difference is unreliable there
            if min(kink_p, kink_m) <= max(1e-6, step):
                skipped += 1
                continue
            num = (lp - lm) / (2.0 * step)
            a = float(analytic[p.id].reshape(-1)[idx])
            scale_ = max(abs(a), abs(num))
            # absolute comparison for near-zero entries, relative otherwise
            rel = abs(a - num) if scale_ < 1e-4 else abs(a - num) / scale_
            checked += 1
            if rel > max_rel:
                max_rel, worst = rel, where
            if rel > tol:
                failures.append(
                    f"{where}: analytic {a:.6e} vs numeric {num:.6e} (rel {rel:.3e})")
    return GradCheckReport(not failures, max_rel, checked, skipped, worst, failures)
