"""Gradient-isolated partitioned networks with momentum-coupled adapters.

A layer-spec list is split into K contiguous blocks. Blocks 1..K-1 each get
a small auxiliary classifier head for their local loss and, optionally, an
adapter holding two copies of the next block's first parametric layer: one
trained by the local backward pass, one tracked by exponential moving
average and never touched by gradients, plus a learnable per-feature bias.
The last block feeds the final classifier and trains on the global loss.

At inference time only the blocks and the final classifier run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    avgpool_global,
    conv2d,
    flatten,
    matmul,
    relu,
    stop_gradient,
)


class BudgetError(ValueError):
    """Raised when no auxiliary head fits inside the parameter budget."""


PARAMETRIC_KINDS = ("linear", "conv2d")
HEAD_BUDGET_RATIO = 0.05


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the architecture.

    dims is kind-specific: ``linear`` takes (out_features,), ``conv2d``
    takes (out_channels, kernel_size). ``relu``, ``avgpool_global`` and
    ``flatten`` take no dims. ``padding`` applies to conv2d only and is an
    integer or "same".
    """
    kind: str
    dims: tuple = ()
    init: str = "kaiming-uniform"
    padding: object = 0

    def __post_init__(self):
        if self.kind not in ("linear", "conv2d", "relu", "avgpool_global", "flatten"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"{self.kind}: dims must be positive, got {self.dims}")
        if self.kind == "linear" and len(self.dims) != 1:
            raise ValueError("linear expects dims=(out_features,)")
        if self.kind == "conv2d" and len(self.dims) != 2:
            raise ValueError("conv2d expects dims=(out_channels, kernel_size)")
        if self.init not in ("kaiming-uniform", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC_KINDS


def _init_weight(shape, fan_in: int, rng: np.random.Generator, init: str) -> np.ndarray:
    if init == "zeros":
        return np.zeros(shape)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Linear:
    kind = "linear"

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, name: str, init: str = "kaiming-uniform"):
        self.in_features = in_features
        self.out_features = out_features
        self.w = Parameter(_init_weight((in_features, out_features), in_features, rng, init),
                           name=f"{name}.w")
        self.b = Parameter(np.zeros(out_features), name=f"{name}.b")

    @staticmethod
    def apply(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        return add(matmul(x, w), b)

    def forward(self, x: Tensor) -> Tensor:
        return self.apply(x, self.w.tensor(), self.b.tensor())

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(
                f"linear {self.w.id}: expected input ({self.in_features},), got {in_shape}")
        return (self.out_features,)


class Conv2d:
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, name: str, padding=0,
                 init: str = "kaiming-uniform"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.w = Parameter(
            _init_weight((out_channels, in_channels, kernel_size, kernel_size),
                         fan_in, rng, init),
            name=f"{name}.w")
        self.b = Parameter(np.zeros((out_channels, 1, 1)), name=f"{name}.b")

    def apply(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        return add(conv2d(x, w, padding=self.padding), b)

    def forward(self, x: Tensor) -> Tensor:
        return self.apply(x, self.w.tensor(), self.b.tensor())

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(
                f"conv2d {self.w.id}: expected input ({self.in_channels},H,W), got {in_shape}")
        _, h, w = in_shape
        p = (self.kernel_size - 1) // 2 if self.padding == "same" else int(self.padding)
        ho = h + 2 * p - self.kernel_size + 1
        wo = w + 2 * p - self.kernel_size + 1
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv2d {self.w.id}: kernel {self.kernel_size} too large for input {in_shape}")
        return (self.out_channels, ho, wo)


class Relu:
    kind = "relu"

    def forward(self, x: Tensor) -> Tensor:
        return relu(x)

    def parameters(self):
        return []

    def out_shape(self, in_shape):
        return in_shape


class GlobalAvgPool:
    kind = "avgpool_global"

    def forward(self, x: Tensor) -> Tensor:
        return avgpool_global(x)

    def parameters(self):
        return []

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"avgpool_global: expected (C,H,W) input, got {in_shape}")
        return (in_shape[0],)


class Flatten:
    kind = "flatten"

    def forward(self, x: Tensor) -> Tensor:
        return flatten(x)

    def parameters(self):
        return []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


def _make_layer(spec: LayerSpec, in_shape, rng, name):
    if spec.kind == "linear":
        if len(in_shape) != 1:
            raise ShapeError(f"{name}: linear needs a flat input, got {in_shape}")
        return Linear(in_shape[0], spec.dims[0], rng, name, init=spec.init)
    if spec.kind == "conv2d":
        if len(in_shape) != 3:
            raise ShapeError(f"{name}: conv2d needs a (C,H,W) input, got {in_shape}")
        return Conv2d(in_shape[0], spec.dims[0], spec.dims[1], rng, name,
                      padding=spec.padding, init=spec.init)
    if spec.kind == "relu":
        return Relu()
    if spec.kind == "avgpool_global":
        return GlobalAvgPool()
    return Flatten()


def param_count(params: Sequence[Parameter]) -> int:
    return int(sum(p.value.data.size for p in params))


# ---------------------------------------------------------------------------
# Network pieces
# ---------------------------------------------------------------------------

@dataclass
class AblationFlags:
    use_adapter: bool = True
    use_ema: bool = True
    use_bias: bool = True
    raw_copy_no_ema: bool = False


class LocalBlock:
    """A contiguous run of layers updated only by its own local loss."""

    def __init__(self, index: int, layers: list):
        self.index = index
        self.layers = layers
        self.first_parametric = next(
            (l for l in layers if l.kind in PARAMETRIC_KINDS), None)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class AuxiliaryHead:
    """Pool (for spatial inputs) -> hidden linear -> relu -> classifier.

    The hidden width starts at the input feature count and is shrunk until
    the head fits within ``budget`` parameters.
    """

    def __init__(self, block_index: int, in_shape, n_classes: int, budget: int,
                 rng: np.random.Generator):
        self.block_index = block_index
        self.pool = len(in_shape) == 3
        in_features = in_shape[0]
        # head params: in*h + h (hidden) + h*classes + classes (out)
        max_hidden = (budget - n_classes) // (in_features + 1 + n_classes)
        hidden = min(in_features, max_hidden)
        if hidden < 1:
            need = in_features + 1 + 2 * n_classes
            raise BudgetError(
                f"auxiliary head for block {block_index} needs at least {need} "
                f"parameters (hidden width 1) but the budget is {budget}")
        name = f"head{block_index}"
        self.hidden = Linear(in_features, hidden, rng, f"{name}.hidden")
        self.out = Linear(hidden, n_classes, rng, f"{name}.out")
        self.budget_ratio = param_count(self.parameters()) / max(budget / HEAD_BUDGET_RATIO, 1)

    def forward(self, x: Tensor) -> Tensor:
        if self.pool:
            x = avgpool_global(x)
        return self.out.forward(relu(self.hidden.forward(x)))

    def parameters(self) -> list[Parameter]:
        return self.hidden.parameters() + self.out.parameters()


class MomentumAdapter:
    """Parallel copy of the next block's first layer, placed before the head.

    ``trained_*`` parameters learn from the local loss. ``ema_*`` arrays are
    plain values updated only by :func:`ema_update`; they never carry a tape
    node, so the backward pass cannot write into them. The learnable bias is
    one scalar per output feature (linear) or channel (conv) and is exempt
    from weight decay.
    """

    def __init__(self, block_index: int, source_layer, flags: AblationFlags):
        self.block_index = block_index
        self.kind = source_layer.kind
        self.flags = flags
        name = f"adapter{block_index}"
        self.trained_w = Parameter(source_layer.w.value.data.copy(),
                                   name=f"{name}.trained.w")
        self.trained_b = Parameter(source_layer.b.value.data.copy(),
                                   name=f"{name}.trained.b")
        self.ema_w = source_layer.w.value.data.copy()
        self.ema_b = source_layer.b.value.data.copy()
        if self.kind == "linear":
            bias_shape = (source_layer.out_features,)
        else:
            bias_shape = (source_layer.out_channels, 1, 1)
        self.bias = Parameter(np.zeros(bias_shape), name=f"{name}.bias", decay=False)
        self.padding = getattr(source_layer, "padding", 0)
        self.ema_updates = 0

    def _apply(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        if self.kind == "linear":
            return add(matmul(x, w), b)
        return add(conv2d(x, w, padding=self.padding), b)

    def forward(self, x: Tensor) -> Tensor:
        if not self.flags.use_adapter:
            return x
        y = self._apply(x, self.trained_w.tensor(), self.trained_b.tensor())
        if self.flags.use_ema:
            y = add(y, self._apply(x, Tensor(self.ema_w), Tensor(self.ema_b)))
        if self.flags.use_bias:
            y = add(y, self.bias.tensor())
        return y

    def trainable_parameters(self) -> list[Parameter]:
        if not self.flags.use_adapter:
            return []
        params = [self.trained_w, self.trained_b]
        if self.flags.use_bias:
            params.append(self.bias)
        return params

    def all_parameters(self) -> list[Parameter]:
        return [self.trained_w, self.trained_b, self.bias]


class ClassifierHead:
    """Final classifier: global pool for spatial features, then linear."""

    def __init__(self, in_shape, n_classes: int, rng: np.random.Generator):
        self.pool = len(in_shape) == 3
        self.out = Linear(in_shape[0], n_classes, rng, "c")

    def forward(self, x: Tensor) -> Tensor:
        if self.pool:
            x = avgpool_global(x)
        return self.out.forward(x)

    def parameters(self) -> list[Parameter]:
        return self.out.parameters()


class PartitionedNetwork:
    """K gradient-isolated blocks, per-block heads/adapters, final classifier."""

    def __init__(self, specs, input_shape, n_classes, k, flags, momentum, seed,
                 blocks, heads, adapters, classifier, block_out_shapes):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.K = k
        self.flags = flags
        self.momentum = momentum
        self.seed = seed
        self.blocks = blocks
        self.heads = heads
        self.adapters = adapters
        self.classifier = classifier
        self.block_out_shapes = block_out_shapes

    def main_parameters(self) -> list[Parameter]:
        params = [p for b in self.blocks for p in b.parameters()]
        return params + self.classifier.parameters()

    def aux_parameters(self) -> list[Parameter]:
        params = [p for h in self.heads for p in h.parameters()]
        for a in self.adapters:
            params.extend(a.all_parameters())
        return params

    def all_parameters(self) -> list[Parameter]:
        return self.main_parameters() + self.aux_parameters()

    def zero_grad(self) -> None:
        for p in self.all_parameters():
            p.zero_grad()

    def update_set(self, k: int) -> tuple[list[Parameter], list[Parameter]]:
        """Parameters stepped by block k's loss: (main-rate, aux-rate) lists."""
        if k < self.K:
            main = self.blocks[k - 1].parameters()
            aux = list(self.heads[k - 1].parameters())
            if self.adapters:
                aux.extend(self.adapters[k - 1].trainable_parameters())
            return main, aux
        return self.blocks[-1].parameters() + self.classifier.parameters(), []


def _split_sizes(n_parametric: int, k: int) -> list[int]:
    base, rem = divmod(n_parametric, k)
    return [base + 1 if i < rem else base for i in range(k)]


def _build_blocks_and_classifier(specs, input_shape, k, n_classes, seed):
    """Instantiate block layers and the classifier, deterministically.

    The rng stream is consumed in spec order then by the classifier, so the
    main-network initialization is independent of K and of ablation flags.
    """
    rng = np.random.default_rng(seed)
    n_parametric = sum(1 for s in specs if s.parametric)
    if n_parametric == 0:
        raise ValueError("the layer list has no parametric layers")
    if not 1 <= k <= n_parametric:
        raise ValueError(
            f"K={k} is out of range: the layer list has {n_parametric} parametric layers")
    sizes = _split_sizes(n_parametric, k)

    # boundaries fall just before the first parametric layer of each block
    layers_per_block: list[list] = [[] for _ in range(k)]
    shape = tuple(input_shape)
    block_idx, used_in_block = 0, 0
    for i, spec in enumerate(specs):
        if spec.parametric and used_in_block == sizes[block_idx]:
            block_idx += 1
            used_in_block = 0
        layer = _make_layer(spec, shape, rng, f"block{block_idx + 1}.layer{i}")
        shape = layer.out_shape(shape)
        layers_per_block[block_idx].append(layer)
        if spec.parametric:
            used_in_block += 1

    blocks = [LocalBlock(i + 1, ls) for i, ls in enumerate(layers_per_block)]
    out_shapes = []
    s = tuple(input_shape)
    for b in blocks:
        for layer in b.layers:
            s = layer.out_shape(s)
        out_shapes.append(s)
    classifier = ClassifierHead(out_shapes[-1], n_classes, rng)
    return blocks, classifier, out_shapes, rng


def build_partitioned(layers: Sequence[LayerSpec], k: int, *, n_classes: int,
                      input_shape: Sequence[int], flags: Optional[AblationFlags] = None,
                      momentum: float = 0.995, seed: int = 0) -> PartitionedNetwork:
    """Build a K-way partitioned network from a layer-spec list.

    Parametric layers are split into K contiguous blocks of near-equal
    count, earlier blocks taking the remainder. For every block but the
    last, an auxiliary head is built under the parameter budget and, when
    adapters are enabled, the adapter's trained and EMA copies both start
    as exact copies of the next block's first parametric layer.
    """
    flags = flags if flags is not None else AblationFlags()
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    specs = list(layers)
    blocks, classifier, out_shapes, rng = _build_blocks_and_classifier(
        specs, input_shape, k, n_classes, seed)

    budget = int(HEAD_BUDGET_RATIO * param_count(
        [p for b in blocks for p in b.parameters()] + classifier.parameters()))

    adapters = []
    if flags.use_adapter:
        for i in range(k - 1):
            adapters.append(MomentumAdapter(i + 1, blocks[i + 1].first_parametric, flags))

    heads = []
    for i in range(k - 1):
        if flags.use_adapter:
            head_in = blocks[i + 1].first_parametric.out_shape(out_shapes[i])
        else:
            head_in = out_shapes[i]
        heads.append(AuxiliaryHead(i + 1, head_in, n_classes, budget, rng))

    return PartitionedNetwork(specs, input_shape, n_classes, k, flags, momentum,
                              seed, blocks, heads, adapters, classifier, out_shapes)


def adapter_forward(adapter: MomentumAdapter, x: Tensor) -> Tensor:
    """trained(x) + ema(x) + bias, with each term gated by its ablation flag.

    The EMA term is computed from constant tensors, so no gradient can reach
    the EMA copy; gradient still flows through it to ``x``. With adapters
    disabled this is the identity.
    """
    return adapter.forward(x)


def forward_train_block(net: PartitionedNetwork, k: int, x_k: Tensor):
    """Training-time forward of block k.

    For k < K returns (local logits, detached activation for block k+1);
    the adapter output feeds only the head, never the next block. For
    k == K returns (global logits, None).
    """
    if not 1 <= k <= net.K:
        raise ValueError(f"block index {k} out of range 1..{net.K}")
    h = net.blocks[k - 1].forward(x_k)
    if k == net.K:
        return net.classifier.forward(h), None
    a = net.adapters[k - 1].forward(h) if net.flags.use_adapter else h
    logits = net.heads[k - 1].forward(a)
    return logits, stop_gradient(h)


def forward_inference(net: PartitionedNetwork, x: Tensor) -> Tensor:
    """Deployment path: blocks then classifier; heads and adapters unread."""
    for block in net.blocks:
        x = block.forward(x)
    return net.classifier.forward(x)


def ema_update(adapter: MomentumAdapter, next_first_layer, m: float) -> None:
    """ema <- m * ema + (1 - m) * source, elementwise; the source layer is
    unmodified. With the raw-copy ablation the EMA copy is overwritten with
    the source exactly instead of blended.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    src_w = next_first_layer.w.value.data
    src_b = next_first_layer.b.value.data
    if src_w.shape != adapter.ema_w.shape or src_b.shape != adapter.ema_b.shape:
        raise ShapeError(
            f"ema_update: adapter copies {adapter.ema_w.shape}/{adapter.ema_b.shape} "
            f"do not match source {src_w.shape}/{src_b.shape}")
    if adapter.flags.raw_copy_no_ema:
        adapter.ema_w[...] = src_w
        adapter.ema_b[...] = src_b
    else:
        adapter.ema_w *= m
        adapter.ema_w += (1.0 - m) * src_w
        adapter.ema_b *= m
        adapter.ema_b += (1.0 - m) * src_b
    adapter.ema_updates += 1


def strip_adapters(net: PartitionedNetwork) -> PartitionedNetwork:
    """Deployment copy containing only the blocks and the final classifier.

    Parameter values are copied bitwise; the result has no heads or
    adapters, and its parameter count equals an end-to-end build of the
    same layer spec.
    """
    blocks, classifier, out_shapes, _ = _build_blocks_and_classifier(
        net.specs, net.input_shape, net.K, net.n_classes, net.seed)
    stripped = PartitionedNetwork(
        net.specs, net.input_shape, net.n_classes, net.K,
        AblationFlags(use_adapter=False), net.momentum, net.seed,
        blocks, [], [], classifier, out_shapes)
    for dst, src in zip(stripped.main_parameters(), net.main_parameters()):
        dst.value.data[...] = src.value.data
    return stripped
