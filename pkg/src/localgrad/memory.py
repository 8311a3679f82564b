"""Analytic accounting of peak training memory, in scalar counts.

The headline number models the activation storage a minimally-retaining
runtime needs: a tensor is counted exactly when some backward rule consumes
it. Linear, conv and relu consume their inputs; adds, scaling, pooling,
flattening and stop-gradient consume nothing; the cross-entropy loss
consumes the logits.

End-to-end training must retain that set across the whole network at once.
Block-local training frees each block's set after its immediate backward,
so its peak is the maximum over blocks of the block's own set plus its
head/adapter set. Parameter, gradient-buffer and velocity counts are
reported per block for context but kept out of the headline: they are
identical bookkeeping in every mode and would bury the activation effect
the modes actually differ in.

Counts are exact integers derived from shapes, never sampled from an
allocator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import (
    AblationFlags,
    LayerSpec,
    PartitionedNetwork,
    build_partitioned,
    param_count,
)

MEMORY_MODES = ("e2e", "local", "man")


@dataclass
class MemoryReport:
    mode: str
    K: int
    peak_scalars: int
    per_block: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "mode": self.mode,
            "K": self.K,
            "peak_scalars": self.peak_scalars,
            "per_block": self.per_block,
        }, indent=2, sort_keys=True)


def _size(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def _chain_activations(layers, in_shape, batch: int) -> tuple[int, tuple]:
    """Retained scalars along a plain layer chain, and the output shape."""
    retained = 0
    shape = tuple(in_shape)
    for layer in layers:
        if layer.kind in ("linear", "conv2d", "relu"):
            retained += batch * _size(shape)
        shape = layer.out_shape(shape)
    return retained, shape


def _head_activations(head, in_shape, batch: int, n_classes: int) -> int:
    # pool consumes its input without retaining it
    feats = in_shape[0]
    hidden = head.hidden.out_features
    return batch * (feats + 2 * hidden + n_classes)


def _classifier_activations(clf, in_shape, batch: int, n_classes: int) -> int:
    return batch * (in_shape[0] + n_classes)


def _phase_params(block, head=None, adapter=None):
    params = param_count(block.parameters())
    trainable = params
    if head is not None:
        hp = param_count(head.parameters())
        params += hp
        trainable += hp
    if adapter is not None:
        ap = param_count(adapter.all_parameters())
        params += ap + adapter.ema_w.size + adapter.ema_b.size
        trainable += ap
    return params, trainable


def measure_peak_memory(layers: Sequence[LayerSpec], k: int, mode: str,
                        batch: int, *, input_shape: Sequence[int],
                        n_classes: int) -> MemoryReport:
    """Peak simultaneously-live scalar count for one training step.

    Deterministic pure function of the layer spec, partition count, mode
    and batch size. ``mode`` is one of e2e, local (plain block-local
    training) or man (block-local with adapters).
    """
    if mode not in MEMORY_MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MEMORY_MODES}")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    with_adapter = mode == "man"
    net = build_partitioned(
        layers, k, n_classes=n_classes, input_shape=input_shape,
        flags=AblationFlags(use_adapter=with_adapter), seed=0)
    return _measure(net, mode, batch)


def _measure(net: PartitionedNetwork, mode: str, batch: int) -> MemoryReport:
    n_classes = net.n_classes
    per_block = []
    shape = net.input_shape

    if mode == "e2e":
        total = 0
        for block in net.blocks:
            acts, shape = _chain_activations(block.layers, shape, batch)
            total += acts
            params = param_count(block.parameters())
            per_block.append({"block": block.index, "activations": acts,
                              "params": params, "grads": params,
                              "velocities": params})
        clf_acts = _classifier_activations(net.classifier, shape, batch, n_classes)
        total += clf_acts
        cp = param_count(net.classifier.parameters())
        per_block.append({"block": "classifier", "activations": clf_acts,
                          "params": cp, "grads": cp, "velocities": cp})
        return MemoryReport(mode, net.K, total, per_block)

    peak = 0
    for i, block in enumerate(net.blocks):
        kth = i + 1
        acts, out_shape = _chain_activations(block.layers, shape, batch)
        if kth < net.K:
            head = net.heads[i]
            adapter = net.adapters[i] if net.adapters else None
            if adapter is not None:
                # the block output feeds the copied layer and is retained by
                # it; the head then retains its own input (the adapter output
                # or, for spatial features, its pooled form)
                acts += batch * _size(out_shape)
                head_in = net.blocks[i + 1].first_parametric.out_shape(out_shape)
            else:
                head_in = out_shape
            acts += _head_activations(head, head_in, batch, n_classes)
            params, trainable = _phase_params(block, head, adapter)
        else:
            acts += _classifier_activations(net.classifier, out_shape, batch,
                                            n_classes)
            params = param_count(block.parameters()) + \
                param_count(net.classifier.parameters())
            trainable = params
        per_block.append({"block": kth, "activations": acts, "params": params,
                          "grads": trainable, "velocities": trainable})
        peak = max(peak, acts)
        shape = out_shape
    label = "local+man" if mode == "man" else mode
    return MemoryReport(label, net.K, peak, per_block)
