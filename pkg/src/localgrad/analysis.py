"""Diagnostic instruments: linear separability probes and linear CKA.

Both operate on per-block activation matrices collected over the inference
path, so heads and adapters never contribute and the probed model is never
mutated.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Parameter, Tensor, softmax_cross_entropy, matmul, add, backward, Tape
from .network import PartitionedNetwork, forward_inference
from .training import TrainState, lr_at, sgd_step


class ZeroVarianceError(ValueError):
    """A representation with no variance cannot be compared with CKA."""


def collect_activations(net: PartitionedNetwork, inputs: np.ndarray,
                        blocks: Optional[Sequence[int]] = None,
                        pool: bool = False, chunk: int = 2048) -> list[np.ndarray]:
    """Post-block activations on the inference path, one (n, features)
    matrix per requested block (default: all), flattened per sample.

    With ``pool=True`` spatial activations are globally averaged per
    channel before flattening, which bounds probe size on conv nets.
    """
    wanted = sorted(blocks) if blocks is not None else list(range(1, net.K + 1))
    bad = [k for k in wanted if not 1 <= k <= net.K]
    if bad:
        raise ValueError(f"block indices {bad} out of range 1..{net.K}")
    pieces: dict[int, list[np.ndarray]] = {k: [] for k in wanted}
    for lo in range(0, len(inputs), chunk):
        h = Tensor(inputs[lo:lo + chunk])
        for k, block in enumerate(net.blocks, start=1):
            h = block.forward(h)
            if k in pieces:
                out = h.data
                if pool and out.ndim == 4:
                    out = out.mean(axis=(2, 3))
                pieces[k].append(out.reshape(out.shape[0], -1))
    return [np.concatenate(pieces[k]) for k in wanted]


def model_checksum(net: PartitionedNetwork) -> str:
    """SHA-256 over the main-network parameter bytes, in declaration order."""
    digest = hashlib.sha256()
    for p in net.main_parameters():
        digest.update(p.value.data.tobytes())
    return digest.hexdigest()


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.1
    batch_size: int = 128
    momentum: float = 0.9
    seed: int = 0


@dataclass
class ProbeReport:
    accuracies: list[float]
    config: ProbeConfig
    checksum: str


def linear_probe(activations: np.ndarray, labels: np.ndarray,
                 cfg: Optional[ProbeConfig] = None) -> float:
    """Accuracy of a fresh linear classifier on frozen activations.

    The activations are split 80/20 (stratified, seeded), standardized with
    train-split statistics, and a single linear layer is trained with the
    training module's SGD under a cosine schedule. Returns held-out
    accuracy.
    """
    cfg = cfg or ProbeConfig()
    acts = np.asarray(activations, dtype=np.float64)
    y = np.asarray(labels)
    if acts.ndim != 2 or len(acts) != len(y):
        raise ValueError("expected (n, d) activations with n labels")
    classes = np.unique(y)
    if classes.size < 2:
        raise ZeroVarianceError(
            f"labels are degenerate: only class {classes.tolist()} present")
    n_classes = int(y.max()) + 1
    if len(y) < n_classes:
        raise ValueError(f"need at least {n_classes} samples, got {len(y)}")

    rng = np.random.default_rng(cfg.seed)
    train_idx, test_idx = [], []
    for c in classes:
        idx = np.where(y == c)[0]
        idx = idx[rng.permutation(len(idx))]
        cut = max(1, int(round(0.8 * len(idx))))
        cut = min(cut, len(idx) - 1) if len(idx) > 1 else cut
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    tr = np.concatenate(train_idx)
    te = np.concatenate(test_idx)
    mean = acts[tr].mean(axis=0)
    std = acts[tr].std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    xtr, ytr = (acts[tr] - mean) / std, y[tr]
    xte, yte = (acts[te] - mean) / std, y[te]

    w = Parameter(np.zeros((acts.shape[1], n_classes)), name="probe.w")
    b = Parameter(np.zeros(n_classes), name="probe.b")
    state = TrainState()
    n = len(ytr)
    for epoch in range(cfg.epochs):
        lr = lr_at("cosine", epoch, cfg.epochs, cfg.lr)
        order = np.random.default_rng((cfg.seed, epoch)).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            w.zero_grad()
            b.zero_grad()
            with Tape():
                logits = add(matmul(Tensor(xtr[idx]), w.tensor()), b.tensor())
                backward(softmax_cross_entropy(logits, ytr[idx]))
            sgd_step([w, b], state, lr, momentum=cfg.momentum, weight_decay=0.0)
    logits = xte @ w.value.data + b.value.data
    return float((np.argmax(logits, axis=1) == yte).mean())


def probe_blocks(net: PartitionedNetwork, inputs: np.ndarray, labels: np.ndarray,
                 cfg: Optional[ProbeConfig] = None) -> ProbeReport:
    """Train one probe per block, final block included; the model is frozen."""
    cfg = cfg or ProbeConfig()
    before = model_checksum(net)
    accs = []
    for acts in collect_activations(net, inputs, pool=True):
        accs.append(linear_probe(acts, labels, cfg))
    after = model_checksum(net)
    if before != after:
        raise RuntimeError("probing mutated the model under test")
    return ProbeReport(accs, cfg, before)


# ---------------------------------------------------------------------------
# Linear CKA
# ---------------------------------------------------------------------------

def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """|| Yc' Xc ||_F^2 / (|| Xc' Xc ||_F * || Yc' Yc ||_F) on column-centered
    matrices; feature-space form, O(n * d^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("linear_cka expects 2-D matrices")
    if x.shape[0] != y.shape[0]:
        raise ValueError(
            f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    num = float(np.linalg.norm(yc.T @ xc) ** 2)
    dx = float(np.linalg.norm(xc.T @ xc))
    dy = float(np.linalg.norm(yc.T @ yc))
    if dx == 0.0 or dy == 0.0:
        raise ZeroVarianceError(
            "constant representation: a denominator term is zero")
    return num / (dx * dy)


@dataclass
class CkaMatrix:
    values: np.ndarray   # (K, K); rows index model_a blocks, cols model_b
    model_a: str
    model_b: str


def cka_report(model_a: PartitionedNetwork, model_b: PartitionedNetwork,
               inputs: np.ndarray, ids: tuple[str, str] = ("a", "b"),
               pool: bool = True) -> CkaMatrix:
    """Linear CKA over all block pairs of two models on the same inputs."""
    if model_a.input_shape != model_b.input_shape:
        raise ValueError("models take different input shapes")
    if model_a.K != model_b.K:
        raise ValueError(
            f"models have different block counts: {model_a.K} vs {model_b.K}")
    acts_a = collect_activations(model_a, inputs, pool=pool)
    acts_b = collect_activations(model_b, inputs, pool=pool)
    k = model_a.K
    values = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            values[i, j] = linear_cka(acts_a[i], acts_b[j])
    return CkaMatrix(values, ids[0], ids[1])


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def write_probe_csv(report: ProbeReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("block,accuracy\n")
        for k, acc in enumerate(report.accuracies, start=1):
            fh.write(f"{k},{acc!r}\n")


def write_cka_csv(matrix: CkaMatrix, path) -> None:
    k = matrix.values.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("block," + ",".join(
            f"{matrix.model_b}_block{j}" for j in range(1, k + 1)) + "\n")
        for i, row in enumerate(matrix.values, start=1):
            fh.write(f"{matrix.model_a}_block{i},"
                     + ",".join(repr(float(v)) for v in row) + "\n")
