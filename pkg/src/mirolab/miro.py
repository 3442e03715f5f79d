"""Mutual-information regularizer against a frozen reference extractor.

The variational Gaussian q(z0 | z) has an identity mean encoder and a
bias-only diagonal variance encoder, variance = softplus(r). Per block and
per example the regularizer is ``sum_j log var_j + (z0_j - z_j)^2 / var_j``;
constants of the log-density and the factor 1/2 are dropped.

Reduction: mean over examples, mean over coordinates inside a block
(``reduction="mean"``, the default) or sum over coordinates
(``reduction="sum"``), then sum over blocks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError,
    DimensionError,
    DomainError,
    Tensor,
    clamp_min,
    cross_entropy_logits,
    div,
    log,
    matmul,
    no_grad,
    row,
    softplus,
    square,
    sub,
)
from .nn import ParamStore

VAR_FLOOR = 1e-8
INIT_VARIANCE = 0.1


def variance_init_bias(target_variance: float) -> float:
    """Bias r with softplus(r) == target_variance."""
    if not target_variance > 0:
        raise DomainError("target variance must be positive")
    return float(np.log(np.expm1(target_variance)))


@dataclass
class MiroConfig:
    lam: float = 0.1
    encoder_lr_mult: float = 10.0
    class_conditional: bool = False
    reduction: str = "mean"
    init_variance: float = INIT_VARIANCE

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if not self.encoder_lr_mult > 0:
            raise ValueError("encoder learning-rate multiplier must be positive")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")


class MiroHead:
    """Per-block identity mean encoder plus softplus variance biases."""

    def __init__(self, block_widths, init_variance: float = INIT_VARIANCE, lr_mult: float = 10.0,
                 prefix: str = "var"):
        self.block_widths = [int(d) for d in block_widths]
        r0 = variance_init_bias(init_variance)
        self.store = ParamStore()
        self.biases = []
        for b, d in enumerate(self.block_widths):
            t = Tensor(np.full(d, r0), requires_grad=True)
            # variance biases are not weights; decaying them would pull var toward ln 2
            self.store.add(f"{prefix}{b}.bias", t, multiplier=lr_mult, decay=False)
            self.biases.append(t)

    def __len__(self):
        return len(self.biases)

    @staticmethod
    def mean(z: Tensor) -> Tensor:
        return z

    def variance(self, b: int) -> Tensor:
        return softplus(self.biases[b])

    def variance_values(self) -> list[np.ndarray]:
        with no_grad():
            return [self.variance(b).data for b in range(len(self))]


def _rows_for(var: Tensor, n: int) -> Tensor:
    return matmul(np.ones((n, 1)), row(var))


def _reg_from_rows(z0, z: Tensor, var_rows: Tensor, reduction: str) -> Tensor:
    resid = sub(z0, MiroHead.mean(z))
    per = log(var_rows) + div(square(resid), clamp_min(var_rows, VAR_FLOOR))
    out = per.mean()
    if reduction == "sum":
        out = out * float(z.shape[1])
    return out


def _check_block(z0, z: Tensor, d: int):
    z0_shape = z0.shape if isinstance(z0, Tensor) else np.shape(z0)
    if z.data.ndim != 2 or z.shape != tuple(z0_shape) or z.shape[1] != d:
        raise DimensionError(f"block shapes {z0_shape} / {z.shape} do not match head width {d}")


def miro_reg_block(z0, z: Tensor, head: MiroHead, b: int, reduction: str = "mean") -> Tensor:
    """Regularizer for one block. z0 is treated as a constant."""
    z0 = z0.data if isinstance(z0, Tensor) else np.asarray(z0, dtype=np.float64)
    _check_block(z0, z, head.block_widths[b])
    var = clamp_min(head.variance(b), VAR_FLOOR)
    return _reg_from_rows(z0, z, _rows_for(var, z.shape[0]), reduction)


def cmiro_reg_block(z0, z: Tensor, heads: list[MiroHead], labels, b: int, reduction: str = "mean") -> Tensor:
    """Class-conditional regularizer: each example uses the head of its label."""
    z0 = z0.data if isinstance(z0, Tensor) else np.asarray(z0, dtype=np.float64)
    labels = np.asarray(labels)
    _check_block(z0, z, heads[0].block_widths[b])
    if labels.size and (labels.min() < 0 or labels.max() >= len(heads)):
        raise ContractError(f"label without a head (have {len(heads)} class heads)")
    var_rows = None
    for c, head in enumerate(heads):
        onehot = (labels == c).astype(np.float64).reshape(-1, 1)
        part = matmul(onehot, row(clamp_min(head.variance(b), VAR_FLOOR)))
        var_rows = part if var_rows is None else var_rows + part
    return _reg_from_rows(z0, z, var_rows, reduction)


def _check_structure(extractor, frozen, n_heads_blocks):
    if extractor.structure() != frozen.structure():
        raise ContractError("current and frozen extractors differ in block structure")
    if n_heads_blocks != extractor.n_blocks:
        raise ContractError("head block count does not match the extractor")


def _assemble(ce: Tensor, regs: list[Tensor], lam: float):
    reg_sum = regs[0]
    for r in regs[1:]:
        reg_sum = reg_sum + r
    total = ce + reg_sum * float(lam)
    components = {
        "ce": ce.item(),
        "reg": [r.item() for r in regs],
        "reg_sum": reg_sum.item(),
        "total": total.item(),
        "lambda": float(lam),
    }
    return total, components


def reference_features(frozen, x) -> list[np.ndarray]:
    with no_grad():
        return [z.data for z in frozen.forward_features(x)]


def miro_loss(x, y, extractor, frozen, classifier, head: MiroHead, config: MiroConfig,
              rng=None, train: bool = True):
    """Cross-entropy plus lambda times the summed per-block regularizer.

    Returns ``(total, components)``; ``components`` holds plain floats for logging.
    """
    if len(y) == 0:
        raise ContractError("empty batch")
    _check_structure(extractor, frozen, len(head))
    feats = extractor.forward_features(x)
    ref = reference_features(frozen, x)
    logits = classifier.forward_logits(feats[-1], train=train, rng=rng)
    ce = cross_entropy_logits(logits, y)
    regs = [miro_reg_block(z0, z, head, b, config.reduction) for b, (z0, z) in enumerate(zip(ref, feats))]
    return _assemble(ce, regs, config.lam)


def cmiro_loss(x, y, extractor, frozen, classifier, heads: list[MiroHead], config: MiroConfig,
               rng=None, train: bool = True):
    """Class-conditional variant of :func:`miro_loss` with one head per class."""
    if len(y) == 0:
        raise ContractError("empty batch")
    if not heads:
        raise ContractError("no class heads")
    _check_structure(extractor, frozen, len(heads[0]))
    feats = extractor.forward_features(x)
    ref = reference_features(frozen, x)
    logits = classifier.forward_logits(feats[-1], train=train, rng=rng)
    ce = cross_entropy_logits(logits, y)
    regs = [cmiro_reg_block(z0, z, heads, y, b, config.reduction) for b, (z0, z) in enumerate(zip(ref, feats))]
    return _assemble(ce, regs, config.lam)
