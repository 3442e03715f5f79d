"""Block-structured MLP extractors, linear classifiers, parameter stores, Adam, checkpoints."""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ACTIVATIONS,
    ContractError,
    DimensionError,
    Tensor,
    matmul,
    mul,
    repeat_rows,
)


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return matmul(x, weight) + repeat_rows(bias, x.shape[0])


class ParamStore:
    """Named parameters with per-name learning-rate multipliers and weight-decay flags."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.multipliers: dict[str, float] = {}
        self.decay: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, multiplier: float = 1.0, decay: bool = True):
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if not multiplier > 0:
            raise ContractError("learning-rate multiplier must be positive")
        self.params[name] = tensor
        self.multipliers[name] = float(multiplier)
        self.decay[name] = decay
        return tensor

    def update(self, other: "ParamStore", prefix: str = ""):
        for name, t in other.params.items():
            self.add(prefix + name, t, other.multipliers[name], other.decay[name])
        return self

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load(self, values: dict[str, np.ndarray]):
        for n, v in values.items():
            self.params[n].data = np.array(v, dtype=np.float64)


def init_params(widths, seed, prefix: str = "") -> ParamStore:
    """Xavier-uniform weights and zero biases for a chain of linear layers."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise DimensionError(f"invalid layer widths {widths}")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for i, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
        store.add(f"{prefix}{i}.weight", Tensor(xavier_uniform(rng, d_in, d_out), requires_grad=True))
        store.add(f"{prefix}{i}.bias", Tensor(np.zeros(d_out), requires_grad=True))
    return store


class BlockMLP:
    """Feature extractor made of B (linear → activation) blocks.

    ``forward_features`` returns every block output; the last one is the
    feature vector fed to the classifier.
    """

    def __init__(self, widths, activation: str = "relu", seed: int = 0, store: ParamStore | None = None):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 3:
            raise DimensionError("a BlockMLP needs at least 2 blocks")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.store = store if store is not None else init_params(self.widths, seed, prefix="block")

    @property
    def n_blocks(self) -> int:
        return len(self.widths) - 1

    @property
    def block_widths(self) -> list[int]:
        return self.widths[1:]

    @property
    def in_width(self) -> int:
        return self.widths[0]

    def block_params(self, b: int):
        return self.store[f"block{b}.weight"], self.store[f"block{b}.bias"]

    def forward_features(self, x) -> list[Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_width:
            raise DimensionError(f"input shape {x.shape} does not match width {self.in_width}")
        act = ACTIVATIONS[self.activation]
        feats = []
        h = x
        for b in range(self.n_blocks):
            h = act(affine(h, *self.block_params(b)))
            feats.append(h)
        return feats

    __call__ = forward_features

    def structure(self):
        return tuple(self.widths), self.activation


def forward_features(model: BlockMLP, x) -> list[Tensor]:
    return model.forward_features(x)


class Classifier:
    def __init__(self, d_in: int, n_classes: int, dropout: float = 0.0, seed: int = 0,
                 store: ParamStore | None = None):
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.d_in, self.n_classes, self.dropout = int(d_in), int(n_classes), float(dropout)
        self.store = store if store is not None else init_params([d_in, n_classes], seed, prefix="linear")

    @property
    def weight(self):
        return self.store["linear0.weight"]

    @property
    def bias(self):
        return self.store["linear0.bias"]

    def forward_logits(self, z: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.d_in:
            raise DimensionError(f"classifier expects width {self.d_in}, got {z.shape}")
        if train and self.dropout > 0.0:
            if rng is None:
                raise ContractError("train-mode dropout needs an rng")
            keep = 1.0 - self.dropout
            mask = (rng.random(z.shape) < keep) / keep
            z = mul(z, mask)
        return affine(z, self.weight, self.bias)

    __call__ = forward_logits


def forward_logits(classifier: Classifier, z: Tensor, train: bool = False, rng=None) -> Tensor:
    return classifier.forward_logits(z, train, rng)


def clone_frozen(model):
    """Deep copy whose parameters never record gradients."""
    twin = copy.copy(model)
    twin.store = ParamStore()
    for name, t in model.store.items():
        twin.store.add(name, Tensor(t.data.copy(), requires_grad=False),
                       model.store.multipliers[name], model.store.decay[name])
    if hasattr(model, "widths"):
        twin.widths = list(model.widths)
    return twin


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, store: ParamStore, grads: dict[str, np.ndarray]) -> ParamStore:
    missing = [n for n in store if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for {missing}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in store.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if state.weight_decay and store.decay[name]:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        lr = state.lr * store.multipliers[name]
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return store


# ---------------------------------------------------------------- checkpoints

MAGIC = "MIROLAB-CKPT 1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    """Text header (names, shapes, meta) followed by little-endian float64 payload."""
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        lines.append(f"meta {k}={v}")
    for name, arr in tensors.items():
        if " " in name:
            raise ValueError("tensor names may not contain spaces")
        shape = ",".join(str(s) for s in np.shape(arr))
        lines.append(f"tensor {name} {shape}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in tensors.values())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    meta, entries = {}, []
    pos = 0
    first = True
    while True:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if first:
            if line != MAGIC:
                raise ValueError(f"{path}: not a mirolab checkpoint")
            first = False
            continue
        if line == "end":
            break
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, v = rest.split("=", 1)
            meta[k] = v
        elif kind == "tensor":
            name, _, shape = rest.partition(" ")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            entries.append((name, dims))
        else:
            raise ValueError(f"{path}: bad header line {line!r}")
    tensors = {}
    for name, dims in entries:
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)
        tensors[name] = arr.reshape(dims)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return tensors, meta


def save_model(path, extractor: BlockMLP, classifier: Classifier | None = None, meta: dict | None = None):
    tensors = {f"f.{n}": t.data for n, t in extractor.store.items()}
    if classifier is not None:
        tensors.update({f"g.{n}": t.data for n, t in classifier.store.items()})
    info = {"widths": ",".join(map(str, extractor.widths)), "activation": extractor.activation}
    info.update(meta or {})
    save_checkpoint(path, tensors, info)


def load_model(path) -> tuple[BlockMLP, Classifier | None, dict]:
    tensors, meta = load_checkpoint(path)
    widths = [int(w) for w in meta["widths"].split(",")]
    model = BlockMLP(widths, meta.get("activation", "relu"), store=ParamStore())
    for b in range(len(widths) - 1):
        for kind in ("weight", "bias"):
            name = f"block{b}.{kind}"
            model.store.add(name, Tensor(tensors[f"f.{name}"], requires_grad=True))
    classifier = None
    if "g.linear0.weight" in tensors:
        w = tensors["g.linear0.weight"]
        store = ParamStore()
        store.add("linear0.weight", Tensor(w, requires_grad=True))
        store.add("linear0.bias", Tensor(tensors["g.linear0.bias"], requires_grad=True))
        classifier = Classifier(w.shape[0], w.shape[1], store=store)
    return model, classifier, meta
