"""Synthetic multi-domain classification suites, splits, leave-one-out and batching."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

VAL_FRACTION = 0.2


@dataclass(frozen=True)
class DomainDataset:
    domain: int
    x: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) == 0 or len(self.x) != len(self.y):
            raise ContractError("dataset must be non-empty with one label per row")
        if not np.all(np.isfinite(self.x)):
            raise ContractError("non-finite features")
        self.x.setflags(write=False)
        self.y.setflags(write=False)

    def __len__(self):
        return len(self.y)


@dataclass
class DomainBatch:
    x: np.ndarray
    y: np.ndarray
    domains: np.ndarray

    def __len__(self):
        return len(self.y)


def stratified_split(y: np.ndarray, rng: np.random.Generator, fraction: float = VAL_FRACTION):
    val = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        val.append(idx[: int(round(fraction * len(idx)))])
    val_idx = np.sort(np.concatenate(val))
    train_idx = np.setdiff1d(np.arange(len(y)), val_idx)
    return train_idx, val_idx


class MultiDomainSuite:
    """Ordered domains plus a stratified 80/20 train/validation split of each."""

    def __init__(self, datasets: list[DomainDataset], n_classes: int, spec: dict, seed: int):
        self.datasets = list(datasets)
        self.n_classes = int(n_classes)
        self.spec = dict(spec)
        self.seed = int(seed)
        self.splits = {}
        for ds in self.datasets:
            rng = np.random.default_rng([self.seed, 7919, ds.domain])
            self.splits[ds.domain] = stratified_split(ds.y, rng)

    def __len__(self):
        return len(self.datasets)

    @property
    def domains(self) -> list[int]:
        return [ds.domain for ds in self.datasets]

    @property
    def n_features(self) -> int:
        return self.datasets[0].x.shape[1]

    def dataset(self, domain: int) -> DomainDataset:
        for ds in self.datasets:
            if ds.domain == domain:
                return ds
        raise KeyError(domain)

    def train(self, domain: int):
        ds = self.dataset(domain)
        idx = self.splits[domain][0]
        return ds.x[idx], ds.y[idx]

    def val(self, domain: int):
        ds = self.dataset(domain)
        idx = self.splits[domain][1]
        return ds.x[idx], ds.y[idx]

    def full(self, domain: int):
        ds = self.dataset(domain)
        return ds.x, ds.y

    def subset(self, domains) -> "MultiDomainSuite":
        keep = set(domains)
        out = MultiDomainSuite.__new__(MultiDomainSuite)
        out.datasets = [ds for ds in self.datasets if ds.domain in keep]
        out.n_classes, out.spec, out.seed = self.n_classes, dict(self.spec), self.seed
        out.splits = {d: self.splits[d] for d in keep}
        return out

    def reordered(self, order) -> "MultiDomainSuite":
        out = self.subset(self.domains)
        out.datasets = [self.dataset(d) for d in order]
        return out

    def for_target(self, target: int) -> "MultiDomainSuite":
        """Suite as seen when ``target`` is held out (spurious suites flip the target's sign)."""
        if self.spec.get("generator") != "spurious_blobs" or not self.spec.get("flip_on_holdout", True):
            return self
        spec = dict(self.spec)
        spec["flip_target"] = target
        return suite_from_spec(spec).reordered(self.domains)


# ---------------------------------------------------------------- generators


def rotation_matrix(degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    if degrees % 90 == 0:
        c, s = float(round(c)), float(round(s))
    return np.array([[c, -s], [s, c]])


def rotate(points: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0:
        return points.copy()
    return points @ rotation_matrix(degrees).T


def moons_base(n: int, noise: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaved half circles, centered at the origin; classes of size floor/ceil(n/2)."""
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) - np.array([0.5, 0.25])
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    order = rng.permutation(n)
    return x[order], y[order]


def gen_rotated_moons(angles, n_per_domain: int = 400, noise: float = 0.1, seed: int = 0,
                      domain_offset: int = 0, nuisance_dims: int = 0, nuisance_std: float = 1.0) -> MultiDomainSuite:
    """Rotated two-moons per domain.

    ``nuisance_dims`` appends label-irrelevant N(0, nuisance_std^2) coordinates,
    identically distributed in every domain, after the two moon coordinates.
    """
    angles = [float(a) for a in angles]
    if len(angles) < 2:
        raise ContractError("need at least two domains")
    if noise < 0 or nuisance_std < 0 or nuisance_dims < 0:
        raise ValueError("noise, nuisance_std and nuisance_dims must be non-negative")
    datasets = []
    for i, angle in enumerate(angles):
        dom = domain_offset + i
        x, y = moons_base(n_per_domain, noise, [seed, dom])
        x = rotate(x, angle)
        if nuisance_dims:
            extra = nuisance_std * np.random.default_rng([seed, dom, 2]).standard_normal((n_per_domain, nuisance_dims))
            x = np.hstack([x, extra])
        datasets.append(DomainDataset(dom, x, y, {"angle": angle}))
    spec = {"generator": "rotated_moons", "angles": angles, "n_per_domain": n_per_domain,
            "noise": noise, "seed": seed, "domain_offset": domain_offset}
    if nuisance_dims:
        spec.update(nuisance_dims=nuisance_dims, nuisance_std=nuisance_std)
    return MultiDomainSuite(datasets, 2, spec, seed)


def spurious_values(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Label-correlated value in [-1, 1]."""
    return 2.0 * y / max(n_classes - 1, 1) - 1.0


def class_means(n_classes: int, d: int, separation: float, seed) -> np.ndarray:
    """Class centers ``separation`` apart: a randomly oriented regular simplex, or a
    regular polygon (adjacent centers ``separation`` apart) when d < n_classes - 1."""
    rng = np.random.default_rng([seed, 104729])
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    if n_classes - 1 <= d:
        centered = np.eye(n_classes) - 1.0 / n_classes
        u, _, _ = np.linalg.svd(centered)
        coords = centered @ u[:, : n_classes - 1]
        return (separation / np.sqrt(2.0)) * coords @ basis[:, : n_classes - 1].T
    if d < 2:
        raise ValueError("need at least 2 core dims for more than 2 classes")
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    radius = separation / (2.0 * np.sin(np.pi / n_classes))
    coords = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return coords @ basis[:, :2].T


def gen_spurious_blobs(strengths, n_per_domain: int = 400, seed: int = 0, n_classes: int = 2,
                       d_core: int = 4, core_sep: float = 3.0, core_noise: float = 1.0,
                       domain_shift: float = 0.5, spurious_noise: float = 1.0,
                       flip_target: int | None = None, flip_on_holdout: bool = True,
                       domain_offset: int = 0, with_spurious: bool = True) -> MultiDomainSuite:
    """Gaussian class blobs in ``d_core`` dims plus one spurious coordinate.

    Spurious coordinate = spurious_values(y) * strength_d + N(0, spurious_noise^2).
    The domain listed as ``flip_target`` uses the negated strength.
    """
    strengths = [float(s) for s in strengths]
    if not np.all(np.isfinite(strengths)):
        raise ValueError("strengths must be finite")
    if len(strengths) < 2:
        raise ContractError("need at least two domains")
    means = class_means(n_classes, d_core, core_sep, seed)
    datasets = []
    for i, s in enumerate(strengths):
        dom = domain_offset + i
        rng = np.random.default_rng([seed, dom])
        shift = domain_shift * rng.standard_normal(d_core)
        y = np.arange(n_per_domain) % n_classes
        y = y[rng.permutation(n_per_domain)].astype(np.int64)
        core = means[y] + shift + core_noise * rng.standard_normal((n_per_domain, d_core))
        noise = spurious_noise * rng.standard_normal(n_per_domain)
        sign = -1.0 if flip_target == dom else 1.0
        spur = spurious_values(y, n_classes) * (sign * s) + noise
        x = np.concatenate([core, spur[:, None]], axis=1) if with_spurious else core
        datasets.append(DomainDataset(dom, x, y, {"strength": sign * s}))
    spec = {"generator": "spurious_blobs", "strengths": strengths, "n_per_domain": n_per_domain,
            "seed": seed, "n_classes": n_classes, "d_core": d_core, "core_sep": core_sep,
            "core_noise": core_noise, "domain_shift": domain_shift, "spurious_noise": spurious_noise,
            "flip_target": flip_target, "flip_on_holdout": flip_on_holdout, "domain_offset": domain_offset,
            "with_spurious": with_spurious}
    return MultiDomainSuite(datasets, n_classes, spec, seed)


GENERATORS = {"rotated_moons": gen_rotated_moons, "spurious_blobs": gen_spurious_blobs}


def suite_from_spec(spec: dict) -> MultiDomainSuite:
    spec = dict(spec)
    gen = GENERATORS[spec.pop("generator")]
    spec.pop("angles_or_strengths", None)
    if gen is gen_rotated_moons:
        return gen(spec.pop("angles"), **spec)
    return gen(spec.pop("strengths"), **spec)


# ---------------------------------------------------------------- protocol


def leave_one_out(suite: MultiDomainSuite):
    """Yield (source domains, target domain) with each domain held out once."""
    domains = suite.domains
    if len(domains) < 2:
        raise ContractError("leave-one-out needs at least two domains")
    for t in domains:
        yield [d for d in domains if d != t], t


def _epoch_perm(seed: int, domain: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, domain, epoch, 31337]).permutation(n)


def _stream_slice(seed: int, domain: int, n: int, start: int, count: int) -> np.ndarray:
    out = []
    pos = start
    while len(out) < count:
        epoch, offset = divmod(pos, n)
        perm = _epoch_perm(seed, domain, epoch, n)
        take = min(n - offset, count - len(out))
        out.extend(perm[offset:offset + take])
        pos += take
    return np.asarray(out, dtype=np.int64)


def sample_batch(suite: MultiDomainSuite, sources, N: int, seed: int, step: int) -> DomainBatch:
    """N training examples from each source domain; per-domain epochs without replacement."""
    xs, ys, ds = [], [], []
    for d in sources:
        x, y = suite.train(d)
        if len(y) < N:
            raise ContractError(f"domain {d} has {len(y)} training rows, batch needs {N}")
        idx = _stream_slice(seed, d, len(y), step * N, N)
        xs.append(x[idx])
        ys.append(y[idx])
        ds.append(np.full(N, d, dtype=np.int64))
    return DomainBatch(np.concatenate(xs), np.concatenate(ys), np.concatenate(ds))


def pooled(suite: MultiDomainSuite, domains, part: str = "val"):
    getter = {"val": suite.val, "train": suite.train, "full": suite.full}[part]
    xs, ys = zip(*(getter(d) for d in domains))
    return np.concatenate(xs), np.concatenate(ys)


# ---------------------------------------------------------------- dump / reload


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def dump_suite(suite: MultiDomainSuite, csv_path) -> str:
    """Write domain,label,x1..xd rows plus a ``.meta`` sidecar; returns the sidecar path."""
    d = suite.n_features
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "label", *[f"x{j + 1}" for j in range(d)]])
    for ds in suite.datasets:
        for xi, yi in zip(ds.x, ds.y):
            w.writerow([ds.domain, int(yi), *map(repr, map(float, xi))])
    _atomic_write(csv_path, buf.getvalue())
    sidecar = f"{csv_path}.meta"
    lines = [f"{k} = {_encode(v)}" for k, v in suite.spec.items()]
    _atomic_write(sidecar, "\n".join(lines) + "\n")
    return sidecar


def _encode(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(repr(float(x)) for x in v)
    if v is None:
        return "none"
    return str(v)


def read_sidecar(path) -> dict:
    from .config import parse_kv

    raw = parse_kv(open(path).read())
    spec = {"generator": raw["generator"]}
    for k, v in raw.items():
        if k == "generator":
            continue
        if k in ("angles", "strengths"):
            spec[k] = [float(s) for s in v.split(",")]
        elif v == "none":
            spec[k] = None
        elif v in ("True", "False"):
            spec[k] = v == "True"
        else:
            spec[k] = float(v) if any(c in v for c in ".e") else int(v)
    return spec


def load_suite_csv(csv_path):
    """Rows grouped by domain as (domain, x, y) tuples."""
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    body = np.array(rows[1:], dtype=np.float64)
    out = []
    for dom in dict.fromkeys(body[:, 0].astype(int)):
        sel = body[:, 0] == dom
        out.append((int(dom), body[sel, 2:], body[sel, 1].astype(np.int64)))
    return out


def _atomic_write(path, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
