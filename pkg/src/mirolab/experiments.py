"""Training loops, proxies, leave-one-out evaluation, HP search and MI analysis."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, backward, no_grad, reset_tape
from .config import ExperimentConfig
from .data import (
    MultiDomainSuite,
    gen_rotated_moons,
    gen_spurious_blobs,
    leave_one_out,
    pooled,
    sample_batch,
    suite_from_spec,
)
from .mine import MineConfig, estimate_pair_mi
from .miro import MiroConfig, MiroHead, cmiro_loss, cmiro_reg_block, miro_loss, miro_reg_block, reference_features
from .nn import (
    AdamState,
    BlockMLP,
    Classifier,
    ParamStore,
    adam_step,
    clone_frozen,
    load_model,
    save_model,
)
from .autodiff import cross_entropy_logits

log = logging.getLogger(__name__)

BROAD_OFFSET = 100
REDUCTION_NOTE = {
    "mean": "per block: mean over examples and coordinates; blocks summed",
    "sum": "per block: mean over examples, sum over coordinates; blocks summed",
}
# the oracle never shares its initialization with the pre-trained proxy
ORACLE_SEED_OFFSET = 500


def fmt(v) -> str:
    return "" if v is None else f"{float(v):.6f}"


# ---------------------------------------------------------------- suites


def make_suite(cfg: ExperimentConfig) -> MultiDomainSuite:
    if cfg.dataset == "rotated_moons":
        return gen_rotated_moons(cfg.angles, cfg.n_per_domain, cfg.noise, cfg.data_seed,
                                 nuisance_dims=cfg.nuisance_dims, nuisance_std=cfg.nuisance_std)
    return gen_spurious_blobs(cfg.strengths, cfg.n_per_domain, cfg.data_seed, **_blob_kwargs(cfg))


def _blob_kwargs(cfg: ExperimentConfig) -> dict:
    return {"core_sep": cfg.core_sep, "core_noise": cfg.core_noise, "domain_shift": cfg.domain_shift,
            "spurious_noise": cfg.spurious_noise}


def default_broad_strengths(n: int = 12, scale: float = 2.0) -> list[float]:
    """Alternating-sign spurious strengths: the coordinate carries no pooled label signal."""
    return [scale * (1 if k % 2 == 0 else -1) * (0.5 + (k // 2) / max(n // 2 - 1, 1)) for k in range(n)]


def make_broad_suite(cfg: ExperimentConfig) -> MultiDomainSuite:
    """Superset of domains for pre-training; domain ids start at BROAD_OFFSET."""
    if cfg.dataset == "rotated_moons":
        return gen_rotated_moons(cfg.broad_angles, cfg.n_per_domain, cfg.noise, cfg.data_seed,
                                 domain_offset=BROAD_OFFSET, nuisance_dims=cfg.nuisance_dims,
                                 nuisance_std=cfg.nuisance_std)
    scale = max(abs(s) for s in cfg.strengths)
    strengths = cfg.broad_strengths or default_broad_strengths(12, scale)
    return gen_spurious_blobs(strengths, cfg.n_per_domain, cfg.data_seed, domain_offset=BROAD_OFFSET,
                              flip_on_holdout=False, **_blob_kwargs(cfg))


# ---------------------------------------------------------------- evaluation


def predict(extractor: BlockMLP, classifier: Classifier, x) -> np.ndarray:
    with no_grad():
        logits = classifier.forward_logits(extractor.forward_features(x)[-1], train=False)
    return logits.data.argmax(axis=1)


def accuracy(extractor, classifier, x, y) -> float:
    return float(np.mean(predict(extractor, classifier, x) == np.asarray(y)))


def domain_accuracies(extractor, classifier, suite: MultiDomainSuite, domains, part="val") -> dict:
    getter = {"val": suite.val, "full": suite.full, "train": suite.train}[part]
    return {d: accuracy(extractor, classifier, *getter(d)) for d in domains}


# ---------------------------------------------------------------- plain ERM fitting (proxies)


def fit_erm(suite: MultiDomainSuite, domains, widths, steps: int, lr: float, seed: int,
            batch_per_domain: int = 32, weight_decay: float = 0.0, activation: str = "relu"):
    rng = np.random.default_rng(seed)
    extractor = BlockMLP([suite.n_features, *widths], activation, seed=int(rng.integers(2**31)))
    classifier = Classifier(widths[-1], suite.n_classes, seed=int(rng.integers(2**31)))
    store = ParamStore().update(extractor.store, "f.").update(classifier.store, "g.")
    state = AdamState(lr=lr, weight_decay=weight_decay)
    for step in range(steps):
        batch = sample_batch(suite, domains, batch_per_domain, seed, step)
        reset_tape()
        store.zero_grad()
        loss = cross_entropy_logits(classifier(extractor(batch.x)[-1]), batch.y)
        backward(loss)
        adam_step(state, store, store.grads())
    return extractor, classifier


def pretrain_proxy(broad: MultiDomainSuite, widths, steps: int, seed: int, path=None, lr: float = 1e-3,
                   weight_decay: float = 0.0, activation: str = "relu"):
    """ERM on every domain of the broad suite; optionally saves a checkpoint."""
    extractor, classifier = fit_erm(broad, broad.domains, widths, steps, lr, seed,
                                    weight_decay=weight_decay, activation=activation)
    acc = accuracy(extractor, classifier, *pooled(broad, broad.domains, "val"))
    if path is not None:
        save_model(path, extractor, classifier, {"role": "pretrained", "seed": seed, "val_acc": fmt(acc)})
    return extractor, classifier, acc


def train_oracle(suite: MultiDomainSuite, widths, steps: int, seed: int, path=None, lr: float = 1e-3,
                 weight_decay: float = 0.0, activation: str = "relu"):
    """ERM on all domains, target included; reports mean per-domain validation accuracy."""
    extractor, classifier = fit_erm(suite, suite.domains, widths, steps, lr, seed,
                                    weight_decay=weight_decay, activation=activation)
    acc = float(np.mean(list(domain_accuracies(extractor, classifier, suite, suite.domains).values())))
    if path is not None:
        save_model(path, extractor, classifier, {"role": "oracle", "seed": seed, "val_acc": fmt(acc)})
    return extractor, classifier, acc


def build_proxies(cfg: ExperimentConfig, out_dir=None):
    """Pre-trained proxy on the broad suite and the all-domain oracle, both from config.

    Returns (pretrained, oracle, pretrained_val_acc, oracle_val_acc).
    """
    pre_path = oracle_path = None
    if out_dir is not None:
        pre_path, oracle_path = os.path.join(out_dir, "pretrained.ckpt"), os.path.join(out_dir, "oracle.ckpt")
    pre, _, pacc = pretrain_proxy(make_broad_suite(cfg), cfg.widths, cfg.pretrain_steps, cfg.seed, pre_path,
                                  cfg.pretrain_lr, cfg.pretrain_weight_decay, cfg.activation)
    oracle, _, oacc = train_oracle(make_suite(cfg), cfg.widths, cfg.pretrain_steps, cfg.seed + ORACLE_SEED_OFFSET,
                                   oracle_path, cfg.pretrain_lr, cfg.pretrain_weight_decay, cfg.activation)
    return pre, oracle, pacc, oacc


# ---------------------------------------------------------------- training runs


@dataclass
class RunResult:
    algorithm: str
    seed: int
    target: int
    sources: list
    lam: float
    rows: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    domain_val: dict = field(default_factory=dict)
    selected_step: int = 0
    selected_val_acc: float = 0.0
    target_acc: float | None = None
    variance_trace: list = field(default_factory=list)
    selected_variances: list | None = None
    n_blocks: int = 0
    extractor: BlockMLP | None = field(default=None, repr=False)
    classifier: Classifier | None = field(default=None, repr=False)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "ce", *[f"reg_block_{b + 1}" for b in range(self.n_blocks)], "total", "lambda", "val_acc"])
        for r in self.rows:
            regs = r["reg"] if r["reg"] is not None else [None] * self.n_blocks
            w.writerow([r["step"], fmt(r["ce"]), *map(fmt, regs), fmt(r["total"]), fmt(r["lambda"]),
                        fmt(r.get("val_acc"))])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "target": self.target,
            "sources": self.sources,
            "lambda": self.lam,
            "selected_step": self.selected_step,
            "selected_val_acc": self.selected_val_acc,
            "target_acc": self.target_acc,
            "domain_val": {str(k): v for k, v in self.domain_val.items()},
            "val_trace": self.val_trace,
            "variance_trace": self.variance_trace,
            "selected_variances": self.selected_variances,
        }


def _make_heads(cfg: ExperimentConfig, widths, n_classes: int):
    if cfg.algorithm == "cmiro":
        return [MiroHead(widths, cfg.init_variance, cfg.encoder_lr_mult, prefix=f"c{c}.var") for c in range(n_classes)]
    return [MiroHead(widths, cfg.init_variance, cfg.encoder_lr_mult)]


def _diagnostic_regs(extractor, frozen, head, x, reduction):
    with no_grad():
        feats = extractor.forward_features(x)
        ref = reference_features(frozen, x)
        return [miro_reg_block(z0, z, head, b, reduction).item() for b, (z0, z) in enumerate(zip(ref, feats))]


def _fit_run(cfg: ExperimentConfig, sources_suite: MultiDomainSuite, sources, pretrained,
             on_step=None) -> RunResult:
    """Training loop with training-domain validation selection. Sees source domains only.

    ``on_step(step, store)`` is called after every optimizer step.
    """
    if cfg.algorithm in ("miro", "cmiro") and pretrained is None:
        raise ContractError(f"{cfg.algorithm} needs a pre-trained checkpoint")
    widths = [sources_suite.n_features, *cfg.widths]
    init_rng = np.random.default_rng([cfg.seed, 1])
    ext_seed, cls_seed = (int(s) for s in init_rng.integers(2**31, size=2))
    frozen = None
    if pretrained is not None:
        if list(pretrained.widths) != widths or pretrained.activation != cfg.activation:
            raise ContractError(f"checkpoint blocks {pretrained.widths} do not match model {widths}")
        extractor = clone_frozen(pretrained)
        for t in extractor.store.params.values():
            t.requires_grad = True
        frozen = clone_frozen(pretrained)
    else:
        extractor = BlockMLP(widths, cfg.activation, seed=ext_seed)
    classifier = Classifier(widths[-1], sources_suite.n_classes, cfg.dropout, seed=cls_seed)

    store = ParamStore().update(extractor.store, "f.").update(classifier.store, "g.")
    heads = _make_heads(cfg, extractor.block_widths, sources_suite.n_classes) if frozen is not None else []
    if cfg.algorithm != "erm":
        for k, h in enumerate(heads):
            store.update(h.store, f"h{k}.")
    miro_cfg = MiroConfig(cfg.lam, cfg.encoder_lr_mult, cfg.algorithm == "cmiro", cfg.reduction, cfg.init_variance)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    drop_rng = np.random.default_rng([cfg.seed, 2])

    result = RunResult(cfg.algorithm, cfg.seed, cfg.target, list(sources),
                       cfg.lam if cfg.algorithm != "erm" else 0.0, n_blocks=extractor.n_blocks)
    val_x, val_y = pooled(sources_suite, sources, "val")
    best = None
    for step in range(1, cfg.steps + 1):
        batch = sample_batch(sources_suite, sources, cfg.batch_per_domain, cfg.seed, step - 1)
        reset_tape()
        store.zero_grad()
        if cfg.algorithm == "erm":
            logits = classifier.forward_logits(extractor(batch.x)[-1], train=True, rng=drop_rng)
            loss = cross_entropy_logits(logits, batch.y)
            regs = None
            if frozen is not None:
                regs = _diagnostic_regs(extractor, frozen, heads[0], batch.x, cfg.reduction)
            comps = {"ce": loss.item(), "reg": regs, "total": loss.item(), "lambda": 0.0}
        elif cfg.algorithm == "miro":
            loss, comps = miro_loss(batch.x, batch.y, extractor, frozen, classifier, heads[0], miro_cfg, drop_rng)
        else:
            loss, comps = cmiro_loss(batch.x, batch.y, extractor, frozen, classifier, heads, miro_cfg, drop_rng)
        backward(loss)
        adam_step(state, store, store.grads())
        if on_step is not None:
            on_step(step, store)
        row = {"step": step, "ce": comps["ce"], "reg": comps["reg"], "total": comps["total"],
               "lambda": comps["lambda"]}
        if not np.isfinite(row["total"]):
            raise FloatingPointError(f"non-finite loss at step {step}")
        if step % cfg.eval_every == 0 or step == cfg.steps:
            per_domain = domain_accuracies(extractor, classifier, sources_suite, sources)
            acc = accuracy(extractor, classifier, val_x, val_y)
            row["val_acc"] = acc
            result.val_trace.append([step, acc])
            variances = None
            if heads and cfg.algorithm != "erm":
                variances = [float(np.mean(np.mean([h.variance_values()[b] for h in heads], axis=0)))
                             for b in range(extractor.n_blocks)]
                result.variance_trace.append([step, variances])
            if best is None or acc > best[1]:
                best = (step, acc, store.snapshot(), per_domain, variances)
        result.rows.append(row)

    result.selected_step, result.selected_val_acc, snapshot, result.domain_val, result.selected_variances = best
    store.load(snapshot)
    result.extractor, result.classifier = extractor, classifier
    return result


def _resolve_pretrained(cfg: ExperimentConfig, pretrained):
    if pretrained is not None or not cfg.pretrained:
        return pretrained
    model, _, _ = load_model(cfg.pretrained)
    return model


def train_run(cfg: ExperimentConfig, suite: MultiDomainSuite | None = None, pretrained=None,
              on_step=None) -> RunResult:
    """One run: fit on the sources, select by source validation, then score the target once."""
    suite = suite if suite is not None else make_suite(cfg)
    domains = suite.domains
    target = cfg.target if cfg.target >= 0 else domains[-1]
    if target not in domains:
        raise ContractError(f"target {target} not in suite")
    suite = suite.for_target(target)
    # canonical source order keeps runs independent of how the suite lists its domains
    sources = sorted(d for d in domains if d != target)
    pretrained = _resolve_pretrained(cfg, pretrained)
    result = _fit_run(cfg.replace(target=target), suite.subset(sources), sources, pretrained, on_step)
    result.target_acc = accuracy(result.extractor, result.classifier, *suite.full(target))
    return result


def task_shift_suite(cfg: ExperimentConfig) -> MultiDomainSuite:
    """Four-class blob task living in the same input space as the rotated-moons suite."""
    d = 2 + cfg.nuisance_dims
    return gen_spurious_blobs([0.0] * 4, cfg.n_per_domain, cfg.data_seed, n_classes=4, d_core=d,
                              core_sep=cfg.core_sep, core_noise=cfg.core_noise, domain_shift=cfg.domain_shift,
                              domain_offset=BROAD_OFFSET, flip_on_holdout=False, with_spurious=False)


def task_shift_profile(cfg: ExperimentConfig, suite: MultiDomainSuite | None = None, pretrained=None):
    """Proxy pre-trained on the four-class blob task, MIRO fine-tuned on binary moons.

    Returns (run, profile) where profile lists per-block mean variances at the selected step.
    """
    if cfg.dataset != "rotated_moons":
        raise ContractError("the task-shift scenario fine-tunes on rotated_moons")
    if pretrained is None:
        pretrained, _, _ = pretrain_proxy(task_shift_suite(cfg), cfg.widths, cfg.pretrain_steps, cfg.seed,
                                          lr=cfg.pretrain_lr, weight_decay=cfg.pretrain_weight_decay,
                                          activation=cfg.activation)
    algo = cfg.algorithm if cfg.algorithm in ("miro", "cmiro") else "miro"
    run = train_run(cfg.replace(algorithm=algo), suite, pretrained)
    return run, sigma_profile(run)


def sigma_profile(run: RunResult) -> list[float]:
    """Per-block mean variance at the selected step, lowest block first."""
    if run.algorithm not in ("miro", "cmiro") or run.selected_variances is None:
        raise ContractError("variance profile needs a miro or cmiro run")
    return list(run.selected_variances)


# ---------------------------------------------------------------- run directories


def _atomic_write(path, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_run(run: RunResult, cfg: ExperimentConfig, out_dir, extra: dict | None = None,
              save_checkpoint: bool = True):
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "config.txt"), cfg.to_text())
    _atomic_write(os.path.join(out_dir, "metrics.csv"), run.metrics_csv())
    if save_checkpoint and run.extractor is not None:
        save_model(os.path.join(out_dir, "model.ckpt"), run.extractor, run.classifier,
                   {"role": run.algorithm, "seed": run.seed, "target": run.target})
    payload = run.to_json()
    payload["reg_reduction"] = REDUCTION_NOTE[cfg.reduction]
    payload.update(extra or {})
    _atomic_write(os.path.join(out_dir, "result.json"), json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_complete(out_dir) -> bool:
    return os.path.exists(os.path.join(out_dir, "result.json"))


# ---------------------------------------------------------------- leave-one-out


@dataclass
class LooResult:
    runs: list
    per_target: dict
    mean: float

    def pairs(self):
        return {(r.target, r.seed, r.target_acc) for r in self.runs}


def _train_job(args):
    run_cfg, suite, pretrained = args
    return train_run(run_cfg, suite, pretrained)


def leave_one_out_eval(cfg: ExperimentConfig, suite: MultiDomainSuite | None = None, pretrained=None,
                       repeats: int | None = None, out_dir=None, workers: int = 1) -> LooResult:
    """One run per (target, repeat). ``workers > 1`` fans runs out to processes;
    every run owns its seeds, so results do not depend on the worker count."""
    suite = suite if suite is not None else make_suite(cfg)
    repeats = cfg.repeats if repeats is None else repeats
    pretrained = _resolve_pretrained(cfg, pretrained)
    jobs = [(cfg.replace(target=target, seed=cfg.seed + r), suite, pretrained)
            for _, target in leave_one_out(suite) for r in range(repeats)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_train_job, jobs))
    else:
        runs = [_train_job(job) for job in jobs]
    if out_dir is not None:
        for (run_cfg, _, _), run in zip(jobs, runs):
            write_run(run, run_cfg, os.path.join(out_dir, f"target{run.target}_seed{run_cfg.seed}"))
    per_target = {}
    for run in runs:
        per_target.setdefault(run.target, []).append(run.target_acc)
    per_target = {t: float(np.mean(v)) for t, v in per_target.items()}
    return LooResult(runs, per_target, float(np.mean(list(per_target.values()))))


def loo_selection_score(runs) -> float:
    """Mean source-validation accuracy at the selected steps (never target accuracy)."""
    return float(np.mean([r.selected_val_acc for r in runs]))


# ---------------------------------------------------------------- two-stage HP search


@dataclass
class GridPoint:
    stage: int
    lam: float
    lr: float
    dropout: float
    weight_decay: float
    val_acc: float
    target_acc: float
    run_dir: str = ""

    def key(self):
        # higher validation wins; ties prefer smaller lambda, lr, dropout, weight decay
        return (-self.val_acc, self.lam, self.lr, self.dropout, self.weight_decay)


def _grid_eval(cfg, suite, pretrained, stage, out_dir, index, workers=1):
    loo = leave_one_out_eval(cfg, suite, pretrained, repeats=1, workers=workers)
    run_dir = ""
    if out_dir is not None:
        run_dir = os.path.join(out_dir, f"stage{stage}_{len(index):03d}")
        for run in loo.runs:
            write_run(run, cfg.replace(target=run.target), os.path.join(run_dir, f"target{run.target}"),
                      save_checkpoint=False)
    point = GridPoint(stage, cfg.lam, cfg.lr, cfg.dropout, cfg.weight_decay,
                      loo_selection_score(loo.runs), loo.mean, run_dir)
    index.append(point)
    return point


def hp_search_two_stage(cfg: ExperimentConfig, suite: MultiDomainSuite | None = None, pretrained=None,
                        out_dir=None, workers: int = 1):
    """Stage 1 tunes lambda at default lr/dropout/decay; stage 2 tunes those with lambda fixed."""
    suite = suite if suite is not None else make_suite(cfg)
    pretrained = _resolve_pretrained(cfg, pretrained)
    index: list[GridPoint] = []
    stage1 = [_grid_eval(cfg.replace(lam=lam, lr=5e-5, dropout=0.0, weight_decay=0.0), suite, pretrained, 1,
                         out_dir, index, workers) for lam in cfg.lambdas]
    lam = min(stage1, key=GridPoint.key).lam
    stage2 = [_grid_eval(cfg.replace(lam=lam, lr=lr, dropout=dp, weight_decay=wd), suite, pretrained, 2,
                         out_dir, index, workers)
              for lr in cfg.lrs for dp in cfg.dropouts for wd in cfg.weight_decays]
    best = min(stage2, key=GridPoint.key)
    best_cfg = cfg.replace(lam=best.lam, lr=best.lr, dropout=best.dropout, weight_decay=best.weight_decay)
    if out_dir is not None:
        write_index(index, os.path.join(out_dir, "index.csv"))
    return best_cfg, index


def write_index(index, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "lambda", "lr", "dropout", "weight_decay", "val_acc", "target_acc", "run_dir"])
    for p in index:
        w.writerow([p.stage, fmt(p.lam), f"{p.lr:.6g}", fmt(p.dropout), f"{p.weight_decay:.6g}",
                    fmt(p.val_acc), fmt(p.target_acc), p.run_dir])
    _atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------- MI analysis


def mi_probe_sample(suite: MultiDomainSuite, per_domain: int, seed_offset: int = 1_000_003):
    """Fresh held-out inputs drawn from the suite's generator, equal count per domain."""
    spec = dict(suite.spec)
    spec["seed"] = spec["seed"] + seed_offset
    spec["n_per_domain"] = per_domain
    spec.pop("flip_target", None)
    probe = suite_from_spec(spec)
    x, _ = pooled(probe, probe.domains, "full")
    return x


def final_features(extractor: BlockMLP, x) -> np.ndarray:
    with no_grad():
        return extractor.forward_features(x)[-1].data


def mi_analysis(cfg: ExperimentConfig, suite: MultiDomainSuite, pretrained: BlockMLP, oracle: BlockMLP,
                mine: MineConfig | None = None, probe_per_domain: int = 1000, algorithms=("erm", "miro"),
                seed: int | None = None, accuracies: dict | None = None):
    """MI between each candidate's final-block features and the oracle's.

    Fine-tuned candidates are trained once per leave-one-out target and their
    estimates averaged. If ``accuracies`` is a dict it receives each fine-tuned
    candidate's per-target accuracies.
    """
    seed = cfg.seed if seed is None else seed
    mine = mine or MineConfig()
    if oracle.block_widths[-1] != pretrained.block_widths[-1]:
        raise ContractError("candidate and oracle final blocks differ in width")
    x = mi_probe_sample(suite, probe_per_domain)
    z_oracle = final_features(oracle, x)

    def mi(extractor, k):
        return estimate_pair_mi(final_features(extractor, x), z_oracle, mine, seed=seed * 1000 + k).estimate

    random_model = BlockMLP(pretrained.widths, pretrained.activation, seed=int(seed) + 77)
    table = {"random": mi(random_model, 0), "pretrained": mi(pretrained, 1)}
    candidates = {"erm-": ("erm", None), "erm+": ("erm", pretrained)}
    if "miro" in algorithms:
        candidates["miro"] = ("miro", pretrained)
    if "cmiro" in algorithms:
        candidates["cmiro"] = ("cmiro", pretrained)
    for k, (tag, (algo, init)) in enumerate(candidates.items(), start=2):
        values = []
        for sources, target in leave_one_out(suite):
            run = train_run(cfg.replace(algorithm=algo, target=target, seed=seed, pretrained=""), suite, init)
            values.append(mi(run.extractor, k))
            if accuracies is not None:
                accuracies.setdefault(tag, {})[target] = run.target_acc
        table[tag] = float(np.mean(values))
    return table
