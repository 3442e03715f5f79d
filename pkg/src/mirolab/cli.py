"""Command-line entry point: ``mirolab <subcommand> --config FILE --out DIR``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import experiments as ex
from .autodiff import ContractError, DimensionError, DomainError
from .config import ConfigError, ExperimentConfig
from .data import dump_suite
from .mine import MineConfig
from .nn import load_model, save_model
from .theory import run_all

log = logging.getLogger("mirolab")

SUBCOMMANDS = ("gen-data", "pretrain", "train", "eval-loo", "hp-search", "mi-analysis", "sigma-profile",
               "theory-check", "report")

MI_ORDER = ("random", "pretrained", "erm-", "erm+", "miro", "cmiro")


class CommandError(RuntimeError):
    pass


def default_out(sub: str) -> str:
    return os.path.join(os.environ.get("MIROLAB_OUT", "runs"), sub)


def write_text(path, text: str):
    ex._atomic_write(path, text)


def write_json(path, payload):
    write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _done(path, force: bool) -> bool:
    if os.path.exists(path) and not force:
        log.info("%s exists; nothing to do (use --force to recompute)", path)
        return True
    return False


def load_config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides = {"seed": args.seed, "data_seed": args.seed}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        return ExperimentConfig.load(args.config, **overrides)
    return ExperimentConfig(**overrides)


def _pretrained(cfg: ExperimentConfig, required: bool):
    if cfg.pretrained:
        if not os.path.exists(cfg.pretrained):
            raise CommandError(f"checkpoint not found: {cfg.pretrained}")
        return load_model(cfg.pretrained)[0]
    if required:
        raise CommandError(f"{cfg.algorithm} needs a pre-trained checkpoint (set 'pretrained' in the config)")
    return None


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(cfg, out, args):
    path = os.path.join(out, "data.csv")
    if _done(path, args.force):
        return
    sidecar = dump_suite(ex.make_suite(cfg), path)
    print(f"wrote {path} and {sidecar}")


def cmd_pretrain(cfg, out, args):
    """Pre-trained proxy on the broad suite, plus the all-domain oracle."""
    summary = os.path.join(out, "pretrain.json")
    if _done(summary, args.force):
        return
    _, _, pacc, oacc = ex.build_proxies(cfg, out)
    pre_path, oracle_path = os.path.join(out, "pretrained.ckpt"), os.path.join(out, "oracle.ckpt")
    write_json(summary, {"pretrained": pre_path, "pretrained_val_acc": pacc, "oracle": oracle_path,
                         "oracle_val_acc": oacc, "seed": cfg.seed})
    print(f"pretrained val_acc {ex.fmt(pacc)}  oracle val_acc {ex.fmt(oacc)}")


def cmd_train(cfg, out, args):
    if ex.run_complete(out) and not args.force:
        log.info("%s already holds a completed run", out)
        return
    run = ex.train_run(cfg, pretrained=_pretrained(cfg, cfg.algorithm != "erm"))
    ex.write_run(run, cfg.replace(target=run.target), out)
    print(f"{cfg.algorithm} target {run.target}: target_acc {ex.fmt(run.target_acc)} "
          f"(selected step {run.selected_step})")
    if cfg.algorithm != "erm":
        print(f"reg reduction: {ex.REDUCTION_NOTE[cfg.reduction]}")


def cmd_eval_loo(cfg, out, args):
    summary = os.path.join(out, "loo.json")
    if _done(summary, args.force):
        return
    loo = ex.leave_one_out_eval(cfg, pretrained=_pretrained(cfg, cfg.algorithm != "erm"), out_dir=out,
                                workers=args.workers)
    write_json(summary, {"algorithm": cfg.algorithm, "per_target": {str(k): v for k, v in loo.per_target.items()},
                         "mean": loo.mean, "runs": len(loo.runs)})
    for t, acc in sorted(loo.per_target.items()):
        print(f"target {t}: {ex.fmt(acc)}")
    print(f"mean: {ex.fmt(loo.mean)}")


def cmd_hp_search(cfg, out, args):
    best_path = os.path.join(out, "best_config.txt")
    if _done(best_path, args.force):
        return
    best, index = ex.hp_search_two_stage(cfg, pretrained=_pretrained(cfg, cfg.algorithm != "erm"), out_dir=out,
                                         workers=args.workers)
    write_text(best_path, best.to_text())
    print(f"best: lambda {best.lam} lr {best.lr} dropout {best.dropout} weight_decay {best.weight_decay} "
          f"({len(index)} grid points)")


def cmd_mi_analysis(cfg, out, args):
    path = os.path.join(out, "mi.json")
    if _done(path, args.force):
        return
    pretrained = _pretrained(cfg, True)
    if not cfg.oracle or not os.path.exists(cfg.oracle):
        raise CommandError("mi-analysis needs an oracle checkpoint (set 'oracle' in the config)")
    oracle = load_model(cfg.oracle)[0]
    mine = MineConfig(tuple(cfg.mine_hidden), cfg.mine_steps, cfg.mine_batch, cfg.mine_lr, cfg.mine_restarts)
    table = ex.mi_analysis(cfg, ex.make_suite(cfg), pretrained, oracle, mine)
    write_json(path, {"seed": cfg.seed, "mi": table})
    for k, v in table.items():
        print(f"{k:<12}{ex.fmt(v)}")


def cmd_sigma_profile(cfg, out, args):
    path = os.path.join(out, "profile.csv")
    if _done(path, args.force):
        return
    pretrained = _pretrained(cfg, False)
    run, profile = ex.task_shift_profile(cfg, pretrained=pretrained)
    if pretrained is None:
        save_model(os.path.join(out, "task_shift_pretrained.ckpt"), run.extractor, None, {"role": "task-shift"})
    ex.write_run(run, cfg.replace(algorithm=run.algorithm, target=run.target), os.path.join(out, "run"))
    lines = ["block,mean_variance"] + [f"{b + 1},{ex.fmt(v)}" for b, v in enumerate(profile)]
    write_text(path, "\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_theory_check(cfg, out, args):
    path = os.path.join(out, "theory.json")
    if _done(path, args.force):
        return
    reports = run_all(seed=cfg.seed)
    write_json(path, [json.loads(r.to_json()) for r in reports])
    for r in reports:
        print(f"{r.check:<24}{'PASS' if r.passed else 'FAIL'}  trials {r.trials}  margin {r.worst_margin:.3e}")
    failed = [r.check for r in reports if not r.passed]
    if failed:
        raise CommandError(f"theory checks failed: {','.join(failed)}")


# ---------------------------------------------------------------- report


def stderr_of(values) -> float | None:
    if len(values) < 2:
        return None
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def collect_results(dirs):
    results, mi_tables, warnings = [], [], []
    for root in dirs:
        if not os.path.isdir(root):
            warnings.append(f"not a directory: {root}")
            continue
        for here, _, files in sorted(os.walk(root)):
            for name in sorted(files):
                path = os.path.join(here, name)
                if name not in ("result.json", "mi.json"):
                    continue
                try:
                    with open(path) as fh:
                        payload = json.load(fh)
                except (OSError, json.JSONDecodeError) as exc:
                    warnings.append(f"unreadable {path}: {exc}")
                    continue
                if name == "mi.json":
                    mi_tables.append(payload)
                elif payload.get("target_acc") is None:
                    warnings.append(f"no target accuracy in {path}")
                else:
                    results.append(payload)
    return results, mi_tables, warnings


def accuracy_table(results):
    """Rows (algorithm, target, n, mean, stderr); one mean row per algorithm."""
    groups = {}
    for r in results:
        groups.setdefault(r["algorithm"], {}).setdefault(r["target"], {})[r["seed"]] = r["target_acc"]
    rows = []
    for algo in sorted(groups):
        by_target = groups[algo]
        for t in sorted(by_target):
            vals = list(by_target[t].values())
            rows.append((algo, str(t), len(vals), float(np.mean(vals)), stderr_of(vals)))
        seeds = set.intersection(*(set(v) for v in by_target.values()))
        per_seed = [float(np.mean([by_target[t][s] for t in by_target])) for s in sorted(seeds)]
        target_means = [float(np.mean(list(v.values()))) for v in by_target.values()]
        rows.append((algo, "mean", len(per_seed), float(np.mean(target_means)), stderr_of(per_seed)))
    return rows


def mi_table(mi_tables):
    rows = []
    for k in MI_ORDER:
        vals = [t["mi"][k] for t in mi_tables if k in t.get("mi", {})]
        if vals:
            rows.append((k, len(vals), float(np.mean(vals)), stderr_of(vals)))
    ranked = sorted(rows, key=lambda r: -r[2])
    ranks = {r[0]: i + 1 for i, r in enumerate(ranked)}
    return [(*r, ranks[r[0]]) for r in rows]


def render_report(acc_rows, mi_rows) -> tuple[str, str]:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "algorithm", "target", "n", "mean", "stderr", "rank"])
    for algo, target, n, mean, se in acc_rows:
        w.writerow(["accuracy", algo, target, n, ex.fmt(mean), ex.fmt(se), ""])
    for name, n, mean, se, rank in mi_rows:
        w.writerow(["mi", name, "", n, ex.fmt(mean), ex.fmt(se), rank])
    lines = []
    if acc_rows:
        lines.append(f"{'algorithm':<10}{'target':<8}{'n':>3}  {'mean':>9}  {'stderr':>9}")
        for algo, target, n, mean, se in acc_rows:
            lines.append(f"{algo:<10}{target:<8}{n:>3}  {ex.fmt(mean):>9}  {ex.fmt(se):>9}")
    if mi_rows:
        lines.append("")
        lines.append(f"{'candidate':<12}{'n':>3}  {'mi':>9}  {'stderr':>9}  rank")
        for name, n, mean, se, rank in mi_rows:
            lines.append(f"{name:<12}{n:>3}  {ex.fmt(mean):>9}  {ex.fmt(se):>9}  {rank:>4}")
    return buf.getvalue(), "\n".join(lines) + "\n"


def cmd_report(cfg, out, args):
    dirs = args.dirs or [out]
    results, mi_tables, warnings = collect_results(dirs)
    for msg in warnings:
        log.warning(msg)
    if not results and not mi_tables:
        raise CommandError("no results")
    csv_text, text = render_report(accuracy_table(results), mi_table(mi_tables))
    os.makedirs(out, exist_ok=True)
    write_text(os.path.join(out, "report.csv"), csv_text)
    write_text(os.path.join(out, "report.txt"), text)
    print(text, end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval-loo": cmd_eval_loo,
    "hp-search": cmd_hp_search,
    "mi-analysis": cmd_mi_analysis,
    "sigma-profile": cmd_sigma_profile,
    "theory-check": cmd_theory_check,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mirolab", description="Mutual-information regularized fine-tuning "
                                     "experiments on synthetic multi-domain data.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("dirs", nargs="*", help="run directories (report only)")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--out", help="output directory (default $MIROLAB_OUT/<subcommand>, or runs/<subcommand>)")
    parser.add_argument("--seed", type=int, help="overrides seed and data_seed")
    parser.add_argument("--workers", type=int, default=1, help="processes for independent runs")
    parser.add_argument("--force", action="store_true", help="recompute completed outputs")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def error_line(kind: str, exc: BaseException) -> str:
    return json.dumps({"error": kind, "message": str(exc)})


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.dirs and args.subcommand != "report":
        parser.error("positional directories are only accepted by report")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(error_line("config", exc), file=sys.stderr)
        return 2
    out = args.out or default_out(args.subcommand)
    try:
        os.makedirs(out, exist_ok=True)
        COMMANDS[args.subcommand](cfg, out, args)
    except ConfigError as exc:
        print(error_line("config", exc), file=sys.stderr)
        return 2
    except (CommandError, ContractError, DimensionError, DomainError, FloatingPointError, OSError) as exc:
        print(error_line(type(exc).__name__, exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
