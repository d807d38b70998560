"""Command-line pipeline: teacher -> dataset -> distillation -> attack/certify -> plot.

Configuration precedence (lowest to highest): built-in defaults, the
``--preset`` bundle, the JSON file given with ``--config``, then ``--set
section.key=value`` overrides and the dedicated flags (``--env``,
``--seed``, ``--out``). The fully resolved configuration is written to
``config.json`` in the output directory by every stage.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path


from . import adversary, certify, report
from .adversary import AttackConfig, Family
from .distill import DistillConfig, distill_train
from .envs import ENVS, DomainError as EnvDomainError, ObsNormalizer
from .lnn import SortNetPolicy
from .numerics import checkpoint
from .teacher import (ExpertDataset, Teacher, TeacherConfig, TeacherTrainingError, build_dataset,
                      train_teacher)

log = logging.getLogger("sortrl")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_THRESHOLD = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


def _fields(cls) -> dict:
    return {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
            for f in dataclasses.fields(cls)}


def default_config() -> dict:
    attack = {k: v for k, v in _fields(AttackConfig).items() if k != "epsilon"}
    attack["family"] = Family.PGD.value
    return {
        "env": "cartpole",
        "seed": 0,
        "out_dir": "runs/cartpole",
        "threads": 1,
        "teacher": {k: list(v) if isinstance(v, tuple) else v for k, v in _fields(TeacherConfig).items()},
        "dataset": {"n_states": 50_000, "csv": False},
        "distill": {k: list(v) if isinstance(v, tuple) else v for k, v in _fields(DistillConfig).items()},
        "attack": attack,
        "eval": {"eps_grid": adversary.eps_grid(0.0, 0.2, 0.02), "episodes": 20, "acr_episodes": 20,
                 "certify_eps": 0.1},
    }


PRESETS = {
    "paper": {},
    # desk-scale network and iteration budget for CI
    "ci": {"distill": {"widths": [128, 128], "n_iter": 2000}},
}


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = merge(out[k], v, where)
        else:
            out[k] = v
    return out


def parse_set(expr: str) -> dict:
    if "=" not in expr:
        raise ConfigError(f"--set expects section.key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.preset:
        cfg = merge(cfg, PRESETS[args.preset])
    if args.config:
        try:
            cfg = merge(cfg, json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    for expr in args.set or []:
        cfg = merge(cfg, parse_set(expr))
    for key in ("env", "seed", "out_dir"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["env"] not in ENVS:
        raise ConfigError(f"unknown environment {cfg['env']!r}; valid: {', '.join(sorted(ENVS))}")
    try:
        TeacherConfig(**cfg["teacher"])
        DistillConfig(**cfg["distill"])
        AttackConfig(epsilon=0.0, **cfg["attack"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if not cfg["eval"]["eps_grid"] or min(cfg["eval"]["eps_grid"]) < 0:
        raise ConfigError("eval.eps_grid must be a nonempty list of nonnegative budgets")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def workers(cfg: dict) -> int:
    n = int(cfg.get("threads", 1))
    cap = os.environ.get("SORTRL_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


class Run:
    """Paths of every artifact inside an output directory."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.dir = Path(cfg["out_dir"])

    def __getattr__(self, name):
        files = {
            "teacher": "teacher.bin", "normalizer": "normalizer.bin", "teacher_log": "teacher_log.csv",
            "dataset": "dataset.bin", "dataset_csv": "dataset.csv", "student": "student.bin",
            "train_log": "train_log.csv", "report": "eval_report.csv", "plot": "plot.svg",
            "certify": "certify.csv", "acr": "acr.csv", "meta": "report_meta.json",
        }
        if name in files:
            return self.dir / files[name]
        raise AttributeError(name)

    def sweep(self, method: str) -> Path:
        return self.dir / f"sweep_{method}.csv"

    def returns(self, method: str) -> Path:
        return self.dir / f"returns_{method}.csv"

    def prepare(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(json.dumps(self.cfg, indent=2, sort_keys=True) + "\n")

    def need(self, path: Path) -> Path:
        if not path.exists():
            raise MissingArtifact(f"missing upstream artifact: {path}")
        return path


def _teacher(run: Run) -> Teacher:
    t = Teacher.load(run.need(run.teacher), run.cfg["env"])
    arrays = checkpoint.load(run.need(run.normalizer))
    t.normalizer = ObsNormalizer.from_stats(arrays["mean"], arrays["var"])
    return t


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_train_teacher(run: Run) -> int:
    cfg = run.cfg
    try:
        teacher, norm, rows = train_teacher(cfg["env"], TeacherConfig(**cfg["teacher"]), seed=cfg["seed"])
    except TeacherTrainingError as exc:
        log.error("%s", exc)
        return EXIT_THRESHOLD
    teacher.save(run.teacher)
    checkpoint.save(run.normalizer, {"mean": norm.mean, "var": norm.var})
    report._write(run.teacher_log, ["step", "episodes", "epsilon", "mean_loss", "eval_return"],
                  ([r.step, r.episodes, r.epsilon, r.mean_loss, r.eval_return] for r in rows), "teacher_log")
    log.info("teacher accepted with mean return %.1f", teacher.eval_return)
    return EXIT_OK


def cmd_build_dataset(run: Run) -> int:
    teacher = _teacher(run)
    ds = build_dataset(teacher, run.cfg["env"], run.cfg["dataset"]["n_states"], seed=run.cfg["seed"])
    ds.save(run.dataset)
    if run.cfg["dataset"]["csv"]:
        ds.to_csv(run.dataset_csv)
    log.info("dataset with %d pairs written", len(ds))
    return EXIT_OK


def cmd_distill(run: Run) -> int:
    ds = ExpertDataset.load(run.need(run.dataset))
    dcfg = DistillConfig(**run.cfg["distill"])
    t0 = time.time()

    def progress(rec):
        if rec.iteration % 100 == 0:
            log.info("distill it %d ce %.4f rob %.4f lam %.3f agree %.3f margin>=theta %.3f (%.0fs)",
                     rec.iteration, rec.ce, rec.rob, rec.lam, rec.agree_rate, rec.margin_frac, time.time() - t0)

    policy, logbook = distill_train(ds, dcfg, seed=run.cfg["seed"], checkpoint_dir=run.dir, progress=progress)
    policy.save(run.student)
    logbook.write_csv(run.train_log)
    return EXIT_OK


def _attack_template(cfg: dict) -> AttackConfig:
    return AttackConfig(epsilon=0.0, **cfg["attack"])


def _sweep(run: Run, model, method: str, normalizer) -> list:
    cfg = run.cfg
    rows = adversary.sweep_epsilon(model, cfg["env"], normalizer, cfg["eval"]["eps_grid"],
                                   cfg["eval"]["episodes"], _attack_template(cfg), seed=cfg["seed"],
                                   method=method, workers=workers(cfg))
    report.write_sweep(run.sweep(method), rows)
    report.write_returns(run.returns(method), rows)
    return rows


def _write_report(run: Run) -> None:
    rows = []
    for method in ("teacher", "sortrl"):
        path = run.sweep(method)
        if not path.exists():
            continue
        rets = report.read_csv(run.returns(method))
        by_eps: dict[str, list] = {}
        for r in rets:
            by_eps.setdefault(r["eps"], []).append(float(r["return"]))
        for r in report.read_csv(path):
            rows.append(adversary.SweepRow(r["env"], method, r["attack"], float(r["eps"]), int(r["episodes"]),
                                           float(r["mean_reward"]), float(r["std_err"]), float(r["flip_rate"]),
                                           float(r["mean_margin"]), by_eps.get(r["eps"], [])))
    acr_table = {}
    if run.acr.exists():
        acr_table["sortrl"] = {round(float(r["eps"]), 10): float(r["acr"]) for r in report.read_csv(run.acr)}
    report.write_report(run.report, rows, acr_table)
    meta = {"config_hash": config_hash(run.cfg), "seed": run.cfg["seed"],
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    run.meta.write_text(json.dumps(meta, indent=2) + "\n")


def cmd_attack_eval(run: Run) -> int:
    policy = SortNetPolicy.load(run.need(run.student))
    _sweep(run, policy, "sortrl", _teacher(run).normalizer)
    _write_report(run)
    return EXIT_OK


def cmd_baseline_eval(run: Run) -> int:
    teacher = _teacher(run)
    _sweep(run, teacher, "teacher", teacher.normalizer)
    _write_report(run)
    return EXIT_OK


def cmd_certify(run: Run) -> int:
    policy = SortNetPolicy.load(run.need(run.student))
    normalizer = _teacher(run).normalizer
    ev = run.cfg["eval"]
    margins, _ = certify.rollout_margins(policy, run.cfg["env"], normalizer, ev["acr_episodes"], run.cfg["seed"])
    certify.write_certificates(run.certify, margins, ev["certify_eps"])
    # ACR is recomputed from the persisted margins so the summary is reproducible from the CSV alone
    stored = certify.read_margins(run.certify)
    certify.write_acr(run.acr, [certify.acr_from_margins(stored, e) for e in ev["eps_grid"]])
    if run.report.exists():
        _write_report(run)
    return EXIT_OK


def cmd_plot(run: Run) -> int:
    rows = report.read_csv(run.need(run.report))
    report.plot_svg(rows, run.plot, title=f"{run.cfg['env']} under PGD")
    return EXIT_OK


def cmd_pipeline(run: Run) -> int:
    for stage in (cmd_train_teacher, cmd_build_dataset, cmd_distill, cmd_baseline_eval, cmd_attack_eval,
                  cmd_certify, cmd_plot):
        code = stage(run)
        if code != EXIT_OK:
            return code
    return EXIT_OK


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "build-dataset": cmd_build_dataset,
    "distill": cmd_distill,
    "attack-eval": cmd_attack_eval,
    "baseline-eval": cmd_baseline_eval,
    "certify": cmd_certify,
    "plot": cmd_plot,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sortrl", description="Lipschitz policy distillation and robustness evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        sp.add_argument("--env")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", dest="out_dir")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"sortrl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    run = Run(cfg)
    run.prepare()
    try:
        return COMMANDS[args.command](run)
    except MissingArtifact as exc:
        print(f"sortrl: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (EnvDomainError, ValueError, RuntimeError) as exc:
        print(f"sortrl: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
