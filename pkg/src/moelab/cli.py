"""``moelab`` command-line driver.

Subcommands::

    moelab train-teacher --config run.json
    moelab compress  --teacher T --method prune|edit|merge [--retention|--rank-ratio|--target]
    moelab calibrate --teacher T --student S
    moelab analyze   --teacher T --student S [--map M] --output-dir DIR
    moelab report    RUN_DIR [RUN_DIR ...]

A run config is one JSON file with ``model``, ``corpus``, ``teacher``,
``kd``, ``compression`` and ``analysis`` sections; command-line flags win
over the file.  Exit codes: 0 success, 2 usage or input error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from moelab import checkpoint, compression, diagnostics, kd, scenarios
from moelab.data import CorpusConfig, generate_corpus, split_corpus
from moelab.errors import MoeLabError, NumericalError
from moelab.model import ModelConfig, MoEModel, TokenBatch, forward, init_model, train_teacher

log = logging.getLogger("moelab")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3

REPORT_COLUMNS = (
    "run", "method",
    "kd_loss", "kd_loss_R", "overlap", "overlap_R", "l1", "l1_R",
    "best", "common", "worst", "best_R", "common_R", "worst_R",
)


TEACHER_DEFAULTS = {"steps": 1000, "lr": 1e-2, "batch_size": 8}
COMPRESSION_DEFAULTS = {"method": "prune", "retention": 0.625}
ANALYSIS_DEFAULTS = {"n_sequences": 100, "spot_checks": 50}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    corpus: CorpusConfig
    kd: kd.KDConfig = field(default_factory=kd.KDConfig)
    teacher: dict = field(default_factory=lambda: dict(TEACHER_DEFAULTS))
    compression: dict = field(default_factory=lambda: dict(COMPRESSION_DEFAULTS))
    calib_fraction: float = 0.8
    analysis: dict = field(default_factory=lambda: dict(ANALYSIS_DEFAULTS))
    output_dir: str = "."

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(), "corpus": self.corpus.to_dict(),
            "kd": self.kd.to_dict(), "teacher": self.teacher,
            "compression": self.compression, "calib_fraction": self.calib_fraction,
            "analysis": self.analysis, "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return cls(
            model=ModelConfig.from_dict(d["model"]),
            corpus=CorpusConfig.from_dict(d["corpus"]),
            kd=kd.KDConfig.from_dict(d.get("kd", {})),
            teacher={**TEACHER_DEFAULTS, **d.get("teacher", {})},
            compression={**COMPRESSION_DEFAULTS, **d.get("compression", {})},
            calib_fraction=float(d.get("calib_fraction", 0.8)),
            analysis={**ANALYSIS_DEFAULTS, **d.get("analysis", {})},
            output_dir=d.get("output_dir", "."),
        )

    def with_seed(self, seed: int) -> RunConfig:
        d = self.to_dict()
        d["model"]["seed"] = d["corpus"]["seed"] = d["kd"]["seed"] = seed
        return RunConfig.from_dict(d)

    def splits(self) -> tuple[TokenBatch, TokenBatch]:
        return split_corpus(generate_corpus(self.corpus), self.calib_fraction, self.corpus.seed)


def load_run_config(path, seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = RunConfig.from_dict(json.load(fh))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if seed is not None:
        cfg = cfg.with_seed(seed)
    if output_dir is not None:
        cfg.output_dir = output_dir
    return cfg


def _write_config(cfg: RunConfig, directory: str) -> None:
    with open(os.path.join(directory, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def _config_for(args, near: str | None) -> RunConfig:
    """The explicit ``--config`` or the ``config.json`` stored next to ``near``."""
    path = args.config
    if path is None and near is not None:
        path = os.path.join(os.path.dirname(os.path.abspath(near)), "config.json")
    if path is None:
        raise UsageError("--config is required")
    return load_run_config(path, args.seed, getattr(args, "output_dir", None))


def _load_model(path) -> MoEModel:
    try:
        return checkpoint.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {path}") from exc


def _out_dir(args, default: str) -> str:
    out = getattr(args, "output_dir", None) or default
    os.makedirs(out, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_train_teacher(args) -> int:
    cfg = load_run_config(args.config, args.seed, args.output_dir)
    if args.steps is not None:
        cfg.teacher["steps"] = args.steps
    out = _out_dir(args, cfg.output_dir)
    calib, _ = cfg.splits()
    history: list[float] = []
    model = train_teacher(
        init_model(cfg.model), calib, int(cfg.teacher["steps"]), float(cfg.teacher["lr"]),
        int(cfg.teacher["batch_size"]), history=history,
    )
    checkpoint.save_checkpoint(model, os.path.join(out, "teacher.moec"))
    with open(os.path.join(out, "train_log.jsonl"), "w", encoding="utf-8") as fh:
        for step, loss in enumerate(history, 1):
            fh.write(json.dumps({"step": step, "loss": loss}) + "\n")
    _write_config(cfg, out)
    log.info("teacher written to %s", out)
    return EXIT_OK


def _compress(teacher: MoEModel, method: str, amount: float, calib: TokenBatch):
    if method == "prune":
        return compression.prune_experts(teacher, amount, calib)
    if method == "edit":
        return compression.edit_experts(teacher, amount)
    if method == "merge":
        if amount != int(amount):
            raise UsageError("--target must be an integer")
        return compression.merge_experts(teacher, int(amount), calib)
    raise UsageError(f"unknown method {method!r}")


def cmd_compress(args) -> int:
    cfg = _config_for(args, args.teacher)
    teacher = _load_model(args.teacher)
    method = args.method or cfg.compression["method"]
    amount = {"prune": args.retention, "edit": args.rank_ratio, "merge": args.target}[method]
    if amount is None:
        key = {"prune": "retention", "edit": "rank_ratio", "merge": "target_count"}[method]
        if key not in cfg.compression:
            raise UsageError(f"no amount given for method {method}")
        amount = cfg.compression[key]
    out = _out_dir(args, os.path.dirname(os.path.abspath(args.teacher)))
    calib, _ = cfg.splits()
    student, cmap = _compress(teacher, method, float(amount), calib)
    checkpoint.save_checkpoint(student, os.path.join(out, f"student_{method}.moec"))
    compression.save_map(cmap, os.path.join(out, f"map_{method}.json"))
    return EXIT_OK


def _kd_overrides(cfg: kd.KDConfig, args) -> kd.KDConfig:
    d = cfg.to_dict()
    for flag, key in (("temperature", "temperature"), ("lr", "learning_rate"),
                      ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("grad_accum", "grad_accum"), ("max_seq_len", "max_seq_len"),
                      ("max_samples", "max_samples"), ("optimizer", "optimizer")):
        value = getattr(args, flag, None)
        if value is not None:
            d[key] = value
    return kd.KDConfig.from_dict(d)


def cmd_calibrate(args) -> int:
    cfg = _config_for(args, args.teacher)
    teacher = _load_model(args.teacher)
    student = _load_model(args.student)
    if teacher.config.vocab_size != student.config.vocab_size:
        raise UsageError("teacher and student vocabularies differ")
    kd_cfg = _kd_overrides(cfg.kd, args)
    out = _out_dir(args, os.path.dirname(os.path.abspath(args.student)))
    calib, _ = cfg.splits()
    stem = os.path.splitext(os.path.basename(args.student))[0]
    calibrated, _ = kd.calibrate_router(
        teacher, student, calib, kd_cfg, log_path=os.path.join(out, "kd_log.jsonl"))
    checkpoint.save_checkpoint(calibrated, os.path.join(out, f"{stem}_R.moec"))
    return EXIT_OK


def _spot_checks(teacher, student, cmap, batch, n, seed) -> list[dict]:
    pairs = scenarios.paired_layer_traces(teacher, student, batch)
    n_tok = pairs[0][0].n_tokens if pairs else 0
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n if n_tok else 0):
        li = int(rng.integers(len(pairs)))
        t = int(rng.integers(n_tok))
        lo, lc = pairs[li]
        d = scenarios.decompose_token(teacher, student, cmap, li, lo.entry(t), lc.entry(t))
        out.append({"layer": li, "token": t, **d.summary()})
    return out


def _analysis_batch(cfg: RunConfig) -> TokenBatch:
    _, held = cfg.splits()
    n = int(cfg.analysis.get("n_sequences", 100))
    return held.subset(range(min(n, len(held))))


def _check_map(student: MoEModel, cmap) -> None:
    if isinstance(cmap, compression.PruneMap):
        ok = [len(r) for r in cmap.retained] == student.expert_counts
    elif isinstance(cmap, compression.MergeMap):
        ok = [max(p) + 1 for p in cmap.phi] == student.expert_counts
    else:
        ok = len(cmap.ranks) == len(student.layers)
    if not ok:
        raise UsageError("compression map does not match the student model")


def analyze(teacher, student, cmap, batch, out_dir, spot_checks=50, seed=0,
            metadata=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    ref = forward(teacher, batch).trace
    other = forward(student, batch).trace
    diag_map = None if isinstance(cmap, compression.EditMap) else cmap
    reports = diagnostics.layer_reports(ref, other, diag_map)
    diagnostics.emit_report(reports, out_dir, {"method": cmap.method, **(metadata or {})})
    counts = scenarios.scenario_census(teacher, student, cmap, batch)
    scenarios.write_census_csv(counts, cmap.method, os.path.join(out_dir, "census.csv"))
    checks = _spot_checks(teacher, student, cmap, batch, spot_checks, seed)
    with open(os.path.join(out_dir, "decomposition_spotcheck.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "n": len(checks),
            "max_residual": max((c["residual"] for c in checks), default=0.0),
            "instances": checks,
        }, fh, sort_keys=True, indent=1)
        fh.write("\n")


def cmd_analyze(args) -> int:
    cfg = _config_for(args, args.teacher)
    teacher = _load_model(args.teacher)
    student = _load_model(args.student)
    if args.map:
        try:
            cmap = compression.load_map(args.map)
        except FileNotFoundError as exc:
            raise UsageError(f"map not found: {args.map}") from exc
    else:
        cmap = compression.identity_map(student)
    if teacher.config.vocab_size != student.config.vocab_size:
        raise UsageError("teacher and student vocabularies differ")
    _check_map(student, cmap)
    if isinstance(cmap, compression.PruneMap) and cmap.n_original != teacher.expert_counts:
        raise UsageError("compression map does not match the teacher model")
    out = _out_dir(args, "analysis")
    analyze(teacher, student, cmap, _analysis_batch(cfg), out,
            int(cfg.analysis.get("spot_checks", 50)), cfg.corpus.seed,
            {"n_sequences": int(cfg.analysis.get("n_sequences", 100))})
    return EXIT_OK


def _row_metrics(teacher, student, cmap, batch, kd_cfg) -> dict:
    ref = forward(teacher, batch).trace
    other = forward(student, batch).trace
    diag_map = None if isinstance(cmap, compression.EditMap) else cmap
    counts = Counter()
    for layer_counts in scenarios.scenario_census(teacher, student, cmap, batch):
        for label, n in layer_counts.items():
            counts[label.sub] += n
    total = sum(counts.values()) or 1
    return {
        "kd_loss": kd.batch_kd_loss(teacher, student, batch, kd_cfg.temperature, kd_cfg.epsilon),
        "overlap": float(np.mean(diagnostics.topk_overlap(ref, other, diag_map))),
        "l1": float(np.mean(diagnostics.routing_l1(ref, other, diag_map))),
        "best": counts["Best"] / total,
        "common": counts["Common"] / total,
        "worst": counts["Worst"] / total,
    }


def report_rows(run_dirs) -> list[dict]:
    rows = []
    for run in run_dirs:
        cfg_path = os.path.join(run, "config.json")
        teacher_path = os.path.join(run, "teacher.moec")
        for p in (cfg_path, teacher_path):
            if not os.path.exists(p):
                raise UsageError(f"run directory {run} is missing {os.path.basename(p)}")
        cfg = load_run_config(cfg_path)
        teacher = checkpoint.load_checkpoint(teacher_path)
        batch = _analysis_batch(cfg)
        methods = [m for m in ("prune", "edit", "merge")
                   if os.path.exists(os.path.join(run, f"student_{m}.moec"))]
        name = os.path.basename(os.path.normpath(run))
        if not methods:
            base = _row_metrics(teacher, teacher, compression.identity_map(teacher), batch, cfg.kd)
            rows.append({"run": name, "method": "self", **base,
                         **{f"{k}_R": "" for k in base}})
            continue
        for m in methods:
            map_path = os.path.join(run, f"map_{m}.json")
            if not os.path.exists(map_path):
                raise UsageError(f"run directory {run} is missing map_{m}.json")
            cmap = compression.load_map(map_path)
            student = checkpoint.load_checkpoint(os.path.join(run, f"student_{m}.moec"))
            base = _row_metrics(teacher, student, cmap, batch, cfg.kd)
            r_path = os.path.join(run, f"student_{m}_R.moec")
            if os.path.exists(r_path):
                cal = _row_metrics(teacher, checkpoint.load_checkpoint(r_path), cmap, batch, cfg.kd)
            else:
                cal = {k: "" for k in base}
            rows.append({"run": name, "method": m, **base, **{f"{k}_R": v for k, v in cal.items()}})
    return rows


def _cell(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def format_report(rows: list[dict]) -> tuple[str, str]:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_cell(r[c]) for c in REPORT_COLUMNS])
    table = [list(REPORT_COLUMNS)] + [
        [f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in REPORT_COLUMNS]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_COLUMNS))]
    text = "\n".join("  ".join(cell.ljust(wd) for cell, wd in zip(row, widths)).rstrip()
                     for row in table) + "\n"
    return buf.getvalue(), text


def cmd_report(args) -> int:
    rows = report_rows(args.run_dirs)
    csv_text, text = format_report(rows)
    if args.output:
        base = os.path.splitext(args.output)[0]
        with open(base + ".csv", "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        with open(base + ".txt", "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap; results do not depend on it")

    p = argparse.ArgumentParser(prog="moelab", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-teacher", parents=[common])
    t.add_argument("--steps", type=int)
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train_teacher)

    c = sub.add_parser("compress", parents=[common])
    c.add_argument("--teacher", required=True)
    c.add_argument("--method", choices=("prune", "edit", "merge"))
    c.add_argument("--retention", type=float)
    c.add_argument("--rank-ratio", type=float)
    c.add_argument("--target", type=float)
    c.add_argument("--output-dir")
    c.set_defaults(func=cmd_compress)

    k = sub.add_parser("calibrate", parents=[common])
    k.add_argument("--teacher", required=True)
    k.add_argument("--student", required=True)
    k.add_argument("--temperature", type=float)
    k.add_argument("--lr", type=float)
    k.add_argument("--epochs", type=int)
    k.add_argument("--batch-size", type=int)
    k.add_argument("--grad-accum", type=int)
    k.add_argument("--max-seq-len", type=int)
    k.add_argument("--max-samples", type=int)
    k.add_argument("--optimizer", choices=("adam", "sgd"))
    k.add_argument("--output-dir")
    k.set_defaults(func=cmd_calibrate)

    a = sub.add_parser("analyze", parents=[common])
    a.add_argument("--teacher", required=True)
    a.add_argument("--student", required=True)
    a.add_argument("--map")
    a.add_argument("--output-dir", required=True)
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", parents=[common])
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--output", help="write <output>.csv and <output>.txt")
    r.set_defaults(func=cmd_report)
    return p


def _setup_logging() -> None:
    level = os.environ.get("MOELAB_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"moelab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, MoeLabError, OSError) as exc:
        print(f"moelab: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
