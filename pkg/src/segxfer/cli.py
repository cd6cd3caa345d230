"""Command-line entry point: ``segxfer <command> [flags]``.

Exit codes: 0 success, 2 bad flags, 3 IO failure or malformed input,
4 shape/config mismatch or missing checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (
    ExperimentConfig,
    compare_modes,
    evaluate_segmentation,
    fold_partition,
    format_comparison,
    format_dice_table,
    make_split_plan,
    build_feature_bank,
    prediction_filename,
    run_job,
    run_sweep,
    seg_cross_validation,
    write_dice_csv,
    write_predictions,
    DiceRow,
)
from .metrics import read_records_csv, write_records_csv
from .nets import ALL_MODES, Checkpoint, ConfigError, FeatureMode
from .phantom import DISEASES, LABELS, NUM_LABELS, Corpus, CorpusConfig, generate_corpus, load_corpus, manifest_digest
from .plotting import sweep_charts, write_charts
from .tensor import ShapeError
from .training import TrainConfig, train_segnet, write_history_csv

DATA_ENV = "SEGXFER_DATA"
EXIT_USAGE, EXIT_IO, EXIT_CONFIG = 2, 3, 4
MANIFEST_NAME = "run_manifest.json"

log = logging.getLogger("segxfer")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__
    duration_s: float = 0.0

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# flag parsing helpers
# --------------------------------------------------------------------------


def parse_int_list(text: str) -> tuple[int, ...]:
    """``"1..5"``, ``"1,2,8"`` or a mix such as ``"1..3,10"``."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("empty list")
    return tuple(out)


def parse_modes(text: str) -> tuple[str, ...]:
    if str(text).strip().lower() == "all":
        return tuple(m.value for m in ALL_MODES)
    return tuple(FeatureMode.parse(t.strip()).value for t in str(text).split(",") if t.strip())


def parse_diseases(text: str) -> tuple[str, ...]:
    if str(text).strip().lower() == "all":
        return DISEASES
    out = tuple(t.strip() for t in str(text).split(",") if t.strip())
    for d in out:
        if d not in DISEASES:
            raise ValueError(f"unknown disease {d!r}; choose from {', '.join(DISEASES)}")
    return out


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot read config file {path}: {e}", EXIT_IO) from e
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value", EXIT_USAGE)
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


# option name -> (converter, default, help); flags default to None so that
# precedence is explicit: flag > config file > built-in default
_OPTIONS = {
    "profile": (str, "desk", "desk (64 px) or paper (256 px)"),
    "seed": (int, 0, "master seed"),
    "out": (str, None, "output directory"),
    "data": (str, None, f"dataset root (default: ${DATA_ENV})"),
    "n": (int, None, "segnet base channels"),
    "n_values": (parse_int_list, (8, 16, 32, 64), "channel study values, e.g. 8,16"),
    "folds": (int, 4, "number of cross-validation folds"),
    "fold": (int, 0, "fold whose test patients are held out"),
    "epochs": (int, None, "training epochs"),
    "batches_per_epoch": (int, None, "batches per epoch"),
    "batch_size": (int, None, "mini-batch size"),
    "lr": (float, None, "Adam learning rate"),
    "seg_ckpt": (str, None, "segmentation checkpoint"),
    "ckpt": (str, None, "checkpoint to evaluate"),
    "split": (str, "test", "patients to score: test or train"),
    "disease": (parse_diseases, DISEASES, "effusion, septal or all"),
    "modes": (parse_modes, tuple(m.value for m in ALL_MODES), "comma list of feature modes or all"),
    "mode": (str, "CONCAT", "feature mode"),
    "npos": (parse_int_list, tuple(range(1, 11)), "positive counts, e.g. 1..5"),
    "reps": (int, 10, "repetitions"),
    "rep": (int, 0, "repetition index"),
    "jobs": (int, 1, "parallel worker processes"),
    "resume": (str, "yes", "skip keys already in sweep.csv (yes/no)"),
    "input": (str, None, "sweep.csv to summarise"),
}

_COMMANDS = {
    "phantom-gen": ("profile", "seed", "out"),
    "seg-train": ("data", "profile", "n", "fold", "folds", "epochs", "batches_per_epoch", "batch_size", "lr", "seed", "out"),
    "seg-eval": ("data", "profile", "n_values", "folds", "fold", "ckpt", "split", "epochs", "batches_per_epoch", "batch_size", "lr", "seed", "out"),
    "cls-train": ("data", "profile", "seg_ckpt", "disease", "mode", "npos", "rep", "fold", "folds", "epochs", "batches_per_epoch", "batch_size", "lr", "seed", "out"),
    "sweep": ("data", "profile", "seg_ckpt", "disease", "modes", "npos", "reps", "fold", "folds", "epochs", "batches_per_epoch", "batch_size", "lr", "seed", "jobs", "resume", "out"),
    "report": ("input", "modes", "out"),
}

_REQUIRED = {"phantom-gen": ("out",), "seg-train": ("out",), "seg-eval": ("out",), "cls-train": ("out",), "sweep": ("out",), "report": ("input", "out")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segxfer", description="Phantom generation, segmentation and classifier training, sweeps and reports.")
    parser.add_argument("--version", action="version", version=f"segxfer {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for cmd, opts in _COMMANDS.items():
        p = sub.add_parser(cmd, help=_HELP[cmd])
        p.add_argument("--config", help="key=value file merged under the flags")
        for name in opts:
            _, default, text = _OPTIONS[name]
            flag = "--in" if name == "input" else "--" + name.replace("_", "-")
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            p.add_argument(flag, dest=name, default=None, help=f"{text} [default: {shown}]")
    return parser


_HELP = {
    "phantom-gen": "write a synthetic phantom dataset",
    "seg-train": "train one segmentation network on all folds but --fold",
    "seg-eval": "cross-validate segnets (or score --ckpt) and write dice.csv",
    "cls-train": "train and score one classifier from a split plan",
    "sweep": "run the unbalanced classification sweep",
    "report": "plot a sweep.csv and rank feature modes",
}


def resolve(command: str, ns: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge flags over the config file over defaults and convert types."""
    file_cfg = read_config_file(ns.config) if ns.config else {}
    unknown = set(file_cfg) - set(_COMMANDS[command])
    if unknown:
        raise CliError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}", EXIT_USAGE)
    cfg = {}
    for name in _COMMANDS[command]:
        conv, default, _ = _OPTIONS[name]
        raw = getattr(ns, name)
        if raw is None:
            raw = file_cfg.get(name)
        if raw is None and name == "data":
            raw = os.environ.get(DATA_ENV)
        if raw is None:
            cfg[name] = default
            continue
        try:
            cfg[name] = conv(raw)
        except (ValueError, TypeError) as e:
            raise CliError(f"bad value for --{name.replace('_', '-')}: {raw!r} ({e})", EXIT_USAGE) from e
    for name in _REQUIRED[command]:
        if cfg.get(name) is None:
            flag = "--in" if name == "input" else "--" + name.replace("_", "-")
            raise CliError(f"{command}: {flag} is required", EXIT_USAGE)
    if command != "report" and command != "phantom-gen" and cfg.get("data") is None:
        raise CliError(f"{command}: --data is required (or set ${DATA_ENV})", EXIT_USAGE)
    if cfg.get("profile") not in (None, "desk", "paper"):
        raise CliError(f"unknown profile {cfg['profile']!r}", EXIT_USAGE)
    if cfg.get("split") not in (None, "test", "train"):
        raise CliError(f"--split must be test or train", EXIT_USAGE)
    return cfg


def _train_config(cfg: dict, base: TrainConfig) -> TrainConfig:
    updates = {k: cfg[k] for k in ("epochs", "batches_per_epoch", "batch_size", "lr") if cfg.get(k) is not None}
    return replace(base, seed=cfg["seed"], profile=cfg["profile"], **updates)


def _experiment_config(cfg: dict, **kw) -> ExperimentConfig:
    factory = ExperimentConfig.paper if cfg["profile"] == "paper" else ExperimentConfig.desk
    base = factory(seed=cfg["seed"])
    return replace(
        base,
        folds=cfg["folds"],
        seg_fold=cfg["fold"],
        seg_train=_train_config(cfg, base.seg_train),
        cls_train=_train_config(cfg, base.cls_train),
        **kw,
    )


def _load_data(path) -> Corpus:
    try:
        return load_corpus(path)
    except (OSError, KeyError, ValueError) as e:
        raise CliError(f"cannot read dataset at {path}: {e}", EXIT_IO) from e


def _load_ckpt(path, what="checkpoint") -> Checkpoint:
    if path is None:
        raise CliError(f"missing {what}", EXIT_CONFIG)
    if not Path(path).is_file():
        raise CliError(f"{what} not found: {path}", EXIT_CONFIG)
    try:
        return Checkpoint.load(path)
    except (ValueError, OSError) as e:
        raise CliError(f"cannot read {what} {path}: {e}", EXIT_IO) from e


def _check_seg_ckpt(ckpt: Checkpoint, corpus: Corpus) -> None:
    size = corpus.normals[0].image.shape[-1]
    if ckpt.spec.arch != "segnet":
        raise CliError(f"checkpoint holds a {ckpt.spec.arch}, expected segnet", EXIT_CONFIG)
    if ckpt.spec.size != size or ckpt.spec.N != NUM_LABELS:
        raise CliError(
            f"segnet expects {ckpt.spec.size}px images with {ckpt.spec.N} labels; dataset has {size}px and {NUM_LABELS}",
            EXIT_CONFIG,
        )


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create {out}: {e}", EXIT_IO) from e
    return out


def _jsonable(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_phantom_gen(cfg: dict) -> list[Path]:
    out = _out_dir(cfg["out"])
    corpus = generate_corpus(CorpusConfig.for_profile(cfg["profile"], seed=cfg["seed"]), out)
    counts = ", ".join(f"{len(v)} {k}" for k, v in corpus.positives.items())
    print(f"{len(corpus.patients)} patients, {len(corpus.normals)} normal slices, positives: {counts}")
    print(f"manifest sha256 {manifest_digest(out)}")
    return [out / "manifest.tsv"]


def cmd_seg_train(cfg: dict) -> list[Path]:
    corpus = _load_data(cfg["data"])
    out = _out_dir(cfg["out"])
    exp = _experiment_config(cfg)
    n = cfg["n"] if cfg["n"] is not None else 16
    groups = _folds(corpus, exp)
    held = set(groups[cfg["fold"]])
    X, Y = Corpus.stack(corpus.normals_of([p for p in corpus.patients if p not in held]))
    tc = exp.seg_train
    ckpt, history = train_segnet(tc, X, Y, n=n, N=NUM_LABELS, levels=exp.levels, on_epoch=_epoch_logger("segnet"))
    ckpt.save(out / "segnet.ckpt")
    write_history_csv(out / "history.csv", history)
    print(f"trained segnet n={n} on {len(X)} slices; final loss {history[-1]:.4f}")
    return [out / "segnet.ckpt", out / "history.csv"]


def _folds(corpus: Corpus, exp: ExperimentConfig) -> list[list[str]]:
    try:
        groups = fold_partition(corpus.patients, exp.folds, exp.seed)
    except ValueError as e:
        raise CliError(str(e), EXIT_CONFIG) from e
    if not 0 <= exp.seg_fold < exp.folds:
        raise CliError(f"--fold must be in 0..{exp.folds - 1}", EXIT_USAGE)
    return groups


def _epoch_logger(what):
    def hook(epoch, loss):
        log.info("%s epoch %d mean batch loss %.4f", what, epoch + 1, loss)

    return hook


def cmd_seg_eval(cfg: dict) -> list[Path]:
    corpus = _load_data(cfg["data"])
    out = _out_dir(cfg["out"])
    exp = _experiment_config(cfg)
    groups = _folds(corpus, exp)
    if cfg["ckpt"] is not None:
        ckpt = _load_ckpt(cfg["ckpt"])
        _check_seg_ckpt(ckpt, corpus)
        held = set(groups[cfg["fold"]])
        patients = sorted(held) if cfg["split"] == "test" else [p for p in corpus.patients if p not in held]
        X, Y = Corpus.stack(corpus.normals_of(patients))
        scores = evaluate_segmentation(ckpt, X, Y)
        rows = [DiceRow(cfg["fold"], ckpt.spec.n, LABELS[k], float(scores[k])) for k in range(NUM_LABELS)]
    else:
        rows = seg_cross_validation(corpus, exp, n_values=cfg["n_values"], checkpoint_dir=out)
    write_dice_csv(out / "dice.csv", rows)
    print(format_dice_table(rows))
    fg = [r.dice for r in rows if r.label != "BG"]
    print(f"mean foreground Dice {np.mean(fg):.4f}")
    return [out / "dice.csv"]


def cmd_cls_train(cfg: dict) -> list[Path]:
    corpus = _load_data(cfg["data"])
    out = _out_dir(cfg["out"])
    mode = FeatureMode.parse(cfg["mode"]).value
    seg = None
    if FeatureMode(mode).uses_seg:
        seg = _load_ckpt(cfg["seg_ckpt"], "segmentation checkpoint")
        _check_seg_ckpt(seg, corpus)
    disease = cfg["disease"][0]
    exp = _experiment_config(cfg, modes=(mode,), diseases=(disease,))
    _folds(corpus, exp)
    plan = make_split_plan(exp, corpus, disease, cfg["rep"])
    bank = build_feature_bank(exp, corpus, seg, [mode], [disease])
    k = cfg["npos"][0]
    record, preds = run_job(exp, bank, plan, mode, k)
    write_records_csv(out / "metrics.csv", [record])
    name = prediction_filename(record.key)
    write_predictions(out / name, preds)
    print(f"{disease} {mode} n_pos={k} rep={cfg['rep']}: TPR {record.tpr:.3f} TNR {record.tnr:.3f} kappa {record.kappa:.3f}")
    return [out / "metrics.csv", out / name]


def cmd_sweep(cfg: dict) -> list[Path]:
    corpus = _load_data(cfg["data"])
    out = _out_dir(cfg["out"])
    modes = cfg["modes"]
    seg = None
    if any(FeatureMode(m).uses_seg for m in modes):
        seg = _load_ckpt(cfg["seg_ckpt"], "segmentation checkpoint (required for non-IMG modes)")
        _check_seg_ckpt(seg, corpus)
    exp = _experiment_config(cfg, modes=modes, n_pos=cfg["npos"], repetitions=cfg["reps"], diseases=cfg["disease"])
    _folds(corpus, exp)
    if max(exp.n_pos) > exp.pos_pool or min(exp.n_pos) < 1:
        raise CliError(f"--npos must lie in 1..{exp.pos_pool}", EXIT_USAGE)
    records = run_sweep(exp, seg, corpus, out_dir=out, jobs=cfg["jobs"], resume=cfg["resume"].lower() in ("yes", "true", "1"))
    print(format_comparison(compare_modes(records, modes)))
    return [out / "sweep.csv", out / "predictions"]


def cmd_report(cfg: dict) -> list[Path]:
    out = _out_dir(cfg["out"])
    try:
        records = read_records_csv(cfg["input"])
    except (OSError, ValueError, KeyError, csv.Error) as e:
        raise CliError(f"cannot read sweep CSV {cfg['input']}: {e}", EXIT_IO) from e
    if not records:
        raise CliError(f"{cfg['input']} holds no records", EXIT_IO)
    paths = write_charts(sweep_charts(records, cfg["modes"]), out)
    present = set(cfg["modes"])
    text = format_comparison(compare_modes([r for r in records if r.mode in present] or records, cfg["modes"]))
    (out / "summary.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return paths + [out / "summary.txt"]


_HANDLERS = {
    "phantom-gen": cmd_phantom_gen,
    "seg-train": cmd_seg_train,
    "seg-eval": cmd_seg_eval,
    "cls-train": cmd_cls_train,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:  # argparse uses 2 for usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    start = time.perf_counter()
    try:
        cfg = resolve(ns.command, ns, parser)
        artifacts = _HANDLERS[ns.command](cfg)
    except CliError as e:
        if e.code == EXIT_USAGE:
            print(parser.format_usage().rstrip(), file=sys.stderr)
            print(f"usage error: {e}", file=sys.stderr)
        else:
            print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ShapeError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    manifest = RunManifest(
        command=ns.command,
        config=_jsonable(cfg),
        seed=cfg.get("seed", 0),
        artifacts=[str(p) for p in artifacts],
        duration_s=round(time.perf_counter() - start, 3),
    )
    manifest.write(cfg["out"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
