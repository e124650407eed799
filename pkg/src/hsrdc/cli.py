"""Command-line entry point: ``hsrdc gen-data|train|ablate|eval|diagnose``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.  Every
failure prints one line ``hsrdc: error[<kind>]: <reason>`` on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import datagen
from .config import ConfigError, RunConfig, apply_overrides, load_config, parse_list
from .datagen import DomainPair, LabeledSet, UnlabeledSet
from .errors import ContractError, NumericalDomainError, NumericalFailure
from .evalkit import accuracy, emit, emit_charts, iou_per_class, read_csv, write_csv
from .trainer import (ABLATIONS, RunResult, TrainConfig, TrainedModel, load_model, predict,
                      save_model, train)

log = logging.getLogger("hsrdc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- manifest ---------------------------------------------------------------------
def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Dict[str, str]]
    seeds: List[int]
    out_dir: str
    started: str
    finished: str = ""
    artifacts: Dict[str, str] = field(default_factory=dict)

    def record(self, root: Path, paths: Sequence[Path]) -> None:
        for p in paths:
            self.artifacts[Path(p).relative_to(root).as_posix()] = sha256_file(p)

    def write(self, path: Path) -> Path:
        self.finished = _now()
        self.artifacts = dict(sorted(self.artifacts.items()))
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# -- config plumbing --------------------------------------------------------------
def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    apply_overrides(cfg, getattr(args, "set", None) or [])
    # explicit flags win over file and --set values
    for flag, key in (("out", "run.out"), ("data", "data.dir"), ("seeds", "run.seeds"),
                      ("jobs", "run.jobs"), ("mode", "run.mode"), ("ablation", "run.ablation"),
                      ("generator", "data.generator"), ("epochs", "train.epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(key, str(value))
    return cfg


def _required(cfg: RunConfig, key: str) -> str:
    value = cfg.get(key)
    if value in (None, ""):
        raise ConfigError(f"missing required setting {key}")
    return value


def _int(cfg: RunConfig, key: str, default: int) -> int:
    raw = cfg.get(key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {raw!r}") from None


def _mode(cfg: RunConfig) -> str:
    mode = cfg.get("run.mode", "classification")
    if mode not in ("classification", "seg"):
        raise ConfigError(f"run.mode must be 'classification' or 'seg', got {mode!r}")
    return mode


def _train_config(cfg: RunConfig, mode: str) -> TrainConfig:
    try:
        if mode == "seg":
            from .segext import seg_train_config
            base = {**seg_train_config().to_mapping(), **cfg.train}
        else:
            base = dict(cfg.train)
        tc = TrainConfig.from_mapping(base)
        ablation = cfg.get("run.ablation")
        return tc.with_ablation(ablation) if ablation else tc
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def _seg_config(cfg: RunConfig):
    from .segext import SegConfig
    kinds = {f.name: f.type for f in dataclasses.fields(SegConfig)}
    kwargs = {}
    for key, raw in cfg.seg.items():
        if key not in kinds:
            raise ConfigError(f"unknown seg config key {key!r}")
        kwargs[key] = _convert(raw, str(kinds[key]), f"seg.{key}")
    try:
        return SegConfig(**kwargs)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def _convert(raw: str, kind: str, key: str):
    try:
        if "bool" in kind:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "list" in kind:
            return [float(v) for v in parse_list(raw)]
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def _seeds(cfg: RunConfig, base: int) -> List[int]:
    raw = cfg.get("run.seeds", "1")
    items = parse_list(raw)
    try:
        if len(items) == 1 and "," not in raw:
            n = int(items[0])
            if n < 1:
                raise ConfigError("run.seeds must be >= 1")
            return [base + i for i in range(n)]
        return [int(v) for v in items]
    except ValueError:
        raise ConfigError(f"run.seeds must be a count or a comma list, got {raw!r}") from None


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(_required(cfg, "run.out"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


# -- gen-data -----------------------------------------------------------------------
# generator -> (required params with types, optional params with defaults)
GENERATORS: Dict[str, Tuple[Dict[str, str], Dict[str, Tuple[str, object]]]] = {
    "two_moons": ({"n": "int", "noise": "float", "rotation_deg": "float"},
                  {"seed": ("int", 0), "inductive": ("bool", True)}),
    "gaussian_shift": ({"k": "int", "dim": "int", "sep": "float", "shift": "list"},
                       {"cov_scale": ("float", 1.0), "n_per_class": ("int", 200), "seed": ("int", 0)}),
    "toy_scenes": ({"n_source": "int", "n_target": "int", "n_test": "int"},
                   {"size": ("int", 32), "a": ("int", 2), "shift": ("float", 1.0), "seed": ("int", 0)}),
}


def _generator_params(cfg: RunConfig) -> Tuple[str, dict]:
    name = _required(cfg, "data.generator")
    if name not in GENERATORS:
        raise ConfigError(f"unknown generator {name!r}; choose from {', '.join(GENERATORS)}")
    required, optional = GENERATORS[name]
    known = set(required) | set(optional) | {"generator", "dir"}
    for key in cfg.data:
        if key not in known:
            raise ConfigError(f"unknown parameter data.{key} for generator {name}")
    params = {}
    for key, kind in required.items():
        params[key] = _convert(_required(cfg, f"data.{key}"), kind, f"data.{key}")
    for key, (kind, default) in optional.items():
        raw = cfg.get(f"data.{key}")
        params[key] = default if raw is None else _convert(raw, kind, f"data.{key}")
    return name, params


def cmd_gen_data(cfg: RunConfig) -> List[Path]:
    name, params = _generator_params(cfg)
    out = _out_dir(cfg)
    manifest = RunManifest("gen-data", cfg.snapshot(), [params.get("seed", 0)], str(out), _now())
    try:
        if name == "toy_scenes":
            from .segext import save_scenes, toy_scene_pair
            pair = toy_scene_pair(**params)
            files = []
            for split in ("source", "target_train", "target_test", "source_test"):
                path = out / f"{split}.scn"
                save_scenes(path, getattr(pair, split))
                files.append(path)
        else:
            if name == "two_moons":
                pair = datagen.two_moons_pair(**params)
            else:
                pair = datagen.gen_gaussian_shift(**params)
            files = [out / "source.csv", out / "target_train.csv"]
            datagen.save_csv(files[0], pair.source)
            datagen.save_csv(files[1], pair.target_train_labeled())
            if pair.target_test is not None:
                files.append(out / "target_test.csv")
                datagen.save_csv(files[2], pair.target_test)
    except ContractError as exc:
        raise ConfigError(f"generator {name}: {exc}") from None
    manifest.record(out, files)
    files.append(manifest.write(out / "manifest.json"))
    for p in files[:-1]:
        print(f"wrote {p}")
    return files


# -- datasets ------------------------------------------------------------------------
def _data_dir(cfg: RunConfig) -> Path:
    root = Path(_required(cfg, "data.dir"))
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    return root


def _load_labeled_csv(path: Path, what: str) -> LabeledSet:
    data = _read_csv(path)
    if not isinstance(data, LabeledSet):
        raise DataError(f"{path}: {what} must have a label column")
    return data


def _read_csv(path: Path):
    if not path.exists():
        raise DataError(f"missing data file {path}")
    try:
        return datagen.load_csv(path)
    except ContractError as exc:
        raise DataError(str(exc)) from None


def load_classification_data(root: Path) -> DomainPair:
    source = _load_labeled_csv(root / "source.csv", "source data")
    target_train = _read_csv(root / "target_train.csv")
    test_path = root / "target_test.csv"
    target_test = _load_labeled_csv(test_path, "target test data") if test_path.exists() else None
    k = int(source.y.max()) if len(source) else 0
    if k < 2 or source.y.min() < 1:
        raise DataError(f"{root / 'source.csv'}: labels must be 1..K with K >= 2")
    for name, part in (("target_train.csv", target_train), ("target_test.csv", target_test)):
        if part is None:
            continue
        if part.dim != source.dim:
            raise DataError(f"dimension mismatch: source.csv has {source.dim} features, "
                            f"{name} has {part.dim}")
        if isinstance(part, LabeledSet) and len(part) and (part.y.min() < 1 or part.y.max() > k):
            raise DataError(f"{name}: labels outside 1..{k}")
    labels = target_train.y.copy() if isinstance(target_train, LabeledSet) else None
    return DomainPair(source, UnlabeledSet(target_train.X), k, target_test,
                      {"data_dir": str(root)}, labels)


def _read_scenes(path: Path):
    from .segext import load_scenes
    if not path.exists():
        raise DataError(f"missing data file {path}")
    try:
        return load_scenes(path)
    except ContractError as exc:
        raise DataError(str(exc)) from None


def load_seg_data(root: Path):
    from .segext import SegDomainPair
    parts = {s: _read_scenes(root / f"{s}.scn") for s in ("source", "target_train", "target_test",
                                                            "source_test")}
    ref = parts["source"]
    for name, part in parts.items():
        if part.shape != ref.shape or part.k != ref.k or part.a != ref.a:
            raise DataError(f"{name}.scn: shape/K/ratio differ from source.scn")
        if name != "target_train" and part.labels is None:
            raise DataError(f"{name}.scn must be labeled")
    return SegDomainPair(**parts, metadata={"data_dir": str(root)})


# -- train / ablate ------------------------------------------------------------------
@dataclass
class _Job:
    mode: str
    train: dict
    seg: Optional[dict]
    pair: object
    run_dir: str


def _run_job(job: _Job) -> Tuple[List[dict], List[str]]:
    """One seed in its own directory; returns metrics rows and written files."""
    run_dir = Path(job.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config = TrainConfig(**job.train)
    extra = None
    try:
        # overflow is caught by the finiteness checks; numpy's warnings only add noise
        with np.errstate(over="ignore", invalid="ignore"):
            if job.mode == "seg":
                from .segext import SegConfig, train_seg
                result = train_seg(config, SegConfig(**job.seg), job.pair)
                extra = {"seg": job.seg}
            else:
                result = train(config, job.pair)
    except NumericalFailure as exc:
        where = ""
        if exc.checkpoint is not None:
            ckpt = run_dir / "checkpoint.npz"
            with open(ckpt, "wb") as fh:
                np.savez(fh, **exc.checkpoint)
            where = f"; last good parameters saved to {ckpt}"
        raise NumericalFailure(f"seed {config.seed}: {exc}{where}") from None
    files = emit(result.metrics, run_dir)
    files += save_model(result.model, run_dir / "model", extra)
    if result.best_state is not None:
        best = run_dir / "best_params.npz"
        with open(best, "wb") as fh:
            np.savez(fh, **result.best_state)
        files.append(best)
    return result.metrics, [str(p) for p in files]


def _run_jobs(jobs: List[_Job], workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def _prepare(cfg: RunConfig):
    """Everything that can fail on config or data, before any training compute."""
    mode = _mode(cfg)
    base = _train_config(cfg, mode)
    seg = dataclasses.asdict(_seg_config(cfg)) if mode == "seg" else None
    seeds = _seeds(cfg, base.seed)
    workers = _int(cfg, "run.jobs", 1)
    root = _data_dir(cfg)
    pair = load_seg_data(root) if mode == "seg" else load_classification_data(root)
    out = _out_dir(cfg)
    return mode, base, seg, seeds, workers, pair, out


def headline_metrics(mode: str) -> List[str]:
    if mode == "seg":
        return ["target_test_miou", "target_test_acc", "target_train_miou", "target_train_acc"]
    return ["target_test_acc", "target_train_acc"]


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def _summarize(finals: List[dict], keys: Sequence[str]) -> Dict[str, Tuple[float, float]]:
    out = {}
    for key in keys:
        vals = [row[key] for row in finals if key in row]
        if vals:
            out[key] = _mean_std(vals)
    return out


def cmd_train(cfg: RunConfig) -> Path:
    mode, base, seg, seeds, workers, pair, out = _prepare(cfg)
    manifest = RunManifest("train", cfg.snapshot(), seeds, str(out), _now())
    jobs = [_Job(mode, dataclasses.replace(base, seed=s).to_mapping(), seg, pair,
                 str(out / f"seed_{s}")) for s in seeds]
    results = _run_jobs(jobs, workers)
    finals = [rows[-1] for rows, _ in results]
    keys = [k for k in finals[0] if k != "epoch" and isinstance(finals[0][k], (int, float))]
    stats = _summarize(finals, keys)
    summary_rows = [{"metric": k, "mean": m, "std": s, "n_seeds": len(seeds)} for k, (m, s) in stats.items()]
    summary = out / "summary.csv"
    write_csv(summary, summary_rows, ["metric", "mean", "std", "n_seeds"])
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    files = [Path(p) for _, fs in results for p in fs] + [summary, out / "config.txt"]
    manifest.record(out, files)
    manifest.write(out / "manifest.json")
    print(f"method {base.method}, {len(seeds)} seed(s), runs in {out}")
    for key in headline_metrics(mode):
        if key in stats:
            m, s = stats[key]
            print(f"{key}: {m:.4f} +- {s:.4f}")
    return out


def cmd_ablate(cfg: RunConfig) -> Path:
    mode, base, seg, seeds, workers, pair, out = _prepare(cfg)
    if cfg.get("run.ablation"):
        raise ConfigError("ablate runs every ablation row; drop run.ablation/--ablation")
    manifest = RunManifest("ablate", cfg.snapshot(), seeds, str(out), _now())
    keys = headline_metrics(mode)
    rows, files = [], []
    for name in ABLATIONS:
        tc = base.with_ablation(name)
        jobs = [_Job(mode, dataclasses.replace(tc, seed=s).to_mapping(), seg, pair,
                     str(out / name / f"seed_{s}")) for s in seeds]
        results = _run_jobs(jobs, workers)
        finals = [r[-1] for r, _ in results]
        files += [Path(p) for _, fs in results for p in fs]
        row = {"method": name, "n_seeds": len(seeds)}
        for key, (m, s) in _summarize(finals, keys).items():
            row[f"{key}_mean"], row[f"{key}_std"] = m, s
        for s, fin in zip(seeds, finals):
            row[f"{keys[0]}_seed{s}"] = fin.get(keys[0], float("nan"))
        rows.append(row)
        log.info("ablation row %s done", name)
    table = out / "ablation.csv"
    write_csv(table, rows, list(rows[0].keys()))
    files.append(table)
    manifest.record(out, files)
    manifest.write(out / "manifest.json")
    width = max(len(n) for n in ABLATIONS)
    for row in rows:
        m, s = row.get(f"{keys[0]}_mean", float("nan")), row.get(f"{keys[0]}_std", float("nan"))
        print(f"{row['method']:<{width}}  {keys[0]} {m:.4f} +- {s:.4f}")
    return table


# -- eval ------------------------------------------------------------------------------
def _model_prefix(raw: str) -> Path:
    p = Path(raw)
    return p.with_suffix("") if p.suffix in (".npz", ".json") else p


def _load_model(raw: str) -> TrainedModel:
    try:
        return load_model(_model_prefix(raw))
    except ContractError as exc:
        raise DataError(str(exc)) from None
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load model {raw}: {exc}") from None


def _eval_splits(root: Optional[Path], files: Sequence[str], suffix: str) -> List[Tuple[str, Path]]:
    splits = []
    if root is not None:
        for setting, name in (("transductive", "target_train"), ("inductive", "target_test")):
            path = root / f"{name}{suffix}"
            if path.exists():
                splits.append((setting, path))
    for f in files:
        splits.append((f"file:{Path(f).stem}", Path(f)))
    if not splits:
        raise DataError("nothing to evaluate: no target_train/target_test files and no --file")
    return splits


def _eval_classification(model: TrainedModel, splits, out: Path) -> Tuple[List[dict], List[Path]]:
    k = model.k
    dim = model.task.describe()["dim"]
    rows, files = [], []
    for setting, path in splits:
        data = _read_csv(path)
        if not isinstance(data, LabeledSet):
            raise DataError(f"{path}: labels required for eval (no label column)")
        if data.dim != dim:
            raise DataError(f"dimension mismatch: model expects {dim} features, {path} has {data.dim}")
        if len(data) == 0:
            raise DataError(f"{path}: no rows")
        if data.y.min() < 1 or data.y.max() > k:
            raise DataError(f"{path}: labels outside 1..{k}")
        pred = predict(model, data.X)
        row = {"setting": setting, "file": path.name, "n": len(data),
               "accuracy": accuracy(pred, data.y), "mean_class_accuracy": accuracy(pred, data.y, True)}
        for c in range(1, k + 1):
            mask = data.y == c
            row[f"acc_class_{c}"] = float(np.mean(pred[mask] == c)) if mask.any() else float("nan")
        rows.append(row)
        pred_path = out / f"predictions_{setting.replace(':', '_')}.csv"
        write_csv(pred_path, [{"pred": int(p)} for p in pred], ["pred"])
        files.append(pred_path)
    return rows, files


def _eval_seg(model: TrainedModel, splits, out: Path) -> Tuple[List[dict], List[Path]]:
    from .segext import infer_seg, save_label_grids
    task = model.task
    rows, files = [], []
    for setting, path in splits:
        scenes = _read_scenes(path)
        if isinstance(scenes, np.ndarray) or scenes.labels is None:
            raise DataError(f"{path}: labels required for eval (scene file has no labels)")
        if scenes.shape[:2] != (task.h, task.w) or scenes.shape[2] != task.Xs.shape[1]:
            raise DataError(f"dimension mismatch: model expects {task.h}x{task.w}x{task.Xs.shape[1]} "
                            f"scenes, {path} has {'x'.join(map(str, scenes.shape))}")
        if scenes.a != task.a or scenes.k != task.k:
            raise DataError(f"{path}: K/ratio differ from the model")
        pred = infer_seg(model, scenes)
        ious, miou = iou_per_class(pred, scenes.labels, task.k)
        row = {"setting": setting, "file": path.name, "n": len(scenes),
               "pixel_accuracy": accuracy(pred, scenes.labels), "miou": miou}
        row.update({f"iou_class_{c + 1}": v for c, v in enumerate(ious)})
        rows.append(row)
        pred_path = out / f"predictions_{setting.replace(':', '_')}.scn"
        save_label_grids(pred_path, pred, task.k, task.a)
        files.append(pred_path)
    return rows, files


def cmd_eval(cfg: RunConfig, model_path: str, files: Sequence[str]) -> Path:
    model = _load_model(model_path)
    seg = model.task.describe()["kind"] == "segmentation"
    root = _data_dir(cfg) if cfg.get("data.dir") else None
    splits = _eval_splits(root, files, ".scn" if seg else ".csv")
    out = Path(cfg.get("run.out") or _model_prefix(model_path).parent)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("eval", cfg.snapshot(), [model.config.seed], str(out), _now())
    rows, written = (_eval_seg if seg else _eval_classification)(model, splits, out)
    table = out / "eval.csv"
    write_csv(table, rows, list(rows[0].keys()))
    manifest.record(out, written + [table])
    manifest.write(out / "eval_manifest.json")
    key = "miou" if seg else "accuracy"
    for row in rows:
        print(f"{row['setting']:<14} {row['file']:<20} {key} {row[key]:.4f}")
    return table


# -- diagnose --------------------------------------------------------------------------
def _first_increase_after(values: Sequence[float], start_epoch: int) -> int:
    return sum(1 for e in range(start_epoch, len(values)) if values[e] > values[e - 1])


def diagnose_rows(rows: List[dict]) -> dict:
    first, last = rows[0], rows[-1]
    out = {"epochs": len(rows)}
    for dom in ("src", "tgt"):
        key = f"{dom}_instance_to_centroid"
        if key in first:
            ratio = last[key] / first[key] if first[key] else float("nan")
            out[f"{dom}_centroid_ratio"] = ratio
    if "srcinsmean_to_tgtinsmean" in first:
        series = [r["srcinsmean_to_tgtinsmean"] for r in rows]
        out["insmean_increases_after_5"] = _first_increase_after(series, 5)
        steps = len(series) - 1
        out["insmean_nonincreasing_frac"] = (
            sum(1 for a, b in zip(series, series[1:]) if b <= a) / steps if steps else float("nan"))
    for key in ("target_test_acc", "target_test_miou", "target_train_acc", "disc_acc"):
        if key in last:
            out[key] = last[key]
    return out


def cmd_diagnose(cfg: RunConfig, run: str) -> Path:
    root = Path(run)
    if not root.is_dir():
        raise DataError(f"run directory {root} does not exist")
    found = sorted(root.rglob("metrics.csv"))
    if not found:
        raise DataError(f"no metrics.csv under {root}")
    manifest = RunManifest("diagnose", cfg.snapshot(), [], str(root), _now())
    rows, files = [], []
    for path in found:
        metrics = read_csv(path)
        if not metrics:
            raise DataError(f"{path}: no epochs logged")
        files += emit_charts(metrics, path.parent)
        rows.append({"run": path.parent.relative_to(root).as_posix() or ".", **diagnose_rows(metrics)})
    columns = list(dict.fromkeys(k for r in rows for k in r))
    table = root / "diagnose.csv"
    write_csv(table, rows, columns)
    manifest.record(root, files + [table])
    manifest.write(root / "diagnose_manifest.json")
    for r in rows:
        details = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in r.items() if k != "run")
        print(f"{r['run']}: {details}")
    return table


# -- argument parsing --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hsrdc", description="Hybrid structural-regularized clustering for domain adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, data=True, out=True):
        p.add_argument("--config", help="flat section.key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if out:
            p.add_argument("--out", help="output directory (run.out)")
        if data:
            p.add_argument("--data", help="dataset directory (data.dir)")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p, data=False)
    p.add_argument("--generator", help="two_moons | gaussian_shift | toy_scenes")

    for name, text in (("train", "train one configuration over seeds"),
                       ("ablate", "run the eight ablation rows over seeds")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--seeds", help="seed count or comma list (run.seeds)")
        p.add_argument("--jobs", type=int, help="parallel worker processes (run.jobs)")
        p.add_argument("--mode", choices=["classification", "seg"], help="task kind (run.mode)")
        p.add_argument("--epochs", type=int, help="training epochs (train.epochs)")
        if name == "train":
            p.add_argument("--ablation", choices=list(ABLATIONS), help="ablation row (run.ablation)")

    p = sub.add_parser("eval", help="evaluate a saved model")
    common(p)
    p.add_argument("--model", required=True, help="model file prefix (or its .npz/.json)")
    p.add_argument("--file", action="append", default=[], help="extra labeled dataset file")

    p = sub.add_parser("diagnose", help="charts and summary for finished runs")
    common(p, data=False, out=False)
    p.add_argument("--run", required=True, help="run directory to scan")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(f"hsrdc: error[{kind}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: gen-data, train, ablate, eval, diagnose")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = _resolve_config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.model, args.file)
        else:
            cmd_diagnose(cfg, args.run)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except DataError as exc:
        return _fail("data", exc, EXIT_DATA)
    except (NumericalFailure, NumericalDomainError) as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except ContractError as exc:
        return _fail("data", exc, EXIT_DATA)
    except OSError as exc:
        return _fail("data", f"{exc.filename or ''}: {exc.strerror or exc}", EXIT_DATA)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
