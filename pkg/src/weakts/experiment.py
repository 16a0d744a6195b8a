"""
Configuration-driven experiments: materialise a corpus once, expand the
pipeline variants, train every listed model (plus the ROCKET baseline) and
write per-model JSON reports, loss-curve CSVs and an aggregate table.
"""

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigurationError, WeakTSError
from .pipeline import NORMALIZATION_MODES, PipelineConfig, build_splits, load_csv
from .rocket import DEFAULT_KERNELS, rocket_classify
from .synth import SynthConfig, generate
from .training import ReplicateReport, RunReport, TrainConfig, aggregate, train
from .zoo import MODEL_NAMES, SINGLE_STEP, ModelSpec

logger = logging.getLogger(__name__)

ROCKET = "ROCKET"
CSV_COLUMNS = ("model", "upsample", "normalization", "accuracy", "auc", "f1_0", "f1_1", "best")
MODEL_OVERRIDES = ("fcn_filters", "resnet_filters", "kernel_sizes", "lstm_units", "d_model")


class ExperimentError(WeakTSError, RuntimeError):
    """A model failed while the experiment was running."""

    def __init__(self, model, cause):
        super().__init__(f"{model}: {cause}")
        self.model = model


@dataclass
class ExperimentConfig:
    """Parsed experiment document; see ``docs/experiment_config.md`` for the JSON layout."""

    models: List[str]
    csv_dir: Optional[str] = None
    synth: Optional[SynthConfig] = None
    participants: int = 18
    window: int = 40
    steps: int = 4
    normalization: List[str] = field(default_factory=lambda: ["both"])
    upsample: List[bool] = field(default_factory=lambda: [True])
    split: tuple = (12, 2, 4)
    split_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    model_overrides: dict = field(default_factory=dict)
    rocket_kernels: int = DEFAULT_KERNELS
    out: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("config: expected a JSON object")
        known = {"dataset", "pipeline", "models", "train", "model_overrides", "rocket", "out"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"config: unknown field(s) {unknown}")

        models = d.get("models")
        if not isinstance(models, list) or not models:
            raise ConfigurationError("models: expected a non-empty list of model names")
        for i, name in enumerate(models):
            if name != ROCKET and name not in MODEL_NAMES:
                raise ConfigurationError(f"models[{i}]: unknown model {name!r}")
        if len(set(models)) != len(models):
            raise ConfigurationError("models: duplicate names")

        ds = d.get("dataset", {"synth": {}})
        csv_dir = synth = None
        participants = 18
        if not isinstance(ds, dict) or ("csv_dir" in ds) == ("synth" in ds):
            raise ConfigurationError("dataset: give exactly one of 'csv_dir' or 'synth'")
        if "csv_dir" in ds:
            csv_dir = str(ds["csv_dir"])
        else:
            synth = _build(SynthConfig, ds["synth"], "dataset.synth")
            participants = ds.get("participants", 18)
            if not isinstance(participants, int) or participants < 3:
                raise ConfigurationError("dataset.participants: need an integer >= 3")

        pipe = dict(d.get("pipeline", {}))
        norm = pipe.pop("normalization", "both")
        norm = [norm] if isinstance(norm, str) else list(norm)
        for i, mode in enumerate(norm):
            if mode not in NORMALIZATION_MODES:
                raise ConfigurationError(
                    f"pipeline.normalization[{i}]: {mode!r} is not one of {NORMALIZATION_MODES}")
        ups = pipe.pop("upsample", True)
        ups = [ups] if isinstance(ups, bool) else list(ups)
        if not ups or not all(isinstance(u, bool) for u in ups):
            raise ConfigurationError("pipeline.upsample: expected a boolean or a list of booleans")
        pipe_kw = {"window": pipe.pop("window", 40), "steps": pipe.pop("steps", 4),
                   "split": tuple(pipe.pop("split", (12, 2, 4))), "split_seed": pipe.pop("seed", 0)}
        if pipe:
            raise ConfigurationError(f"pipeline: unknown field(s) {sorted(pipe)}")
        # validates window/steps/split
        _build(PipelineConfig, {"window": pipe_kw["window"], "steps": pipe_kw["steps"],
                                "split": pipe_kw["split"]}, "pipeline")

        train_cfg = _build(TrainConfig, d.get("train", {}), "train")
        overrides = dict(d.get("model_overrides", {}))
        bad = sorted(set(overrides) - set(MODEL_OVERRIDES))
        if bad:
            raise ConfigurationError(f"model_overrides: unknown field(s) {bad}")
        rocket = dict(d.get("rocket", {}))
        kernels = rocket.pop("kernels", DEFAULT_KERNELS)
        if rocket:
            raise ConfigurationError(f"rocket: unknown field(s) {sorted(rocket)}")
        if not isinstance(kernels, int) or kernels < 1:
            raise ConfigurationError("rocket.kernels: expected a positive integer")

        cfg = cls(models=list(models), csv_dir=csv_dir, synth=synth, participants=participants,
                  normalization=norm, upsample=ups, train=train_cfg, model_overrides=overrides,
                  rocket_kernels=kernels, out=d.get("out"), **pipe_kw)
        for name in cfg.models:
            if name != ROCKET:
                try:
                    cfg.spec(name, channels=1)
                except (ConfigurationError, TypeError) as exc:
                    raise ConfigurationError(f"model_overrides: invalid for {name}: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(doc)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Global seed override: training, splitting, and synthetic generation."""
        synth = replace(self.synth, seed=seed) if self.synth is not None else None
        return replace(self, train=replace(self.train, seed=seed), split_seed=seed, synth=synth)

    def spec(self, name, channels) -> ModelSpec:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in self.model_overrides.items()}
        steps = 1 if name in SINGLE_STEP else self.steps
        return ModelSpec.create(name, channels=channels, length=self.window, steps=steps, **kw)

    def to_dict(self) -> dict:
        dataset = {"csv_dir": self.csv_dir} if self.csv_dir else {
            "synth": asdict(self.synth), "participants": self.participants}
        return {
            "dataset": dataset,
            "pipeline": {"window": self.window, "steps": self.steps, "split": list(self.split),
                         "seed": self.split_seed, "normalization": self.normalization,
                         "upsample": self.upsample},
            "models": self.models,
            "train": asdict(self.train),
            "model_overrides": self.model_overrides,
            "rocket": {"kernels": self.rocket_kernels},
            "out": self.out,
        }

    def variants(self):
        """``(upsample, normalization)`` pairs in a fixed order."""
        return [(u, n) for u in self.upsample for n in self.normalization]


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown field(s) {unknown}")
    try:
        return cls(**d)
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def corpus_hash(series_list) -> str:
    h = hashlib.sha256()
    for s in series_list:
        h.update(s.participant.encode())
        h.update(np.ascontiguousarray(s.values).tobytes())
        h.update(np.ascontiguousarray(s.labels).tobytes())
    return h.hexdigest()


def materialize(cfg: ExperimentConfig):
    if cfg.csv_dir is not None:
        paths = sorted(Path(cfg.csv_dir).glob("*.csv"))
        if not paths:
            raise ConfigurationError(f"dataset.csv_dir: no CSV files in {cfg.csv_dir}")
        return [load_csv(p) for p in paths]
    return generate(cfg.synth, cfg.participants)


def variant_tag(upsample: bool, normalization: str) -> str:
    return f"{'up' if upsample else 'raw'}-{normalization}"


@dataclass
class ResultRow:
    model: str
    upsample: bool
    normalization: str
    mean: dict
    best: bool = False


def _pct(v):
    return "" if v is None else f"{100.0 * v:.2f}"


def emit_report(rows: List[ResultRow]):
    """Aggregate CSV text plus a fixed-width table; rows sharing the top accuracy are marked best."""
    if not rows:
        raise ConfigurationError("emit_report needs at least one row")
    # compare on the rendered value so ties are ties at the printed precision
    accs = [_pct(r.mean.get("acc")) for r in rows]
    top = max((float(a) for a in accs if a), default=None)
    for r, a in zip(rows, accs):
        r.best = top is not None and a != "" and float(a) == top
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    table = []
    for r in rows:
        rec = [r.model, str(r.upsample).lower(), r.normalization, _pct(r.mean.get("acc")),
               _pct(r.mean.get("auc")), _pct(r.mean.get("f1_0")), _pct(r.mean.get("f1_1")),
               "*" if r.best else ""]
        writer.writerow(rec)
        table.append(rec)
    widths = [max(len(h), *(len(t[i]) for t in table)) for i, h in enumerate(CSV_COLUMNS)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(CSV_COLUMNS, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(t, widths)) for t in table]
    return buf.getvalue(), "\n".join(line.rstrip() for line in lines) + "\n"


def _write_curves(path: Path, run: RunReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for i, (tl, vl, lr) in enumerate(zip(run.train_loss, run.val_loss, run.lr)):
            w.writerow([i, repr(tl), repr(vl), repr(lr)])


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> Dict[str, object]:
    """Run every (variant, model, replicate) and write the result files.

    Returns a dict with the corpus hash, the ``ResultRow`` list and the
    aggregate CSV text.
    """
    out = Path(out_dir or cfg.out or "results")
    for sub in ("reports", "curves", "checkpoints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    series = materialize(cfg)
    data_hash = corpus_hash(series)
    channels = series[0].channels
    deep = [m for m in cfg.models if m != ROCKET]
    specs = {m: cfg.spec(m, channels) for m in deep}
    logger.info("corpus %s: %d series, %d channels", data_hash[:12], len(series), channels)

    splits = {}
    for up, norm in cfg.variants():
        for n in sorted({s.steps for s in specs.values()} | ({1} if ROCKET in cfg.models else set())):
            pcfg = PipelineConfig(window=cfg.window, steps=n, normalization=norm, upsample=up,
                                  seed=cfg.split_seed, split=cfg.split)
            splits[(up, norm, n)] = build_splits(series, pcfg)

    seeds = [cfg.train.seed + r for r in range(cfg.train.replicates)]
    tasks = [(v, m, s) for v in cfg.variants() for m in cfg.models for s in seeds]

    def run_task(task):
        (up, norm), name, seed = task
        tag = f"{name}__{variant_tag(up, norm)}"
        try:
            if name == ROCKET:
                sp = splits[(up, norm, 1)]
                metrics, _ = rocket_classify(sp.train, sp.test, cfg.rocket_kernels, seed)
                return RunReport(name, seed, data_hash, test=metrics)
            spec = specs[name]
            _, rep = train(spec, splits[(up, norm, spec.steps)], replace(cfg.train, seed=seed),
                           checkpoint=str(out / "checkpoints" / f"{tag}__seed{seed}"),
                           dataset_hash=data_hash)
            return rep
        except WeakTSError as exc:
            raise ExperimentError(name, exc) from exc
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            raise ExperimentError(name, exc) from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(run_task, tasks))
    else:
        runs = [run_task(t) for t in tasks]

    rows = []
    by_key: Dict[tuple, List[RunReport]] = {}
    for (variant, name, _), run in zip(tasks, runs):
        by_key.setdefault((variant, name), []).append(run)
    for (variant, name), reps in by_key.items():
        up, norm = variant
        tag = f"{name}__{variant_tag(up, norm)}"
        report = ReplicateReport(name, data_hash, reps, aggregate(reps))
        doc = report.to_dict()
        doc["upsample"], doc["normalization"] = up, norm
        (out / "reports" / f"{tag}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        for r in reps:
            if r.train_loss:
                _write_curves(out / "curves" / f"{tag}__seed{r.seed}.csv", r)
        rows.append(ResultRow(name, up, norm, report.mean))

    csv_text, table = emit_report(rows)
    (out / "aggregate.csv").write_text(csv_text)
    (out / "aggregate.txt").write_text(table)
    return {"dataset_hash": data_hash, "rows": rows, "csv": csv_text, "table": table}


def env_seed() -> Optional[int]:
    raw = os.environ.get("WEAKTS_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"WEAKTS_SEED must be an integer, got {raw!r}") from exc
