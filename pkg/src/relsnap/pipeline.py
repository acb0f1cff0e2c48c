"""End-to-end training, evaluation and benchmarking.

Modes:

* ``lightrdl``: tree teacher on full-history features, distilled MLP
  embeddings injected into snapshot graphs, GraphSAGE on the snapshots.
* ``with-pred``: as above but the teacher's scalar prediction is injected.
* ``no-time``: GraphSAGE on snapshot graphs with raw row features only.
* ``rdl-baseline``: GraphSAGE on cumulative graphs with raw row features.
"""
from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .distill import DistillConfig, DistillMlp, train_distill_mlp
from .features import FeatureConfig, build_dataset, engineer_features_batch
from .gbdt import GbdtConfig, GbdtModel, train_gbdt
from .graph import HeteroGraph, build_cumulative_graph, build_snapshot_graph
from .metrics import MetricReport, mae, rocauc
from .rgnn import (
    DISTILLED,
    RAW,
    WITH_PRED,
    GnnConfig,
    GraphSample,
    HeteroSageModel,
    TrainRun,
    infer_timed,
    injected_width,
    node_inputs,
    train_gnn,
)
from .store import BINARY, RelationalDatabase, TaskSpec, load_database, load_task, split_times
from . import synth

log = logging.getLogger(__name__)

LIGHTRDL, BASELINE, NO_TIME, WITH_PRED_MODE = "lightrdl", "rdl-baseline", "no-time", "with-pred"
MODES = (LIGHTRDL, BASELINE, NO_TIME, WITH_PRED_MODE)
NODE_INIT = {LIGHTRDL: DISTILLED, BASELINE: RAW, NO_TIME: RAW, WITH_PRED_MODE: WITH_PRED}


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class PipelineConfig:
    schema: str = "schema.json"
    data: str = "data"
    task: str = "tasks/user-churn.json"
    output: str = "out"
    mode: str = LIGHTRDL
    window: int | None = None
    split: tuple[int, int, int] = (16, 4, 4)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    repeats: int = 5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")
        if self.repeats < 3:
            raise ValueError("repeats must be >= 3")
        self.split = tuple(int(v) for v in self.split)
        self.seeds = tuple(int(s) for s in self.seeds)

    @classmethod
    def from_dict(cls, d: dict, base: str | Path | None = None) -> "PipelineConfig":
        d = dict(d)
        if base is not None:
            for key in ("schema", "data", "task", "output"):
                if key in d and not Path(d[key]).is_absolute():
                    d[key] = str(Path(base) / d[key])
        if "features" in d:
            d["features"] = FeatureConfig.from_dict(d["features"])
        for key, kind in (("gbdt", GbdtConfig), ("distill", DistillConfig), ("gnn", GnnConfig)):
            if key in d:
                d[key] = kind(**d[key])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = self.features.to_dict()
        return d


# ---------------------------------------------------------------------------
# In-memory stages


@dataclass
class Fitted:
    mode: str
    seed: int
    window: int
    times: tuple[list[int], list[int], list[int]]
    teacher: GbdtModel | None
    mlp: DistillMlp | None
    gnn: HeteroSageModel
    run: TrainRun
    timings: dict[str, float]


def default_window(task: TaskSpec, n_val: int) -> int:
    """Span of the validation split in ticks: ``n_val`` times the seed-time spacing."""
    st = task.seed_times
    spacing = int(np.median(np.diff(st))) if len(st) > 1 else task.horizon
    return max(1, n_val * spacing)


def build_graph(db: RelationalDatabase, task: TaskSpec, t: int, mode: str, window: int) -> HeteroGraph:
    if mode == BASELINE:
        return build_cumulative_graph(db, t)
    pks, _ = task.at(t)
    keep = {task.target_table: pks} if db.tables[task.target_table].defn.is_static else None
    return build_snapshot_graph(db, t, window, keep)


def injection(mode: str, features: np.ndarray, mlp: DistillMlp | None, teacher: GbdtModel | None):
    """Columns injected on target nodes from precomputed full-history features."""
    kind = NODE_INIT[mode]
    if kind == DISTILLED:
        return mlp.embed(features)
    if kind == WITH_PRED:
        return teacher.predict(features)[:, None]
    return None


def make_samples(db: RelationalDatabase, task: TaskSpec, times: Sequence[int], mode: str, window: int,
                 fe_cfg: FeatureConfig, mlp: DistillMlp | None = None,
                 teacher: GbdtModel | None = None) -> list[GraphSample]:
    out = []
    for t in times:
        g = build_graph(db, task, int(t), mode, window)
        pks, y = task.at(int(t))
        inj = None
        if NODE_INIT[mode] != RAW:
            f = engineer_features_batch(db, task.target_table, g.pks_of(task.target_table), int(t), fe_cfg)
            inj = injection(mode, f, mlp, teacher)
        h0 = node_inputs(g, task.target_table, inj)
        out.append(GraphSample(g, h0, g.local_index(task.target_table, pks), y, int(t)))
    return out


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as err:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, err) from err


def fit(db: RelationalDatabase, task: TaskSpec, cfg: PipelineConfig, mode: str | None = None,
        seed: int | None = None, teacher: GbdtModel | None = None) -> Fitted:
    """Run every stage the mode needs for one seed and return the trained pieces.

    A ``teacher`` fitted earlier on the same training split may be passed to
    skip the tree stage; its training time is then not counted.
    """
    mode = mode or cfg.mode
    seed = cfg.seeds[0] if seed is None else seed
    train_t, val_t, test_t = _stage("split", split_times, task, *cfg.split)
    window = cfg.window or default_window(task, len(val_t))
    timings = {"gbdt": 0.0, "distill": 0.0}
    mlp = None
    if NODE_INIT[mode] == RAW:
        teacher = None
    else:
        ds = _stage("features", build_dataset, db, task, train_t, cfg.features)
        if teacher is None:
            t0 = time.perf_counter()
            teacher = _stage("gbdt", train_gbdt, ds, cfg.gbdt, seed)
            timings["gbdt"] = time.perf_counter() - t0
            teacher.meta["features"] = cfg.features.to_dict()
        if NODE_INIT[mode] == DISTILLED:
            t0 = time.perf_counter()
            mlp = _stage("distill", train_distill_mlp, ds, teacher, replace(cfg.distill, seed=seed))
            timings["distill"] = time.perf_counter() - t0
    train_s = _stage("graphs", make_samples, db, task, train_t, mode, window, cfg.features, mlp, teacher)
    val_s = _stage("graphs", make_samples, db, task, val_t, mode, window, cfg.features, mlp, teacher)
    in_dims = [h.shape[1] for h in train_s[0].h0]
    gcfg = replace(cfg.gnn, seed=seed)
    model = HeteroSageModel.init(in_dims, train_s[0].graph.edge_types, task.target_table, task.task_kind,
                                 gcfg, NODE_INIT[mode])
    model.fit_normalizer([s.h0 for s in train_s])
    t0 = time.perf_counter()
    run = _stage("gnn", train_gnn, model, train_s, val_s, gcfg)
    timings["gnn"] = time.perf_counter() - t0
    timings["epoch"] = statistics.median(run.epoch_seconds)
    timings["train"] = timings["gbdt"] + timings["distill"] + timings["gnn"]
    return Fitted(mode, seed, window, (train_t, val_t, test_t), teacher, mlp, model, run, timings)


def predict_samples(fitted: Fitted, samples: Sequence[GraphSample]) -> tuple[np.ndarray, np.ndarray]:
    preds = np.concatenate([fitted.gnn.predict(s.graph, s.h0, s.targets) for s in samples])
    labels = np.concatenate([s.labels for s in samples])
    return preds, labels


def score(task_kind: str, preds: np.ndarray, labels: np.ndarray) -> tuple[str, float]:
    if task_kind == BINARY:
        return "rocauc", rocauc(preds, labels)
    return "mae", mae(preds, labels)


def test_metric(db, task, cfg: PipelineConfig, fitted: Fitted) -> float:
    samples = make_samples(db, task, fitted.times[2], fitted.mode, fitted.window, cfg.features,
                           fitted.mlp, fitted.teacher)
    preds, labels = predict_samples(fitted, samples)
    return score(task.task_kind, preds, labels)[1]


# ---------------------------------------------------------------------------
# Bundles on disk


def _load_inputs(cfg: PipelineConfig):
    db = _stage("load", load_database, cfg.schema, cfg.data)
    task = _stage("load", load_task, cfg.task, db)
    return db, task


def save_fitted(fitted: Fitted, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if fitted.teacher is not None:
        fitted.teacher.save(out / "gbdt.json")
    if fitted.mlp is not None:
        fitted.mlp.save(out / "distill.json")
    fitted.gnn.save(out / "gnn.json")
    fitted.run.to_csv(out / "trainrun.csv")


def run_train(cfg: PipelineConfig, seeds: Sequence[int] | None = None, mode: str | None = None) -> Path:
    """Train every seed and write ``<output>/config.json`` plus ``seed_<n>/`` model files."""
    if mode is not None:
        cfg = replace(cfg, mode=mode)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    cfg = replace(cfg, seeds=seeds)
    db, task = _load_inputs(cfg)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"mode": cfg.mode, "seeds": list(seeds), "timings": {}}
    for s in seeds:
        fitted = fit(db, task, cfg, seed=s)
        save_fitted(fitted, out / f"seed_{s}")
        manifest["splits"] = {"train": fitted.times[0], "val": fitted.times[1], "test": fitted.times[2]}
        manifest["window"] = fitted.window
        manifest["timings"][str(s)] = fitted.timings
        log.info("trained %s seed %d (best epoch %d)", cfg.mode, s, fitted.run.best_epoch)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_fitted(bundle: Path, seed: int, mode: str, manifest: dict) -> Fitted:
    d = bundle / f"seed_{seed}"
    if not (d / "gnn.json").exists():
        raise FileNotFoundError(f"missing model files in {d}")
    teacher = GbdtModel.load(d / "gbdt.json") if (d / "gbdt.json").exists() else None
    mlp = DistillMlp.load(d / "distill.json") if (d / "distill.json").exists() else None
    sp = manifest["splits"]
    return Fitted(mode, seed, int(manifest["window"]), (sp["train"], sp["val"], sp["test"]), teacher, mlp,
                  HeteroSageModel.load(d / "gnn.json"), TrainRun(seed=seed), {})


@dataclass
class EvalResult:
    reports: list[MetricReport]
    mean: float
    std: float

    def to_dict(self) -> dict:
        return {"reports": [asdict(r) for r in self.reports], "mean": self.mean, "std": self.std}


def run_eval(bundle: str | Path) -> EvalResult:
    """Test metrics per seed plus mean and standard deviation; writes predictions and metrics."""
    bundle = Path(bundle)
    if not (bundle / "config.json").exists():
        raise FileNotFoundError(f"no trained bundle at {bundle}")
    cfg = PipelineConfig.from_dict(json.loads((bundle / "config.json").read_text()))
    manifest = json.loads((bundle / "manifest.json").read_text())
    db, task = _load_inputs(cfg)
    reports = []
    for s in manifest["seeds"]:
        fitted = load_fitted(bundle, s, manifest["mode"], manifest)
        train_t, val_t, test_t = fitted.times
        assert not set(test_t) & (set(train_t) | set(val_t)), "test seed times overlap training data"
        samples = make_samples(db, task, test_t, fitted.mode, fitted.window, cfg.features, fitted.mlp, fitted.teacher)
        preds, labels = predict_samples(fitted, samples)
        name, value = score(task.task_kind, preds, labels)
        write_predictions(bundle / f"seed_{s}" / "predictions.csv", samples, preds, task.target_table)
        reports.append(MetricReport(name, value, len(labels), list(test_t)))
    values = [r.value for r in reports]
    res = EvalResult(reports, float(np.mean(values)), float(np.std(values)))
    (bundle / "metrics.json").write_text(json.dumps(res.to_dict(), indent=2) + "\n")
    return res


def write_predictions(path: Path, samples: Sequence[GraphSample], preds: np.ndarray, target_table: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "seed_time", "prediction", "label"])
        k = 0
        for s in samples:
            for pk, y in zip(s.graph.pks_of(target_table)[s.targets], s.labels):
                w.writerow([int(pk), s.seed_time, repr(float(preds[k])), repr(float(y))])
                k += 1


def read_predictions(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["prediction"]) for r in rows]), np.array([float(r["label"]) for r in rows])


# ---------------------------------------------------------------------------
# Benchmark


@dataclass
class ModeTiming:
    mode: str
    build_seconds: float
    train_seconds: float
    epoch_seconds: float
    embed_seconds: float
    gnn_seconds: float
    infer_seconds: float
    metric_name: str
    metric: float
    components: dict[str, float] = field(default_factory=dict)
    graph_nodes: int = 0
    graph_edges: int = 0


@dataclass
class BenchReport:
    modes: dict[str, ModeTiming]
    baseline: str
    speedups: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "modes": {k: asdict(v) for k, v in self.modes.items()},
                "speedups": self.speedups}

    def table(self) -> str:
        head = f"{'mode':<14}{'build s':>10}{'train s':>10}{'epoch s':>10}{'embed s':>10}{'gnn s':>10}" \
               f"{'infer s':>10}{'nodes':>9}{'metric':>14}"
        lines = [head, "-" * len(head)]
        for m, r in self.modes.items():
            lines.append(
                f"{m:<14}{r.build_seconds:>10.4f}{r.train_seconds:>10.3f}{r.epoch_seconds:>10.4f}"
                f"{r.embed_seconds:>10.5f}{r.gnn_seconds:>10.5f}{r.infer_seconds:>10.5f}{r.graph_nodes:>9d}"
                f"{r.metric_name + '=' + format(r.metric, '.4f'):>14}"
            )
        if self.speedups:
            lines.append("")
            lines.append(f"speedup vs {self.baseline} (baseline / candidate):")
            for m, s in self.speedups.items():
                lines.append("  " + m + ": " + ", ".join(f"{k} {v:.1f}x" for k, v in s.items()))
        return "\n".join(lines)


def _median_time(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_mode(db, task, cfg: PipelineConfig, mode: str, fitted: Fitted | None = None) -> ModeTiming:
    """Time graph construction, training and inference for one mode on the test seed times."""
    fitted = fitted or fit(db, task, cfg, mode=mode)
    test_t = fitted.times[2]
    build = embed = gnn_t = 0.0
    nodes = edges = 0
    preds, labels = [], []
    for t in test_t:
        build += _median_time(lambda: build_graph(db, task, t, mode, fitted.window), cfg.repeats)
        g = build_graph(db, task, t, mode, fitted.window)
        nodes += g.n_nodes
        edges += g.n_edges
        inj = None
        if NODE_INIT[mode] != RAW:
            f = engineer_features_batch(db, task.target_table, g.pks_of(task.target_table), t, cfg.features)
            embed += _median_time(lambda: injection(mode, f, fitted.mlp, fitted.teacher), cfg.repeats)
            inj = injection(mode, f, fitted.mlp, fitted.teacher)
        pks, y = task.at(t)
        targets = g.local_index(task.target_table, pks)
        p, secs = infer_timed(fitted.gnn, g, inj, targets, cfg.repeats)
        gnn_t += secs
        preds.append(p)
        labels.append(y)
    name, value = score(task.task_kind, np.concatenate(preds), np.concatenate(labels))
    tm = fitted.timings
    return ModeTiming(
        mode=mode,
        build_seconds=build,
        train_seconds=tm["gbdt"] + tm["distill"] + tm["gnn"],
        epoch_seconds=tm["epoch"],
        embed_seconds=embed,
        gnn_seconds=gnn_t,
        infer_seconds=embed + gnn_t,
        metric_name=name,
        metric=value,
        components={"gbdt": tm["gbdt"], "distill": tm["distill"], "gnn": tm["gnn"]},
        graph_nodes=nodes,
        graph_edges=edges,
    )


def run_bench(cfg: PipelineConfig, modes: Sequence[str] = (LIGHTRDL, BASELINE), db=None, task=None) -> BenchReport:
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    if db is None:
        db, task = _load_inputs(cfg)
    results = {m: bench_mode(db, task, cfg, m) for m in modes}
    baseline = BASELINE if BASELINE in results else modes[0]
    speedups = {}
    b = results[baseline]
    for m, r in results.items():
        if m == baseline:
            continue
        speedups[m] = {
            "inference": b.infer_seconds / r.infer_seconds,
            "training": b.train_seconds / r.train_seconds,
            "epoch": b.epoch_seconds / r.epoch_seconds,
            "build": b.build_seconds / r.build_seconds,
        }
    return BenchReport(results, baseline, speedups)


def run_synth(cfg: synth.SynthConfig, out: str | Path, overwrite: bool = False) -> Path:
    return synth.write(cfg, out, overwrite=overwrite)
