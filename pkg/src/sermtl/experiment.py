"""Experiment orchestration: per-fold pipeline runs (features -> standardize ->
train -> posteriors -> HLF -> ELM -> metrics), report assembly, and the
eight-configuration trunk/subtask grid."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import metrics
from .corpus import (
    CorpusManifest,
    Fold,
    FoldPlan,
    SplitMode,
    UtteranceRecord,
    emotion_index,
    gender_index,
    make_folds,
    merge_records,
    naturalness_index,
    read_wav,
    stratified_split,
)
from .elm import ELMConfig, elm_fit, elm_predict
from .features import FeatureConfig, apply_standardizer, extract_features, fit_standardizer
from .hlf import compute_hlf
from .mtl import (
    LabeledFeatures,
    MTLNetworkConfig,
    TrainConfig,
    build_model,
    emotion_posteriors,
    network_config_from_dict,
    network_config_to_dict,
    train,
    train_config_from_dict,
    train_config_to_dict,
)
from .nn import one_hot
from .seeding import derive_seed

PROTOCOLS = ("within", "cross", "aggregated")

# Table-shaped grid: STL baselines first, then the subtask variants.
GRID_CONFIGS = (
    ("dnn", "none"),
    ("lstm", "none"),
    ("dnn", "all"),
    ("lstm", "all"),
    ("dnn", "gender"),
    ("lstm", "gender"),
    ("dnn", "naturalness"),
    ("lstm", "naturalness"),
)


def grid_config_name(trunk: str, subtask_mode: str) -> str:
    return f"{trunk}-stl" if subtask_mode == "none" else f"{trunk}-{subtask_mode}"


@dataclass(frozen=True)
class PipelineConfig:
    protocol: str = "cross"
    network: MTLNetworkConfig = field(default_factory=MTLNetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    elm: ELMConfig = field(default_factory=ELMConfig)
    hlf_theta: float = 0.2
    seed: int = 0
    group_key: str = "corpus"
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol: {self.protocol!r}")

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "network": network_config_to_dict(self.network),
            "training": train_config_to_dict(self.training),
            "features": {
                "window_ms": self.features.window_ms,
                "hop_ms": self.features.hop_ms,
                "n_mfcc": self.features.n_mfcc,
                "n_mel_filters": self.features.n_mel_filters,
                "fft_size": self.features.fft_size,
                "pre_emphasis": self.features.pre_emphasis,
                "f0_min_hz": self.features.f0_min_hz,
                "f0_max_hz": self.features.f0_max_hz,
                "delta_window": self.features.delta_window,
                "voicing_threshold": self.features.voicing_threshold,
                "mel_low_hz": self.features.mel_low_hz,
                "mel_high_hz": self.features.mel_high_hz,
            },
            "elm": {
                "n_hidden": self.elm.n_hidden,
                "activation": self.elm.activation,
                "ridge": self.elm.ridge,
                "seed": self.elm.seed,
            },
            "hlf_theta": self.hlf_theta,
            "seed": self.seed,
            "group_key": self.group_key,
            "fractions": list(self.fractions),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return cls(
            protocol=data["protocol"],
            network=network_config_from_dict(data["network"]),
            training=train_config_from_dict(data["training"]),
            features=FeatureConfig(**data["features"]),
            elm=ELMConfig(**data["elm"]),
            hlf_theta=data["hlf_theta"],
            seed=data["seed"],
            group_key=data.get("group_key", "corpus"),
            fractions=tuple(data.get("fractions", (0.8, 0.1, 0.1))),
        )


@dataclass
class FoldResult:
    fold: int
    test_group: str
    n_train: int
    n_val: int
    n_test: int
    confusion: list[list[int]]
    ua: float | None
    per_class_recall: list[float | None]
    best_epoch: int
    epochs_run: int
    best_val_total: float
    history: list[dict] = field(default_factory=list)
    error: str | None = None


@dataclass
class ExperimentReport:
    protocol: str
    seed: int
    config: dict
    folds: list[FoldResult]
    mean_ua: float | None
    comparisons: list[dict] = field(default_factory=list)

    def fold_uas(self) -> list[float | None]:
        return [f.ua for f in self.folds]


def record_labels(rec: UtteranceRecord) -> dict[str, int]:
    return {
        "emotion": emotion_index(rec.emotion),
        "gender": gender_index(rec.gender),
        "naturalness": naturalness_index(rec.naturalness),
    }


def extract_feature_cache(records, feature_config: FeatureConfig,
                          sample_rate: int) -> dict[str, np.ndarray]:
    """Extract the 32-dim feature matrix once per utterance."""
    cache: dict[str, np.ndarray] = {}
    for rec in records:
        samples, sr = read_wav(rec.audio_path)
        if sr != sample_rate:
            raise ValueError(f"{rec.audio_path}: sample rate {sr} != manifest {sample_rate}")
        cache[rec.utterance_id] = extract_features(samples, sr, feature_config)
    return cache


def build_fold_plan(manifests, config: PipelineConfig) -> FoldPlan:
    if config.protocol == "within":
        return make_folds(manifests, SplitMode.LOSO, seed=config.seed)
    if config.protocol == "cross":
        return make_folds(manifests, SplitMode.LOCO, group_key=config.group_key, seed=config.seed)
    return stratified_split(manifests, config.fractions, seed=config.seed)


def _run_fold(fold_index: int, fold: Fold, labels_by_id: dict[str, dict[str, int]],
              feats: dict[str, np.ndarray], config: PipelineConfig) -> FoldResult:
    fold_seed = derive_seed(config.seed, "fold", fold_index)
    standardizer = fit_standardizer([feats[uid] for uid in fold.train_ids])

    def dataset(ids):
        return [
            LabeledFeatures(uid, apply_standardizer(standardizer, feats[uid]), labels_by_id[uid])
            for uid in ids
        ]

    model = build_model(config.network, seed=fold_seed)
    tc = replace(config.training, seed=fold_seed)
    trained = train(model, dataset(fold.train_ids), dataset(fold.validation_ids), tc)

    def hlf_matrix(ids):
        rows = [
            compute_hlf(emotion_posteriors(trained, apply_standardizer(standardizer, feats[uid])),
                        config.hlf_theta)
            for uid in ids
        ]
        return np.stack(rows)

    y_train = np.array([labels_by_id[uid]["emotion"] for uid in fold.train_ids], dtype=np.int64)
    y_test = np.array([labels_by_id[uid]["emotion"] for uid in fold.test_ids], dtype=np.int64)
    elm_cfg = replace(config.elm, seed=derive_seed(fold_seed, "elm"))
    elm_model = elm_fit(hlf_matrix(fold.train_ids), one_hot(y_train, 4), elm_cfg)
    _, predictions = elm_predict(elm_model, hlf_matrix(fold.test_ids))

    cm = metrics.confusion_matrix(y_test, predictions)
    return FoldResult(
        fold=fold_index,
        test_group=fold.test_group,
        n_train=len(fold.train_ids),
        n_val=len(fold.validation_ids),
        n_test=len(fold.test_ids),
        confusion=cm.tolist(),
        ua=metrics.unweighted_accuracy(cm),
        per_class_recall=metrics.per_class_recall(cm),
        best_epoch=trained.best_epoch,
        epochs_run=len(trained.history),
        best_val_total=trained.best_val_total,
    )


def _fold_worker(payload) -> FoldResult:
    fold_index, fold, labels_by_id, feats, config = payload
    try:
        return _run_fold(fold_index, fold, labels_by_id, feats, config)
    except Exception as exc:  # fold failure is recorded, not fatal
        return FoldResult(
            fold=fold_index,
            test_group=fold.test_group,
            n_train=len(fold.train_ids),
            n_val=len(fold.validation_ids),
            n_test=len(fold.test_ids),
            confusion=[[0] * 4 for _ in range(4)],
            ua=None,
            per_class_recall=[None] * 4,
            best_epoch=-1,
            epochs_run=0,
            best_val_total=float("nan"),
            error=f"{type(exc).__name__}: {exc}",
        )


def run_experiment(manifests, config: PipelineConfig, jobs: int = 1,
                   feature_cache: dict[str, np.ndarray] | None = None) -> ExperimentReport:
    """Run the configured protocol over the given manifests.

    Folds are independent; with ``jobs > 1`` they run in worker processes and
    the report is assembled in fold order either way, so results do not
    depend on scheduling.
    """
    if isinstance(manifests, CorpusManifest):
        manifests = [manifests]
    records = merge_records(manifests)
    plan = build_fold_plan(manifests, config)
    sample_rate = manifests[0].sample_rate
    if feature_cache is None:
        feature_cache = extract_feature_cache(records, config.features, sample_rate)
    labels_by_id = {rec.utterance_id: record_labels(rec) for rec in records}

    payloads = [
        (i, fold, labels_by_id, feature_cache, config) for i, fold in enumerate(plan.folds)
    ]
    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_worker, payloads))
    else:
        results = [_fold_worker(p) for p in payloads]
    results.sort(key=lambda r: r.fold)

    uas = [r.ua for r in results if r.ua is not None]
    return ExperimentReport(
        protocol=config.protocol,
        seed=config.seed,
        config=config.to_dict(),
        folds=results,
        mean_ua=float(np.mean(uas)) if uas else None,
    )


def compare_reports(report_a: ExperimentReport, report_b: ExperimentReport,
                    alpha: float = 0.05) -> dict:
    """Wilcoxon comparison of per-fold UAs between two runs over the same folds."""
    groups_a = [f.test_group for f in report_a.folds]
    groups_b = [f.test_group for f in report_b.folds]
    if groups_a != groups_b:
        raise ValueError("reports cover different folds")
    ua_a = [f.ua for f in report_a.folds]
    ua_b = [f.ua for f in report_b.folds]
    if any(u is None for u in ua_a + ua_b):
        raise ValueError("cannot compare reports with incomplete folds")
    try:
        result = metrics.wilcoxon_signed_rank(ua_a, ua_b, alpha=alpha)
    except ValueError as exc:
        if "all differences zero" in str(exc):
            return {"w_plus": 0.0, "w_minus": 0.0, "n": 0, "p_value": 1.0,
                    "significant": False, "method": "degenerate",
                    "note": "all differences zero"}
        raise
    return {
        "w_plus": result.w_plus,
        "w_minus": result.w_minus,
        "n": result.n,
        "p_value": result.p_value,
        "significant": result.significant,
        "method": result.method,
    }


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

def report_to_dict(report: ExperimentReport) -> dict:
    return {
        "protocol": report.protocol,
        "seed": report.seed,
        "config": report.config,
        "mean_ua": report.mean_ua,
        "folds": [
            {
                "fold": f.fold,
                "test_group": f.test_group,
                "n_train": f.n_train,
                "n_val": f.n_val,
                "n_test": f.n_test,
                "confusion": f.confusion,
                "ua": f.ua,
                "per_class_recall": f.per_class_recall,
                "best_epoch": f.best_epoch,
                "epochs_run": f.epochs_run,
                "best_val_total": None if f.best_val_total != f.best_val_total else f.best_val_total,
                "error": f.error,
            }
            for f in report.folds
        ],
    }


def report_from_dict(data: dict) -> ExperimentReport:
    folds = [
        FoldResult(
            fold=f["fold"],
            test_group=f["test_group"],
            n_train=f["n_train"],
            n_val=f["n_val"],
            n_test=f["n_test"],
            confusion=f["confusion"],
            ua=f["ua"],
            per_class_recall=f["per_class_recall"],
            best_epoch=f["best_epoch"],
            epochs_run=f["epochs_run"],
            best_val_total=float("nan") if f["best_val_total"] is None else f["best_val_total"],
            error=f.get("error"),
        )
        for f in data["folds"]
    ]
    return ExperimentReport(
        protocol=data["protocol"],
        seed=data["seed"],
        config=data["config"],
        folds=folds,
        mean_ua=data["mean_ua"],
    )


def write_report(report: ExperimentReport, out_dir: str | Path) -> Path:
    """Emit report.json, report.csv, and one confusion CSV per fold."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    emotion_names = [label.value for label in corpus_mod.EMOTION_CLASSES]
    lines = ["fold,test_group,n_test,ua," + ",".join(f"recall_{n}" for n in emotion_names)]
    for f in report.folds:
        recalls = ["" if r is None else repr(r) for r in f.per_class_recall]
        ua = "" if f.ua is None else repr(f.ua)
        lines.append(f"{f.fold},{f.test_group},{f.n_test},{ua}," + ",".join(recalls))
    (out_dir / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for f in report.folds:
        rows = [",".join(str(v) for v in row) for row in f.confusion]
        (out_dir / f"confusion_fold{f.fold}_{f.test_group.replace(':', '_')}.csv").write_text(
            "true\\pred," + ",".join(emotion_names) + "\n"
            + "\n".join(f"{emotion_names[i]},{row}" for i, row in enumerate(rows)) + "\n",
            encoding="utf-8",
        )
    return out_dir / "report.json"


# ---------------------------------------------------------------------------
# Configuration grid (trunk x subtask mode)
# ---------------------------------------------------------------------------

@dataclass
class GridReport:
    protocol: str
    seed: int
    config_names: list[str]
    test_groups: list[str]
    ua_table: dict[str, dict[str, float | None]]  # config -> test_group -> UA
    mean_ua: dict[str, float | None]
    comparisons: dict[str, dict]
    errors: dict[str, list[str]]


def run_grid(manifests, base_config: PipelineConfig, jobs: int = 1) -> GridReport:
    """Run every trunk/subtask configuration over the same folds and features."""
    if isinstance(manifests, CorpusManifest):
        manifests = [manifests]
    records = merge_records(manifests)
    feature_cache = extract_feature_cache(records, base_config.features, manifests[0].sample_rate)

    reports: dict[str, ExperimentReport] = {}
    names: list[str] = []
    for trunk, mode in GRID_CONFIGS:
        name = grid_config_name(trunk, mode)
        names.append(name)
        network = MTLNetworkConfig(
            trunk=trunk,
            layer_sizes=base_config.network.layer_sizes,
            subtask_mode=mode,
            subtask_weight=base_config.network.subtask_weight,
            n_features=base_config.network.n_features,
        )
        cfg = replace(base_config, network=network)
        reports[name] = run_experiment(manifests, cfg, jobs=jobs, feature_cache=feature_cache)

    test_groups = [f.test_group for f in reports[names[0]].folds]
    ua_table = {
        name: {f.test_group: f.ua for f in reports[name].folds} for name in names
    }
    comparisons: dict[str, dict] = {}
    for trunk in ("dnn", "lstm"):
        baseline = reports[grid_config_name(trunk, "none")]
        for mode in ("all", "gender", "naturalness"):
            name = grid_config_name(trunk, mode)
            key = f"{name} vs {grid_config_name(trunk, 'none')}"
            try:
                comparisons[key] = compare_reports(reports[name], baseline)
            except ValueError as exc:
                comparisons[key] = {"error": str(exc)}
    errors = {
        name: [f"fold {f.fold} ({f.test_group}): {f.error}" for f in reports[name].folds if f.error]
        for name in names
    }
    return GridReport(
        protocol=base_config.protocol,
        seed=base_config.seed,
        config_names=names,
        test_groups=test_groups,
        ua_table=ua_table,
        mean_ua={name: reports[name].mean_ua for name in names},
        comparisons=comparisons,
        errors={k: v for k, v in errors.items() if v},
    )


def grid_report_to_dict(grid: GridReport) -> dict:
    return {
        "protocol": grid.protocol,
        "seed": grid.seed,
        "config_names": grid.config_names,
        "test_groups": grid.test_groups,
        "ua_table": grid.ua_table,
        "mean_ua": grid.mean_ua,
        "comparisons": grid.comparisons,
        "errors": grid.errors,
    }


def write_grid_report(grid: GridReport, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "grid_report.json").write_text(
        json.dumps(grid_report_to_dict(grid), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    lines = ["test_group," + ",".join(grid.config_names)]
    for group in grid.test_groups:
        cells = []
        for name in grid.config_names:
            ua = grid.ua_table[name].get(group)
            cells.append("" if ua is None else repr(ua))
        lines.append(f"{group}," + ",".join(cells))
    mean_cells = ["" if grid.mean_ua[n] is None else repr(grid.mean_ua[n]) for n in grid.config_names]
    lines.append("mean," + ",".join(mean_cells))
    (out_dir / "grid_report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_dir / "grid_report.json"
