"""Command-line entry point wiring every pipeline stage into reproducible runs.

Each command writes a resolved ``config.json`` next to its artifacts; re-running
a command from that file (or with the same flags and seed) reproduces the run
byte for byte.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiment as exp_mod
from . import hlf as hlf_mod
from . import metrics as metrics_mod
from . import mtl as mtl_mod
from . import tsne as tsne_mod
from .corpus import (
    CorpusManifest,
    EmotionLabel,
    SynthConfig,
    emotion_index,
    generate_synthetic,
    load_manifest,
    merge_records,
    read_wav,
    stratified_split,
)
from .elm import ELMConfig, elm_fit, elm_predict, load_elm, save_elm
from .features import (
    FeatureConfig,
    apply_standardizer,
    extract_features,
    fit_standardizer,
    write_feature_csv,
    write_feature_file,
)
from .mtl import LabeledFeatures, MTLNetworkConfig, TrainConfig
from .nn import one_hot
from .seeding import derive_seed


def _write_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _parse_sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer sizes: {text!r}") from None
    if not sizes or any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError(f"bad layer sizes: {text!r}")
    return sizes


def _network_config(args, defaults: MTLNetworkConfig) -> MTLNetworkConfig:
    return MTLNetworkConfig(
        trunk=args.trunk if args.trunk is not None else defaults.trunk,
        layer_sizes=args.layer_sizes if args.layer_sizes is not None else defaults.layer_sizes,
        subtask_mode=_subtask_mode(args.subtasks) if args.subtasks is not None else defaults.subtask_mode,
        subtask_weight=args.subtask_weight if args.subtask_weight is not None else defaults.subtask_weight,
    )


def _subtask_mode(flag: str) -> str:
    return {"all": "all", "gender": "gender", "naturalness": "naturalness", "none": "none"}[flag]


def _train_config(args, defaults: TrainConfig, seed: int) -> TrainConfig:
    def pick(arg_name, field_name):
        value = getattr(args, arg_name, None)
        return getattr(defaults, field_name) if value is None else value

    return TrainConfig(
        batch_size=pick("batch_size", "batch_size"),
        lr=pick("lr", "lr"),
        dropout_p=pick("dropout", "dropout_p"),
        max_epochs=pick("max_epochs", "max_epochs"),
        patience=pick("patience", "patience"),
        seed=seed,
        lstm_chunk_frames=pick("chunk_frames", "lstm_chunk_frames"),
        dnn_window_stride=pick("window_stride", "dnn_window_stride"),
        clip_norm=defaults.clip_norm,
    )


def _add_network_flags(sub):
    sub.add_argument("--trunk", choices=("dnn", "lstm"), default=None)
    sub.add_argument("--subtasks", choices=("all", "gender", "naturalness", "none"), default=None)
    sub.add_argument("--layer-sizes", type=_parse_sizes, dest="layer_sizes", default=None,
                     metavar="N,N[,N]", help="trunk layer widths, e.g. 256,256")
    sub.add_argument("--subtask-weight", type=float, dest="subtask_weight", default=None)


def _add_training_flags(sub):
    sub.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    sub.add_argument("--lr", type=float, default=None)
    sub.add_argument("--dropout", type=float, default=None)
    sub.add_argument("--max-epochs", type=int, dest="max_epochs", default=None)
    sub.add_argument("--patience", type=int, default=None)
    sub.add_argument("--chunk-frames", type=int, dest="chunk_frames", default=None)
    sub.add_argument("--window-stride", type=int, dest="window_stride", default=None)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = SynthConfig(
        n_corpora=args.corpora,
        speakers_per_corpus=args.speakers,
        utterances_per_speaker=args.utts,
        duration_s=args.duration,
        seed=args.seed,
    )
    out_dir = Path(args.out)
    manifest = generate_synthetic(config, out_dir)
    _write_config(out_dir, {
        "command": "synth",
        "n_corpora": config.n_corpora,
        "speakers_per_corpus": config.speakers_per_corpus,
        "utterances_per_speaker": config.utterances_per_speaker,
        "duration_s": config.duration_s,
        "seed": config.seed,
    })
    print(f"wrote {len(manifest)} utterances across {len(manifest.corpora())} corpora to {out_dir}")
    return 0


def cmd_features(args) -> int:
    manifest = load_manifest(args.manifest)
    feature_config = FeatureConfig()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_lines = ["utterance_id,feature_path,n_frames"]
    for rec in manifest.records:
        samples, sr = read_wav(rec.audio_path)
        matrix = extract_features(samples, sr, feature_config)
        rel = f"{rec.utterance_id}.pmtl"
        write_feature_file(out_dir / rel, matrix)
        if args.csv:
            write_feature_csv(out_dir / f"{rec.utterance_id}.csv", matrix)
        index_lines.append(f"{rec.utterance_id},{rel},{matrix.shape[0]}")
    (out_dir / "features_index.csv").write_text("\n".join(index_lines) + "\n", encoding="utf-8")
    _write_config(out_dir, {"command": "features", "manifest": str(Path(args.manifest).resolve())})
    print(f"extracted features for {len(manifest)} utterances to {out_dir}")
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    network = _network_config(args, MTLNetworkConfig())
    training = _train_config(args, TrainConfig(), args.seed)
    feature_config = FeatureConfig()

    plan = stratified_split([manifest], seed=args.seed)
    fold = plan.folds[0]
    records = merge_records([manifest])
    feats = exp_mod.extract_feature_cache(records, feature_config, manifest.sample_rate)
    labels_by_id = {r.utterance_id: exp_mod.record_labels(r) for r in records}
    standardizer = fit_standardizer([feats[uid] for uid in fold.train_ids])

    def dataset(ids):
        return [
            LabeledFeatures(uid, apply_standardizer(standardizer, feats[uid]), labels_by_id[uid])
            for uid in ids
        ]

    model = mtl_mod.build_model(network, seed=args.seed)
    trained = mtl_mod.train(model, dataset(fold.train_ids), dataset(fold.validation_ids), training)
    mtl_mod.save_model(
        out_dir / "model.ckpt",
        trained,
        extra_params={"standardizer.mean": standardizer.mean, "standardizer.std": standardizer.std},
    )
    mtl_mod.write_history_csv(out_dir / "history.csv", trained.history, network.heads)
    _write_config(out_dir, {
        "command": "train",
        "manifest": str(Path(args.manifest).resolve()),
        "network": mtl_mod.network_config_to_dict(network),
        "training": mtl_mod.train_config_to_dict(training),
        "seed": args.seed,
        "split": {"train": len(fold.train_ids), "val": len(fold.validation_ids),
                  "test": len(fold.test_ids)},
    })
    print(f"trained {network.trunk} model (best epoch {trained.best_epoch}, "
          f"val loss {trained.best_val_total:.4f}) -> {out_dir / 'model.ckpt'}")
    return 0


def _load_model_with_standardizer(path: Path):
    from .features import Standardizer

    model, header, extras = mtl_mod.load_model(path)
    if "standardizer.mean" not in extras or "standardizer.std" not in extras:
        raise ValueError(f"checkpoint {path} carries no standardizer statistics")
    standardizer = Standardizer(mean=extras["standardizer.mean"], std=extras["standardizer.std"])
    return model, standardizer


def cmd_hlf(args) -> int:
    model, standardizer = _load_model_with_standardizer(Path(args.model))
    manifest = load_manifest(args.manifest)
    feature_config = FeatureConfig()
    rows = []
    for rec in manifest.records:
        samples, sr = read_wav(rec.audio_path)
        matrix = apply_standardizer(standardizer, extract_features(samples, sr, feature_config))
        posteriors = model.emotion_posteriors(matrix)
        rows.append((rec.utterance_id, hlf_mod.compute_hlf(posteriors, args.theta), rec))
    out_path = Path(args.out)
    hlf_mod.write_hlf_csv(out_path, rows)
    print(f"wrote {len(rows)} high-level feature vectors to {out_path}")
    return 0


def cmd_elm(args) -> int:
    ids, x, labels = hlf_mod.read_hlf_csv(args.hlf)
    y = np.array([emotion_index(EmotionLabel(v)) for v in labels["emotion"]], dtype=np.int64)
    config = ELMConfig(n_hidden=args.n_hidden, ridge=args.ridge, seed=args.seed)
    model = elm_fit(x, one_hot(y, 4), config)
    out_path = Path(args.out)
    save_elm(out_path, model)
    print(f"fit ELM ({config.n_hidden} hidden units) on {len(ids)} utterances -> {out_path}")
    if args.eval is not None:
        eval_ids, eval_x, eval_labels = hlf_mod.read_hlf_csv(args.eval)
        eval_y = np.array([emotion_index(EmotionLabel(v)) for v in eval_labels["emotion"]], dtype=np.int64)
        _, predictions = elm_predict(model, eval_x)
        cm = metrics_mod.confusion_matrix(eval_y, predictions)
        ua = metrics_mod.unweighted_accuracy(cm)
        print(f"eval UA over {len(eval_ids)} utterances: {ua:.4f}")
        print("confusion (rows true, cols predicted):")
        for row in cm:
            print("  " + " ".join(f"{v:5d}" for v in row))
    return 0


def cmd_xval(args) -> int:
    if args.config is not None:
        base = exp_mod.PipelineConfig.from_dict(
            json.loads(Path(args.config).read_text(encoding="utf-8"))["pipeline"]
        )
    else:
        base = exp_mod.PipelineConfig()
    seed = args.seed if args.seed is not None else base.seed
    network = _network_config(args, base.network)
    training = _train_config(args, base.training, seed)
    config = exp_mod.PipelineConfig(
        protocol=args.protocol if args.protocol is not None else base.protocol,
        network=network,
        training=training,
        features=base.features,
        elm=base.elm,
        hlf_theta=base.hlf_theta,
        seed=seed,
        group_key=args.group_key if args.group_key is not None else base.group_key,
    )
    manifests = [load_manifest(path) for path in args.manifest]
    if config.protocol == "within" and args.corpus is not None:
        records = tuple(r for r in merge_records(manifests) if r.corpus_id == args.corpus)
        if not records:
            raise ValueError(f"no records for corpus {args.corpus!r}")
        manifests = [CorpusManifest(records=records, sample_rate=manifests[0].sample_rate)]

    out_dir = Path(args.out)
    _write_config(out_dir, {"command": "xval", "grid": bool(args.grid),
                            "jobs": args.jobs, "pipeline": config.to_dict()})
    if args.grid:
        grid = exp_mod.run_grid(manifests, config, jobs=args.jobs)
        exp_mod.write_grid_report(grid, out_dir)
        print(f"grid over {len(grid.test_groups)} folds x {len(grid.config_names)} configs -> {out_dir}")
        for name in grid.config_names:
            mean = grid.mean_ua[name]
            print(f"  {name:18s} mean UA = {'n/a' if mean is None else f'{mean:.4f}'}")
    else:
        report = exp_mod.run_experiment(manifests, config, jobs=args.jobs)
        exp_mod.write_report(report, out_dir)
        mean = "n/a" if report.mean_ua is None else f"{report.mean_ua:.4f}"
        print(f"{config.protocol} protocol, {len(report.folds)} folds, mean UA = {mean} -> {out_dir}")
        failures = [f for f in report.folds if f.error]
        for f in failures:
            print(f"  fold {f.fold} ({f.test_group}) FAILED: {f.error}", file=sys.stderr)
        if failures:
            return 1
    return 0


def cmd_embed(args) -> int:
    ids, x, labels = hlf_mod.read_hlf_csv(args.input)
    config = tsne_mod.TsneConfig(
        perplexity=args.perplexity,
        n_iter=args.iters,
        seed=args.seed,
    )
    embedding, trace = tsne_mod.tsne_embed(x, config)
    out_path = Path(args.out)
    tsne_mod.write_embedding_csv(out_path, ids, embedding, labels)
    if args.svg is not None:
        tsne_mod.write_embedding_svg(args.svg, embedding, labels["emotion"])
    print(f"embedded {len(ids)} points (final KL {trace[-1]:.4f}) -> {out_path}")
    return 0


def cmd_report(args) -> int:
    if args.compare is not None:
        report_a = exp_mod.report_from_dict(json.loads(Path(args.compare[0]).read_text(encoding="utf-8")))
        report_b = exp_mod.report_from_dict(json.loads(Path(args.compare[1]).read_text(encoding="utf-8")))
        result = exp_mod.compare_reports(report_a, report_b)
        print(json.dumps(result, sort_keys=True, indent=2))
        return 0
    run_dir = Path(args.run)
    grid_path = run_dir / "grid_report.json"
    report_path = run_dir / "report.json"
    if grid_path.exists():
        data = json.loads(grid_path.read_text(encoding="utf-8"))
        names = data["config_names"]
        print("test_group " + " ".join(f"{n:>18s}" for n in names))
        for group in data["test_groups"]:
            cells = []
            for name in names:
                ua = data["ua_table"][name].get(group)
                cells.append("     n/a" if ua is None else f"{ua:8.4f}")
            print(f"{group:10s} " + " ".join(f"{c:>18s}" for c in cells))
        means = ["     n/a" if data["mean_ua"][n] is None else f"{data['mean_ua'][n]:8.4f}" for n in names]
        print(f"{'mean':10s} " + " ".join(f"{c:>18s}" for c in means))
        for key, cmp_result in sorted(data.get("comparisons", {}).items()):
            print(f"{key}: {json.dumps(cmp_result, sort_keys=True)}")
        return 0
    if report_path.exists():
        data = json.loads(report_path.read_text(encoding="utf-8"))
        print(f"protocol: {data['protocol']}  seed: {data['seed']}")
        for fold in data["folds"]:
            ua = "  FAILED" if fold["ua"] is None else f"{fold['ua']:8.4f}"
            print(f"fold {fold['fold']:2d} test={fold['test_group']:12s} n={fold['n_test']:4d} UA={ua}")
        mean = data["mean_ua"]
        print(f"mean UA: {'n/a' if mean is None else f'{mean:.4f}'}")
        return 0
    raise FileNotFoundError(f"no report.json or grid_report.json under {run_dir}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sermtl",
        description="Multi-task speech emotion recognition pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic corpus set")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpora", type=int, default=2)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--utts", type=int, default=8)
    p.add_argument("--duration", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract frame features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", action="store_true", help="also write per-utterance CSVs")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one model on a stratified split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_network_flags(p)
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("hlf", help="compute high-level features with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta", type=float, default=0.2)
    p.set_defaults(func=cmd_hlf)

    p = sub.add_parser("elm", help="fit (and optionally evaluate) the ELM back-end")
    p.add_argument("--hlf", required=True, help="training HLF table (CSV)")
    p.add_argument("--out", required=True)
    p.add_argument("--eval", default=None, help="held-out HLF table to score")
    p.add_argument("--n-hidden", type=int, dest="n_hidden", default=120)
    p.add_argument("--ridge", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_elm)

    p = sub.add_parser("xval", help="run a within/cross/aggregated experiment")
    p.add_argument("--manifest", action="append", required=True,
                   help="manifest CSV (repeat for multiple groups)")
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", choices=exp_mod.PROTOCOLS, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--group-key", choices=("corpus", "corpus_naturalness"),
                   dest="group_key", default=None)
    p.add_argument("--corpus", default=None, help="restrict the within protocol to one corpus id")
    p.add_argument("--grid", action="store_true",
                   help="run all trunk x subtask configurations over the same folds")
    p.add_argument("--config", default=None, help="config.json from a previous run")
    _add_network_flags(p)
    _add_training_flags(p)
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("embed", help="t-SNE projection of an HLF table")
    p.add_argument("--input", required=True, help="HLF table (CSV)")
    p.add_argument("--out", required=True, help="output embedding CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--svg", default=None, help="also write a static SVG scatter")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("report", help="render a run's report")
    p.add_argument("--run", default=None, help="run directory containing report.json")
    p.add_argument("--compare", nargs=2, metavar=("A", "B"), default=None,
                   help="compare two report.json files (Wilcoxon over per-fold UAs)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if getattr(args, "command", None) == "report" and args.run is None and args.compare is None:
        print("error: report needs --run or --compare", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
