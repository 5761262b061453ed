"""Command-line pipeline: train, generate anomalies, extract features,
detect, and report.

Artifacts are named by the resolved config digest, so every command is
idempotent: reruns with unchanged inputs reuse what is already on disk.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import attacks, data, detector, gradfeat, nn
from .config import ExperimentConfig, child_seed


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# cached pipeline stages
# ---------------------------------------------------------------------------

def make_splits(cfg: ExperimentConfig):
    if cfg.dataset_kind == "glyphs":
        ds = data.gen_glyphs(cfg.dataset_count, seed=child_seed(cfg.master_seed, "data"))
    else:
        ds = data.load_idx(cfg.idx_images, cfg.idx_labels)
        if cfg.dataset_count and cfg.dataset_count < len(ds):
            ds = ds.subset(np.arange(cfg.dataset_count))
    test_fraction = 1.0 - cfg.train_fraction - cfg.val_fraction
    return data.split(ds, (cfg.train_fraction, cfg.val_fraction, test_fraction),
                      seed=child_seed(cfg.master_seed, "split"))


def ensure_classifier(cfg: ExperimentConfig, out: Path):
    """Train (or reload) the classifier for this config digest."""
    path = out / f"classifier-{cfg.digest()}.ggate"
    if path.exists():
        return nn.load_checkpoint(path), path
    train, val, _ = make_splits(cfg)
    model = nn.build_classifier(cfg.arch_spec(), seed=child_seed(cfg.master_seed, "init"))
    model, history = nn.train_classifier(model, train, val, cfg.train_config())
    nn.save_checkpoint(model, path)
    hist_path = out / f"history-{cfg.digest()}.txt"
    with open(hist_path, "w") as fh:
        for h in history:
            fh.write(f"epoch={h['epoch']} train_loss={h['train_loss']:.6f} "
                     f"train_accuracy={h['train_accuracy']:.4f} "
                     f"val_accuracy={h['val_accuracy']:.4f}\n")
    return model, path


def _attack_sources(cfg: ExperimentConfig):
    return [f"adv-{kind}" for kind in cfg.attack_kinds]


def _ood_sources(cfg: ExperimentConfig):
    return [f"ood-{kind}" for kind in cfg.ood_kinds]


def ensure_anomalies(cfg: ExperimentConfig, model, out: Path) -> dict:
    """Generate (or reload) the clean test set, adversarial sets, and OOD
    sets; adversarial outputs pass exact budget and range gates before
    anything is written."""
    digest = cfg.digest()
    paths = {"clean-test": out / f"clean-test-{digest}.gdata"}
    for kind in cfg.attack_kinds:
        paths[f"adv-{kind}"] = out / f"adv-{kind}-{digest}.gdata"
    for kind in cfg.ood_kinds:
        paths[f"ood-{kind}"] = out / f"ood-{kind}-{digest}.gdata"
    if all(p.exists() for p in paths.values()):
        return {tag: data.load_dataset(p) for tag, p in paths.items()}

    _, _, test = make_splits(cfg)
    if cfg.attack_count and cfg.attack_count < len(test):
        test = test.subset(np.arange(cfg.attack_count))
    sets = {"clean-test": data.Dataset(test.images, test.labels, "clean-test", test.seed)}
    for kind in cfg.attack_kinds:
        acfg = cfg.attack_config(kind)
        result = attacks.run_attack(model, test.images, test.labels, acfg)
        _gate_attack(kind, result, acfg)
        tag = f"adv-{kind}"
        sets[tag] = data.Dataset(result.images, test.labels, tag, acfg.seed)
    for kind in cfg.ood_kinds:
        tag = f"ood-{kind}"
        sets[tag] = data.gen_ood(kind, cfg.ood_count,
                                 seed=child_seed(cfg.master_seed, tag),
                                 shape=test.images.shape[1:])
        sets[tag].source_tag = tag
    for tag, ds in sets.items():
        data.save_dataset(ds, paths[tag], extra_metadata={"config_digest": digest})
    return sets


def _gate_attack(kind: str, result: attacks.AttackResult, acfg) -> None:
    if result.images.min() < 0.0 or result.images.max() > 1.0:
        raise PipelineError(f"{kind}: adversarial pixels escaped [0, 1]")
    if kind in ("fgsm", "bim", "pgd", "iterll") and result.linf.max() > acfg.epsilon:
        raise PipelineError(f"{kind}: perturbation {result.linf.max()} exceeds "
                            f"epsilon {acfg.epsilon}")
    if not np.all(np.isfinite(result.images)):
        raise PipelineError(f"{kind}: non-finite adversarial pixels")


def ensure_features(cfg: ExperimentConfig, model, sets: dict, mode: str, out: Path) -> dict:
    """Extract (or reload) one feature CSV per anomaly source for a mode."""
    digest = cfg.digest()
    label = gradfeat.make_confounding_label(model.num_classes, cfg.confounding_kind,
                                            k=cfg.confounding_k,
                                            seed=child_seed(cfg.master_seed, "label"))
    features = {}
    for tag, ds in sets.items():
        path = out / f"features-{mode}-{tag}-{digest}.csv"
        if path.exists():
            features[tag] = gradfeat.load_features_csv(path)
            continue
        if mode == "gradient":
            fs = gradfeat.extract_gradient_features(model, ds.images, label, tag)
        else:
            fs = gradfeat.extract_activation_features(model, ds.images, tag)
        gradfeat.save_features_csv(fs, path)
        features[tag] = fs
    return features


def detect_and_report(cfg: ExperimentConfig, normal, anomalous, seed: int):
    """Split, train the detector, and score the held-out test part."""
    train, val, test = detector.assemble_detection_sets(normal, anomalous, seed)
    det = detector.train_detector(
        train, val, hidden=cfg.hidden, seed=seed,
        learning_rate=cfg.detector_learning_rate, batch_size=cfg.detector_batch_size,
        max_epochs=cfg.detector_epochs, patience=cfg.detector_patience)
    scored = detector.score(det, test)
    return det, scored, detector.evaluate(scored)


def msp_report(cfg: ExperimentConfig, model, clean_ds, anom_ds, seed: int):
    """Baseline scores on the same 40/40/20 test partition the detectors use."""
    def as_features(ds, tag):
        scores = detector.msp_scores(model, ds.images)
        n = len(scores)
        return gradfeat.FeatureSet(scores[:, None], np.arange(n),
                                   np.full(n, -1, dtype=np.int64), [tag] * n, ["msp"])

    normal = as_features(clean_ds, "clean-test")
    anomalous = as_features(anom_ds, anom_ds.source_tag)
    _, _, test = detector.assemble_detection_sets(normal, anomalous, seed)
    scored = detector.ScoredSamples(test.sample_ids, test.anomaly_labels,
                                    test.values[:, 0], list(test.tags))
    return scored, detector.evaluate(scored)


METHODS = ("gradient", "activation", "msp")


def run_experiment(cfg: ExperimentConfig, out: Path) -> list:
    """Full pipeline; returns MetricReport rows, one per source and method."""
    out.mkdir(parents=True, exist_ok=True)
    model, _ = ensure_classifier(cfg, out)
    sets = ensure_anomalies(cfg, model, out)
    feature_sets = {mode: ensure_features(cfg, model, sets, mode, out)
                    for mode in ("gradient", "activation")}
    digest = cfg.digest()

    rows = []
    for tag in _attack_sources(cfg) + _ood_sources(cfg):
        seed = child_seed(cfg.master_seed, f"detect:{tag}")
        for mode in ("gradient", "activation"):
            _, scored, metrics = detect_and_report(
                cfg, feature_sets[mode]["clean-test"], feature_sets[mode][tag], seed)
            detector.save_scores_csv(scored, out / f"scores-{tag}-{mode}-{digest}.csv")
            rows.append(detector.MetricReport(
                tag, mode, metrics["accuracy"], metrics["auroc"], metrics["aupr"],
                int((scored.labels == 0).sum()), int((scored.labels == 1).sum())))
        scored, metrics = msp_report(cfg, model, sets["clean-test"], sets[tag], seed)
        detector.save_scores_csv(scored, out / f"scores-{tag}-msp-{digest}.csv")
        rows.append(detector.MetricReport(
            tag, "msp", metrics["accuracy"], metrics["auroc"], metrics["aupr"],
            int((scored.labels == 0).sum()), int((scored.labels == 1).sum())))
    write_report(cfg, rows, out)
    return rows


def report_kv_text(cfg: ExperimentConfig, rows) -> str:
    lines = [f"config_digest={cfg.digest()}"]
    for r in rows:
        prefix = f"row.{r.source_tag}.{r.method}"
        lines.append(f"{prefix}.accuracy={r.accuracy:.6f}")
        lines.append(f"{prefix}.auroc={r.auroc:.6f}")
        lines.append(f"{prefix}.aupr={r.aupr:.6f}")
        lines.append(f"{prefix}.n_normal={r.n_normal}")
        lines.append(f"{prefix}.n_anomalous={r.n_anomalous}")
    return "\n".join(lines) + "\n"


def report_table_text(cfg: ExperimentConfig, rows) -> str:
    header = f"{'source':<22}{'method':<12}{'accuracy':>10}{'auroc':>10}{'aupr':>10}{'n_norm':>8}{'n_anom':>8}"
    lines = [f"config digest: {cfg.digest()}", header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.source_tag:<22}{r.method:<12}{r.accuracy:>10.4f}"
                     f"{r.auroc:>10.4f}{r.aupr:>10.4f}{r.n_normal:>8}{r.n_anomalous:>8}")
    return "\n".join(lines) + "\n"


def write_report(cfg: ExperimentConfig, rows, out: Path) -> None:
    (out / f"report-{cfg.digest()}.kv").write_text(report_kv_text(cfg, rows))
    (out / f"report-{cfg.digest()}.txt").write_text(report_table_text(cfg, rows))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["master_seed"] = args.seed
    return ExperimentConfig.from_file(args.config, overrides)


def cmd_train_classifier(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, path = ensure_classifier(cfg, out)
    print(f"checkpoint: {path}")
    print(f"val_accuracy: {model.val_accuracy}")
    return 0


def cmd_gen_anomalies(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = nn.load_checkpoint(args.checkpoint)
    sets = ensure_anomalies(cfg, model, out)
    for tag, ds in sets.items():
        print(f"{tag}: {len(ds)} samples")
    return 0


def cmd_extract_features(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mode = args.mode or cfg.feature_mode
    model = nn.load_checkpoint(args.checkpoint)
    ds = data.load_dataset(args.dataset)
    tag = ds.source_tag or Path(args.dataset).stem
    features = ensure_features(cfg, model, {tag: ds}, mode, out)
    path = out / f"features-{mode}-{tag}-{cfg.digest()}.csv"
    print(f"features: {path} ({features[tag].dim} columns, {len(features[tag])} rows)")
    return 0


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    normal = gradfeat.load_features_csv(args.normal)
    anomalous = gradfeat.load_features_csv(args.anomalous)
    if len(anomalous) == 0:
        raise PipelineError(f"anomalous feature file {args.anomalous} is empty")
    if len(normal) == 0:
        raise PipelineError(f"normal feature file {args.normal} is empty")
    tag = anomalous.tags[0] or "anomalous"
    seed = child_seed(cfg.master_seed, f"detect:{tag}")
    _, scored, metrics = detect_and_report(cfg, normal, anomalous, seed)
    scores_path = out / f"scores-{tag}-detect-{cfg.digest()}.csv"
    detector.save_scores_csv(scored, scores_path)
    rows = [detector.MetricReport(tag, "detector", metrics["accuracy"], metrics["auroc"],
                                  metrics["aupr"], int((scored.labels == 0).sum()),
                                  int((scored.labels == 1).sum()))]
    write_report(cfg, rows, out)
    print(report_table_text(cfg, rows))
    return 0


def cmd_run_experiment(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    rows = run_experiment(cfg, out)
    print(report_table_text(cfg, rows))
    print(f"report: {out / f'report-{cfg.digest()}.kv'}")
    return 0


def cmd_compare_norms(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = nn.load_checkpoint(args.checkpoint)
    datasets = [data.load_dataset(p) for p in args.datasets.split(",")]
    if any(len(ds) == 0 for ds in datasets):
        raise PipelineError("compare-norms requires nonempty datasets")
    label = gradfeat.make_confounding_label(model.num_classes, cfg.confounding_kind,
                                            k=cfg.confounding_k)
    lines = []
    for mode in ("gradient", "activation"):
        per_set = []
        for ds in datasets:
            if mode == "gradient":
                per_set.append(gradfeat.extract_gradient_features(model, ds.images, label,
                                                                  ds.source_tag))
            else:
                per_set.append(gradfeat.extract_activation_features(model, ds.images,
                                                                    ds.source_tag))
        merged = gradfeat.concat_features(per_set)
        summary = gradfeat.norm_summary(merged.values, merged.tags)
        names = per_set[0].feature_names
        for j, name in enumerate(names):
            lines.append(f"== {mode} / {name} ==")
            lines.append(f"{'source':<22}{'min':>12}{'q1':>12}{'median':>12}{'q3':>12}{'max':>12}")
            for tag, stats in summary.items():
                mn, q1, med, q3, mx = stats[j]
                lines.append(f"{tag:<22}{mn:>12.4g}{q1:>12.4g}{med:>12.4g}{q3:>12.4g}{mx:>12.4g}")
            lines.append("")
    text = "\n".join(lines)
    (out / f"norms-{cfg.digest()}.txt").write_text(text + "\n")
    print(text)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gradgate",
        description="Gradient-feature anomaly detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the INI config file")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--seed", type=int, help="override the master seed")

    common(sub.add_parser("train-classifier", help="train and checkpoint the classifier"))

    p = sub.add_parser("gen-anomalies", help="generate adversarial and OOD sets")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("extract-features", help="extract features for one dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="a .gdata file")
    p.add_argument("--mode", choices=("gradient", "activation"))

    p = sub.add_parser("detect", help="train a detector from two feature CSVs")
    common(p)
    p.add_argument("--normal", required=True)
    p.add_argument("--anomalous", required=True)

    common(sub.add_parser("run-experiment", help="run the full pipeline and report"))

    p = sub.add_parser("compare-norms", help="per-layer quartile table per source")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--datasets", required=True, help="comma-separated .gdata files")

    args = parser.parse_args(argv)
    handlers = {
        "train-classifier": cmd_train_classifier,
        "gen-anomalies": cmd_gen_anomalies,
        "extract-features": cmd_extract_features,
        "detect": cmd_detect,
        "run-experiment": cmd_run_experiment,
        "compare-norms": cmd_compare_norms,
    }
    try:
        return handlers[args.command](args)
    except Exception as exc:  # surface a one-line error and a failing exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
