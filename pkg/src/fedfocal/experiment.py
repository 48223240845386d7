"""Experiment orchestration: dataset assembly, run execution, artifact
export, post-hoc analysis, and the preset sweeps mirroring the published
ablations (loss comparison, distribution vectors, learning-rate and
batch-size sweeps).

A completed run directory holds:

* ``config.echo``        the fully resolved configuration
* ``partition.manifest`` one `index<TAB>assignment` line per sample
* ``imbalance.report``   client skew and class rarity coefficients
* ``rounds.jsonl``       one JSON record per communication round
* ``metrics.csv``        per-round scalar metrics and group gradient norms
* ``final.ckpt``         the final global parameters
* ``summary.txt``        final-round metrics at a glance
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import federation as F
from . import metrics as ME
from .config import ExperimentConfig
from .data import BlobSpec, DatasetBundle, TileSpec, load_dataset, synthesize_longtail
from .errors import ConfigError, IngestionError
from .imbalance import ImbalanceReport
from .models import MlpClassifier, ViTClassifier, load_params, save_params
from .partition import build_partition, write_manifest
from .tensor import DTYPES, save_array

CSV_COLUMNS = ("round", "accuracy", "macro_f1", "macro_precision", "macro_recall",
               "macro_specificity", "macro_auc", "tail_grad_norm",
               "head_grad_norm", "gamma", "train_loss")


def assemble_dataset(cfg: ExperimentConfig) -> DatasetBundle:
    if cfg["dataset.path"]:
        return load_dataset(cfg["dataset.path"])
    if cfg["dataset.synth.kind"] == "blobs":
        spec = BlobSpec(dim=cfg["dataset.synth.dim"],
                        radius=cfg["dataset.synth.radius"],
                        sigma=cfg["dataset.synth.sigma"])
    else:
        spec = TileSpec(image_size=cfg["dataset.synth.image_size"],
                        channels=cfg["dataset.synth.channels"],
                        noise=cfg["dataset.synth.noise"])
    return synthesize_longtail(cfg["dataset.synth.counts"], spec,
                               seed=cfg["dataset.synth.seed"])


def build_model(cfg: ExperimentConfig, bundle: DatasetBundle):
    dtype = DTYPES[cfg["run.dtype"]]
    if cfg["run.model"] == "vit":
        if not bundle.is_images:
            raise ConfigError("the vit model needs [N, C, H, W] image features")
        vit = cfg.vit_config(bundle.num_classes)
        shape = bundle.features.shape[1:]
        if shape != (vit.channels, vit.image_size, vit.image_size):
            raise ConfigError(f"dataset images {shape} do not match the vit config "
                              f"({vit.channels}, {vit.image_size}, {vit.image_size})")
        return ViTClassifier(vit, dtype=dtype)
    input_dim = int(np.prod(bundle.features.shape[1:]))
    return MlpClassifier(cfg.mlp_config(input_dim, bundle.num_classes), dtype=dtype)


def model_features(cfg: ExperimentConfig, bundle: DatasetBundle) -> np.ndarray:
    """Images are flattened for the MLP; the ViT consumes them as is."""
    if cfg["run.model"] == "mlp" and bundle.is_images:
        return bundle.features.reshape(bundle.num_samples, -1)
    return bundle.features


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def metrics_csv_text(records: list[F.RoundRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for rec in records:
        m = rec.metrics
        row = (rec.round_index, m.accuracy, m.macro_f1, m.macro_precision,
               m.macro_recall, m.macro_specificity, m.macro_auc,
               rec.tail_grad_norm, rec.head_grad_norm, rec.gamma, rec.train_loss)
        lines.append(",".join(_csv_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def round_record_json(rec: F.RoundRecord) -> dict:
    return {
        "round": rec.round_index,
        "selected": rec.selected,
        "client_coeffs": {str(k): v for k, v in rec.client_coeffs.items()},
        "weights": {str(k): v for k, v in rec.weights.items()},
        "metrics": {
            "accuracy": rec.metrics.accuracy,
            "macro_precision": rec.metrics.macro_precision,
            "macro_recall": rec.metrics.macro_recall,
            "macro_f1": rec.metrics.macro_f1,
            "macro_specificity": rec.metrics.macro_specificity,
            "macro_auc": rec.metrics.macro_auc,
            "per_class": rec.metrics.per_class,
            "flags": rec.metrics.flags,
        },
        "per_class_grad_norms": rec.per_class_grad_norms,
        "tail_grad_norm": rec.tail_grad_norm,
        "head_grad_norm": rec.head_grad_norm,
        "gamma": rec.gamma,
        "train_loss": rec.train_loss,
        "warnings": rec.warnings,
    }


def run_experiment(cfg: ExperimentConfig, out_dir) -> F.FederationRun:
    """Execute one configured run and write all artifacts into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = assemble_dataset(cfg)
    model = build_model(cfg, bundle)
    features = model_features(cfg, bundle)
    working = DatasetBundle(features, bundle.labels, bundle.class_names)
    loss_cfg = cfg.loss_config()
    fed_cfg = cfg.federation_config()

    (out / "config.echo").write_text(cfg.to_text(), encoding="ascii")

    if cfg["run.mode"] == "centralized":
        run = F.run_centralized(working, model, loss_cfg, fed_cfg,
                                val_fraction=cfg["partition.test_fraction"])
        spec = None
    else:
        spec = cfg.partition_spec()
        part = build_partition(working.labels, spec, working.num_classes)
        write_manifest(out / "partition.manifest", part)
        run = F.run_federation(working, part, model, loss_cfg, fed_cfg)

    last = run.records[-1]
    report = ImbalanceReport(
        client_coeffs=[last.client_coeffs[k] for k in sorted(last.client_coeffs)],
        class_coeffs=list(run.class_coeffs),
        epsilon=loss_cfg.epsilon, blend=loss_cfg.blend)
    (out / "imbalance.report").write_text(report.to_text(), encoding="ascii")

    with open(out / "rounds.jsonl", "w", encoding="ascii") as fh:
        for rec in run.records:
            fh.write(json.dumps(round_record_json(rec), sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(metrics_csv_text(run.records), encoding="ascii")
    save_params(out / "final.ckpt", run.params)

    summary = [
        f"name = {cfg['run.name']}",
        f"mode = {cfg['run.mode']}",
        f"model = {cfg['run.model']}",
        f"loss = {cfg['loss.kind']}",
        f"rounds = {len(run.records)}",
        f"final_accuracy = {last.metrics.accuracy!r}",
        f"final_macro_f1 = {last.metrics.macro_f1!r}",
        f"final_macro_auc = {last.metrics.macro_auc!r}",
        f"tail_classes = {','.join(str(c) for c in run.tail_classes)}",
        f"head_classes = {','.join(str(c) for c in run.head_classes)}",
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n", encoding="ascii")
    return run


# ---------------------------------------------------------------------------
# presets


def preset_config(name: str, seed: int = 0) -> ExperimentConfig:
    """Named starting configurations; `smoke` is the desk-scale reference."""
    base = ExperimentConfig({
        "run.name": name,
        "dataset.synth.counts": (1000, 400, 200, 60, 20),
        "dataset.synth.dim": 8,
        "dataset.synth.radius": 2.3,
        "dataset.synth.sigma": 1.0,
        "partition.mode": "fixed",
        "partition.ratios": (0.5, 0.3, 0.2),
        "partition.test_fraction": 0.2,
        "model.hidden_dim": 32,
        "federation.rounds": 50,
        "federation.learning_rate": 5e-3,
        "federation.batch_size": 16,
        "federation.seed": seed,
        "partition.seed": seed,
    })
    if name in ("smoke", "ablation-loss", "sweep-lr", "sweep-batch"):
        return base
    if name == "ablation-distribution":
        return base
    if name == "vit-smoke":
        return base.with_overrides({
            "run.model": "vit",
            "dataset.synth.kind": "tiles",
            "dataset.synth.counts": (60, 24, 12),
            "dataset.synth.image_size": 16,
            "model.vit.image_size": 16,
            "federation.rounds": 3,
        })
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = ("smoke", "vit-smoke", "ablation-loss", "ablation-distribution",
           "sweep-lr", "sweep-batch")


def sweep_settings(cfg: ExperimentConfig, preset: str) -> list[tuple[str, ExperimentConfig]]:
    """Expand a sweep preset into (label, config) pairs sharing the base."""
    if preset == "ablation-loss":
        return [(kind, cfg.with_overrides({"loss.kind": kind,
                                           "run.name": f"{cfg['run.name']}-{kind}"}))
                for kind in ("ce", "focal", "adaptive_focal")]
    if preset == "ablation-distribution":
        vectors = {
            "C1": (0.5, 0.3, 0.2),
            "C2": (1 / 3, 1 / 3, 1 / 3),   # published as 0.333 each, normalized
            "C3": (0.556, 0.278, 0.166),
        }
        return [(label, cfg.with_overrides({"partition.ratios": ratios,
                                            "run.name": f"{cfg['run.name']}-{label}"}))
                for label, ratios in vectors.items()]
    if preset == "sweep-lr":
        rates = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7)
        return [(f"lr={rate:.0e}",
                 cfg.with_overrides({"federation.learning_rate": rate,
                                     "run.name": f"{cfg['run.name']}-lr{rate:.0e}"}))
                for rate in rates]
    if preset == "sweep-batch":
        sizes = (4, 8, 16, 32, 64)
        return [(f"batch={size}",
                 cfg.with_overrides({"federation.batch_size": size,
                                     "run.name": f"{cfg['run.name']}-b{size}"}))
                for size in sizes]
    raise ConfigError(f"{preset!r} is not a sweep preset")


def run_sweep(cfg: ExperimentConfig, preset: str, out_dir) -> list[tuple[str, F.FederationRun]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for label, sub_cfg in sweep_settings(cfg, preset):
        sub_dir = out / label.replace("=", "-")
        results.append((label, run_experiment(sub_cfg, sub_dir)))
    lines = ["setting,accuracy,macro_f1,macro_precision,macro_recall,"
             "macro_specificity,macro_auc"]
    for label, run in results:
        m = run.records[-1].metrics
        lines.append(",".join([label] + [_csv_cell(v) for v in (
            m.accuracy, m.macro_f1, m.macro_precision, m.macro_recall,
            m.macro_specificity, m.macro_auc)]))
    (out / "comparison.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    return results


# ---------------------------------------------------------------------------
# post-hoc analysis


def _require_artifacts(run_dir: Path, names: tuple[str, ...]) -> None:
    missing = [n for n in names if not (run_dir / n).exists()]
    if missing:
        raise IngestionError(f"{run_dir} is missing run artifacts: "
                             f"{', '.join(missing)}; expected {', '.join(names)}")


def analyze(run_dir, out_dir=None) -> dict:
    """Derive decision-curve, ROC, gradient-norm, and saliency artifacts
    from a completed run directory."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir
    _require_artifacts(run_dir, ("config.echo", "rounds.jsonl", "final.ckpt"))
    cfg = ExperimentConfig.parse_text((run_dir / "config.echo").read_text(),
                                      source=str(run_dir / "config.echo"))
    bundle = assemble_dataset(cfg)
    model = build_model(cfg, bundle)
    features = model_features(cfg, bundle)
    working = DatasetBundle(features, bundle.labels, bundle.class_names)
    params = load_params(run_dir / "final.ckpt")

    if cfg["run.mode"] == "centralized":
        from .partition import PartitionSpec
        spec = PartitionSpec(mode="fixed", ratios=(1.0,), num_clients=1,
                             test_fraction=cfg["partition.test_fraction"],
                             seed=cfg["federation.seed"])
    else:
        spec = cfg.partition_spec()
    part = build_partition(working.labels, spec, working.num_classes)
    test_idx = list(part.test_indices)
    test_x, test_y = working.features[test_idx], working.labels[test_idx]
    scores = F.eval_scores(model, params, test_x)

    # decision curve: one row per (model, threshold)
    table = ME.decision_curve(scores, test_y, cfg["dca.thresholds"])
    dca_lines = ["model,threshold,macro_net_benefit" +
                 "".join(f",class_{i}" for i in range(working.num_classes))]
    for k, t in enumerate(table["thresholds"]):
        cells = [cfg["run.name"], _csv_cell(t), _csv_cell(table["macro"][k])]
        cells += [_csv_cell(table["per_class"][i][k])
                  for i in range(working.num_classes)]
        dca_lines.append(",".join(cells))
    (out / "dca.csv").write_text("\n".join(dca_lines) + "\n", encoding="ascii")

    # ROC point lists per class
    _, detail = ME.auc_ovr(scores, test_y)
    roc_lines = ["class,fpr,tpr"]
    for i, points in enumerate(detail["roc"]):
        for fpr, tpr in points:
            roc_lines.append(f"{i},{fpr!r},{tpr!r}")
    (out / "roc.csv").write_text("\n".join(roc_lines) + "\n", encoding="ascii")

    # per-round head/tail gradient-norm series
    rounds = [json.loads(line) for line in
              (run_dir / "rounds.jsonl").read_text().splitlines() if line]
    grad_lines = ["round,tail_grad_norm,head_grad_norm"]
    for rec in rounds:
        grad_lines.append(f"{rec['round']},{_csv_cell(rec['tail_grad_norm'])},"
                          f"{_csv_cell(rec['head_grad_norm'])}")
    (out / "gradnorms.csv").write_text("\n".join(grad_lines) + "\n", encoding="ascii")

    # saliency rollout for the first test sample of each class (vit only)
    notes = []
    if cfg["run.model"] == "vit":
        masks = []
        picked = []
        for c in range(working.num_classes):
            hits = np.flatnonzero(test_y == c)
            if hits.size == 0:
                notes.append(f"class {c}: no test sample for rollout")
                continue
            image = bundle.features[test_idx[int(hits[0])]]
            masks.append(ME.grad_rollout_for_sample(model, params, image))
            picked.append(test_idx[int(hits[0])])
        if masks:
            save_array(out / "rollout_masks.bin", np.stack(masks))
            (out / "rollout_samples.txt").write_text(
                "\n".join(str(i) for i in picked) + "\n", encoding="ascii")
    else:
        notes.append("rollout masks need the vit model; skipped for mlp")
    if notes:
        (out / "analyze_notes.txt").write_text("\n".join(notes) + "\n",
                                               encoding="ascii")
    return {"scores": scores, "labels": test_y, "dca": table,
            "rounds": rounds, "notes": notes}
