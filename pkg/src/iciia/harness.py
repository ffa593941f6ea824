"""Experiment drivers: history/partition/heterogeneity sweeps, ablations,
per-client fine-tuning, and CSV report emission.

Every report row is reproducible from (data seed, train seed, eval seed,
condition); CSV schemas are fixed per driver.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from .datagen import ClientSet, SyntheticSpec, generate
from .errors import ConfigError, ModeError, UsageError
from .evaluation import EvalReport, evaluate, pooled_accuracy
from .model import ABLATION_TAGS, IciiaConfig
from .trainer import Checkpoint, TrainConfig, finetune_last_layer, train_global_classifier, \
    train_iciia


def write_csv(path, header: list[str], rows: list[list]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _mean_stderr(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size <= 1:
        return float(arr.mean()) if arr.size else 0.0, 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(arr.size))


def evaluate_checkpoint(test_set: ClientSet, ckpt: Checkpoint, history: int,
                        seed: int) -> EvalReport:
    """Serving-protocol evaluation of a checkpoint (calibrated or baseline)."""
    condition = {}
    if ckpt.iciia_config is not None:
        condition = {"partitions": ckpt.iciia_config.num_partitions,
                     "layers": ckpt.iciia_config.num_layers}
    return evaluate(test_set, ckpt.classifier_w, ckpt.classifier_b, ckpt.iciia,
                    ckpt.iciia_config, history=history, seed=seed,
                    ablation=ckpt.ablation, condition=condition,
                    min_history_for_module=ckpt.min_history_for_module)


def sweep_history(test_set: ClientSet, ckpt: Checkpoint, history_values: list[int],
                  seed: int = 0, out_path=None) -> list[EvalReport]:
    """Evaluate one checkpoint at each history size; CSV schema (history, accuracy)."""
    reports = [evaluate_checkpoint(test_set, ckpt, m, seed) for m in history_values]
    if out_path is not None:
        write_csv(out_path, ["history", "accuracy"],
                  [[m, rep.overall_accuracy] for m, rep in zip(history_values, reports)])
    return reports


def sweep_partitions(train_set: ClientSet, val_set: ClientSet, test_set: ClientSet,
                     backbone: Checkpoint, partition_values: list[int],
                     layer_values: list[int], base_config: IciiaConfig,
                     train_cfg: TrainConfig, seeds: list[int], history: int = 15,
                     out_path=None) -> list[dict]:
    """Train one module per (partitions, layers, seed) from the same data and
    emit aggregated rows: partition count, "max" label at P = D, exact weight
    parameter count, mean accuracy, standard error."""
    d = base_config.feature_dim
    for p in partition_values:
        if d % p != 0:
            divisors = [q for q in range(1, d + 1) if d % q == 0]
            raise ConfigError(f"partitions {p} does not divide feature_dim {d}; "
                              f"valid values: {divisors}")
    rows = []
    for p in partition_values:
        for n in layer_values:
            cfg = replace(base_config, num_partitions=p, num_layers=n)
            accs = []
            for seed in seeds:
                ckpt = train_iciia(train_set, val_set, backbone, cfg,
                                   replace(train_cfg, seed=seed))
                accs.append(evaluate_checkpoint(test_set, ckpt, history,
                                                seed).overall_accuracy)
            mean, stderr = _mean_stderr(accs)
            weights = 6 * d * d * n // p
            rows.append({"partitions": p, "label": "max" if p == d else str(p),
                         "layers": n, "param_weights": weights,
                         "accuracy_mean": mean, "accuracy_stderr": stderr,
                         "n_seeds": len(seeds)})
    if out_path is not None:
        write_csv(out_path,
                  ["partitions", "label", "layers", "param_weights",
                   "accuracy_mean", "accuracy_stderr", "n_seeds"],
                  [[r["partitions"], r["label"], r["layers"], r["param_weights"],
                    r["accuracy_mean"], r["accuracy_stderr"], r["n_seeds"]] for r in rows])
    return rows


def finetune_clients(train_set: ClientSet, val_set: ClientSet, backbone: Checkpoint,
                     cfg: TrainConfig) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Fine-tune the classifier per client. Only valid when the split keeps the
    same clients across roles; by-client splits have no client overlap to adapt."""
    if train_set.split_mode != "within-client":
        raise ModeError("last-layer fine-tuning requires the within-client split; "
                        "by-client test users never appear in training data")
    out = {}
    for cid in train_set.client_ids():
        val_records = val_set.clients.get(cid) if val_set is not None else None
        out[cid] = finetune_last_layer(train_set.clients[cid], backbone, cfg, val_records)
    return out


def finetune_accuracy(test_set: ClientSet,
                      per_client: dict[str, tuple[np.ndarray, np.ndarray]],
                      backbone: Checkpoint) -> float:
    """Record-weighted accuracy using each client's own classifier (global
    classifier for clients that were never fine-tuned)."""
    correct = total = 0
    for cid in test_set.client_ids():
        records = test_set.clients[cid]
        if not records:
            continue
        w, b = per_client.get(cid, (backbone.classifier_w, backbone.classifier_b))
        x = np.stack([r.features for r in records]).astype(np.float32)
        y = np.asarray([r.label for r in records])
        pred = np.argmax(x @ w + b, axis=1)
        correct += int((pred == y).sum())
        total += len(records)
    return correct / total if total else 0.0


def sweep_heterogeneity(spec_template: SyntheticSpec, rho_values: list[float],
                        iciia_cfg: IciiaConfig, train_cfg: TrainConfig,
                        seeds: list[int], history: int = 15,
                        out_path=None) -> list[dict]:
    """Regenerate the dataset per heterogeneity level (fixed data seed), train
    the baseline classifier, the calibration module, and per-client fine-tuning,
    and emit (rho, method, accuracy) aggregates.

    Uses the within-client split so fine-tuning is applicable.
    """
    rows = []
    for rho in rho_values:
        spec = replace(spec_template, heterogeneity_ratio=rho, split_mode="within-client")
        train_set, val_set, test_set, _ = generate(spec)
        per_method: dict[str, list[float]] = {"original": [], "iciia": [], "finetune": []}
        for seed in seeds:
            cfg_seed = replace(train_cfg, seed=seed)
            backbone = train_global_classifier(train_set, val_set, spec.num_classes, cfg_seed)
            per_method["original"].append(
                pooled_accuracy(test_set, backbone.classifier_w, backbone.classifier_b))
            ckpt = train_iciia(train_set, val_set, backbone, iciia_cfg, cfg_seed)
            per_method["iciia"].append(
                evaluate_checkpoint(test_set, ckpt, history, seed).overall_accuracy)
            tuned = finetune_clients(train_set, val_set, backbone, cfg_seed)
            per_method["finetune"].append(finetune_accuracy(test_set, tuned, backbone))
        for method, accs in per_method.items():
            mean, stderr = _mean_stderr(accs)
            rows.append({"rho": rho, "method": method, "accuracy_mean": mean,
                         "accuracy_stderr": stderr, "n_seeds": len(seeds)})
    if out_path is not None:
        write_csv(out_path, ["rho", "method", "accuracy_mean", "accuracy_stderr", "n_seeds"],
                  [[r["rho"], r["method"], r["accuracy_mean"], r["accuracy_stderr"],
                    r["n_seeds"]] for r in rows])
    return rows


def run_ablations(train_set: ClientSet, val_set: ClientSet, test_set: ClientSet,
                  backbone: Checkpoint, iciia_cfg: IciiaConfig, train_cfg: TrainConfig,
                  tags: list[str], seeds: list[int], history: int = 15,
                  out_path=None) -> list[dict]:
    """Train one module per tag from identical seeds and report accuracy deltas
    against the untagged model."""
    for tag in tags:
        if tag not in ABLATION_TAGS:
            raise UsageError(f"unknown ablation tag {tag!r}; expected one of {ABLATION_TAGS}")
    per_tag_accs: dict[str, list[float]] = {tag: [] for tag in tags}
    reference: list[float] = []
    for seed in seeds:
        cfg_seed = replace(train_cfg, seed=seed)
        base_ckpt = train_iciia(train_set, val_set, backbone, iciia_cfg, cfg_seed)
        base_acc = evaluate_checkpoint(test_set, base_ckpt, history, seed).overall_accuracy
        reference.append(base_acc)
        for tag in tags:
            if tag == "none":
                per_tag_accs[tag].append(base_acc)
                continue
            cfg_tag = iciia_cfg if tag != "no_partition" \
                else replace(iciia_cfg, num_partitions=1)
            ablation = tag if tag != "no_partition" else "none"
            ckpt = train_iciia(train_set, val_set, backbone, cfg_tag, cfg_seed,
                               ablation=ablation)
            per_tag_accs[tag].append(
                evaluate_checkpoint(test_set, ckpt, history, seed).overall_accuracy)
    rows = []
    for tag in tags:
        deltas = [a - r for a, r in zip(per_tag_accs[tag], reference)]
        acc_mean, acc_stderr = _mean_stderr(per_tag_accs[tag])
        delta_mean, _ = _mean_stderr(deltas)
        rows.append({"tag": tag, "accuracy_mean": acc_mean, "accuracy_stderr": acc_stderr,
                     "delta_mean": delta_mean, "n_seeds": len(seeds)})
    if out_path is not None:
        write_csv(out_path, ["tag", "accuracy_mean", "accuracy_stderr", "delta_mean",
                             "n_seeds"],
                  [[r["tag"], r["accuracy_mean"], r["accuracy_stderr"], r["delta_mean"],
                    r["n_seeds"]] for r in rows])
    return rows
