"""Serving-time evaluation: per-client streaming protocol with a FIFO history
pool of unlabeled features, and calibration of the cold-start fallback.

A client that has not yet accumulated enough history for the calibration
module to beat the raw classifier is served by the raw classifier; the
crossover pool size is picked on validation data and travels with the
checkpoint.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import ClientSet
from .errors import ConfigError
from .model import AttentionWindow, IciiaConfig, IciiaParams, iciia_forward


@dataclass
class EvalReport:
    """Accuracy of one evaluation condition.

    ``overall_accuracy`` is the sample-weighted mean of the per-client
    accuracies (clients without records are excluded, not counted as 0).
    """

    overall_accuracy: float
    per_client: dict[str, float]
    num_records: int
    condition: dict = field(default_factory=dict)
    runtime_seconds: float = 0.0


def classifier_logits(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def pooled_accuracy(client_set: ClientSet, w: np.ndarray, b: np.ndarray) -> float:
    """Plain per-record accuracy of the linear classifier, no calibration."""
    x, y = client_set.stacked()
    pred = np.argmax(classifier_logits(x.astype(w.dtype), w, b), axis=1)
    return float((pred == y).mean())


def _client_streams(client_set: ClientSet, seed: int):
    """Yield (client_id, records, visit order) with per-client child seeds."""
    ids = client_set.client_ids()
    children = np.random.SeedSequence(seed).spawn(len(ids))
    for cid, child in zip(ids, children):
        records = client_set.clients[cid]
        if not records:
            continue
        order = np.random.default_rng(child).permutation(len(records))
        yield cid, records, order


def evaluate(client_set: ClientSet, w: np.ndarray, b: np.ndarray,
             iciia: IciiaParams | None = None, config: IciiaConfig | None = None,
             history: int = 0, seed: int = 0, ablation: str = "none",
             condition: dict | None = None, min_history_for_module: int = 1) -> EvalReport:
    """Stream each client's records in a seeded random order and classify each
    target with a window of itself plus its most recent unlabeled history.

    A target whose available history is shorter than ``min_history_for_module``
    falls back to the raw classifier (backbone-equivalent behavior), so with
    the default threshold 1, ``history`` = 0 reproduces the baseline. Pass 0
    to disable the fallback and run a pure self-attention window of size 1
    even without history. With ``iciia`` None the raw classifier is always
    applied (original-backbone path).
    """
    start = time.perf_counter()
    if iciia is not None:
        if config is None:
            raise ConfigError("evaluate: iciia params given without their config")
        if history > config.max_history:
            raise ConfigError(f"history {history} exceeds the pool capacity "
                              f"{config.max_history}")
    if history < 0:
        raise ConfigError(f"history must be >= 0, got {history}")

    per_client: dict[str, float] = {}
    correct_total = 0
    n_total = 0
    for cid, records, order in _client_streams(client_set, seed):
        pool: list[np.ndarray] = []
        correct = 0
        for i in order:
            rec = records[i]
            feats = pool[-history:] + [rec.features] if history > 0 else [rec.features]
            if iciia is None or len(feats) - 1 < min_history_for_module:
                logits = classifier_logits(rec.features[None, :].astype(w.dtype), w, b)
            else:
                window = AttentionWindow(features=np.stack(feats))
                out, _, _ = iciia_forward(window, iciia, config, ablation=ablation)
                logits = classifier_logits(out[-1:].astype(w.dtype), w, b)
            correct += int(int(np.argmax(logits[0])) == rec.label)
            pool.append(rec.features)
            if config is not None and len(pool) > config.max_history:
                pool.pop(0)
        per_client[cid] = correct / len(records)
        correct_total += correct
        n_total += len(records)

    cond = dict(condition or {})
    cond.setdefault("history", history)
    cond.setdefault("seed", seed)
    cond.setdefault("ablation", ablation)
    return EvalReport(
        overall_accuracy=correct_total / n_total if n_total else 0.0,
        per_client=per_client,
        num_records=n_total,
        condition=cond,
        runtime_seconds=time.perf_counter() - start,
    )


def fallback_buckets(client_set: ClientSet, w: np.ndarray, b: np.ndarray,
                     iciia: IciiaParams, config: IciiaConfig, history: int,
                     seed: int = 0, ablation: str = "none"):
    """Stream like :func:`evaluate` and tally, per available-history size s,
    the record count and the correct counts of the module and of the raw
    classifier. Returns (counts, module_correct, baseline_correct), each of
    length history+1."""
    if history > config.max_history:
        raise ConfigError(f"history {history} exceeds the pool capacity "
                          f"{config.max_history}")
    counts = np.zeros(history + 1, dtype=np.int64)
    module_ok = np.zeros(history + 1, dtype=np.int64)
    baseline_ok = np.zeros(history + 1, dtype=np.int64)
    for cid, records, order in _client_streams(client_set, seed):
        pool: list[np.ndarray] = []
        for i in order:
            rec = records[i]
            feats = pool[-history:] + [rec.features] if history > 0 else [rec.features]
            s = len(feats) - 1
            window = AttentionWindow(features=np.stack(feats))
            out, _, _ = iciia_forward(window, iciia, config, ablation=ablation)
            module_pred = int(np.argmax(classifier_logits(out[-1:].astype(w.dtype),
                                                          w, b)[0]))
            base_pred = int(np.argmax(classifier_logits(
                rec.features[None, :].astype(w.dtype), w, b)[0]))
            counts[s] += 1
            module_ok[s] += int(module_pred == rec.label)
            baseline_ok[s] += int(base_pred == rec.label)
            pool.append(rec.features)
            if len(pool) > config.max_history:
                pool.pop(0)
    return counts, module_ok, baseline_ok


def choose_fallback_threshold(counts: np.ndarray, module_ok: np.ndarray,
                              baseline_ok: np.ndarray) -> tuple[int, float]:
    """Pick the history size below which serving should fall back to the raw
    classifier: the threshold maximizing the expected serving accuracy over
    the observed history-size distribution (ties go to the smaller threshold).

    Thresholds range 1..len(counts): at least one history feature is required
    to engage the module, and len(counts) disengages it entirely. Returns
    (threshold, expected accuracy)."""
    total = int(counts.sum())
    if total == 0:
        return 1, 0.0
    best_t, best_acc = 1, -1.0
    for t in range(1, len(counts) + 1):
        correct = int(baseline_ok[:t].sum()) + int(module_ok[t:].sum())
        acc = correct / total
        if acc > best_acc:
            best_t, best_acc = t, acc
    return best_t, best_acc
