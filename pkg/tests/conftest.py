"""Shared test utilities: finite-difference gradient checking in float64."""

import numpy as np
import pytest

from iciia import AttentionWindow, IciiaConfig, Param, cross_entropy, iciia_forward, \
    init_params, linear

FD_H = 1e-6


def rel_error(a: np.ndarray, n: np.ndarray, zero_tol: float = 1e-6) -> float:
    """Max relative disagreement, treating a pair of vanishing tensors as equal.

    Some gradients are exactly zero by construction (e.g. the key-projection
    bias: a constant shift of every key moves all scores of a row equally and
    softmax is shift-invariant), so finite differences return pure roundoff
    there; both sides below zero_tol counts as agreement.
    """
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    sa = float(np.abs(a).max()) if a.size else 0.0
    sn = float(np.abs(n).max()) if n.size else 0.0
    if sa < zero_tol and sn < zero_tol:
        return 0.0
    return float(np.abs(a - n).max() / max(sa, sn))


def numeric_grad(loss_fn, arr: np.ndarray, h: float = FD_H) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every entry of arr."""
    num = np.zeros_like(arr)
    flat = arr.ravel()
    nflat = num.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        nflat[i] = (lp - lm) / (2.0 * h)
    return num


def check_param_grads(loss_and_backward, params: list[Param], tol: float,
                      h: float = FD_H) -> float:
    """Run loss_and_backward once (accumulating grads), then compare every
    parameter gradient against central differences. Returns the worst error."""
    for p in params:
        p.zero_grad()
    loss_and_backward()
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: loss_and_backward(grad=False), p.value, h)
        worst = max(worst, rel_error(p.grad, num))
    assert worst < tol, f"gradient mismatch: worst rel error {worst:.3e} >= {tol}"
    return worst


def model_loss(params, w, b, window, labels, cfg, ablation="none", grad=True):
    """Cross-entropy of classifier(module(window)); backward when grad=True."""
    out, bwd_model, _ = iciia_forward(window, params, cfg, ablation=ablation)
    logits, bwd_cls = linear(out, w, b)
    loss, dlogits = cross_entropy(logits, labels)
    if grad:
        bwd_model(bwd_cls(dlogits))
    return loss


def make_model_case(cfg: IciiaConfig, batch: int, num_classes: int = 7, seed: int = 0,
                    valid=None):
    """Random float64 window + labels + classifier + params for gradient checks."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    x = rng.normal(size=(batch, cfg.feature_dim))
    labels = rng.integers(0, num_classes, size=batch)
    w = Param(rng.normal(size=(cfg.feature_dim, num_classes)) * 0.3)
    b = Param(rng.normal(size=(1, num_classes)) * 0.1)
    window = AttentionWindow(features=x, valid=valid)
    return params, w, b, window, labels


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small by-client dataset reused by trainer/harness tests."""
    from iciia import SyntheticSpec, generate

    spec = SyntheticSpec(num_classes=20, num_parent_categories=4, feature_dim=16,
                         clients_train=12, clients_val=6, clients_test=6,
                         samples_per_client=12, min_classes_per_client=2,
                         max_classes_per_client=4, noise_sigma=0.3, seed=5)
    train, val, test, protos = generate(spec)
    return spec, train, val, test, protos


@pytest.fixture(scope="session")
def tiny_within_dataset():
    """Small within-client dataset for fine-tuning paths."""
    from iciia import SyntheticSpec, generate

    spec = SyntheticSpec(num_classes=20, num_parent_categories=4, feature_dim=16,
                         clients_train=10, clients_val=10, clients_test=10,
                         samples_per_client=14, val_samples_per_client=6,
                         test_samples_per_client=6, min_classes_per_client=2,
                         max_classes_per_client=4, noise_sigma=0.3, seed=6,
                         split_mode="within-client")
    train, val, test, protos = generate(spec)
    return spec, train, val, test, protos
