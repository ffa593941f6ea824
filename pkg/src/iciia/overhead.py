"""Analytic parameter/FLOP accounting plus an instrumented MAC counter.

Conventions (chosen so the published per-backbone overhead table reproduces):
one FLOP unit = one multiply-accumulate; bias additions, layer-norm and
softmax arithmetic are excluded. The comparison parameter figure counts
projection weights plus biases, excluding layer-norm affine terms.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import AttentionWindow, IciiaConfig, IciiaParams, iciia_forward
from .tensor_ops import MacCounter

#: final-feature width and published size/compute of common backbones,
#: used for the ratio columns of the overhead table.
BACKBONES = {
    "MobileNetV3-L": (1280, 5_500_000, 230_000_000),
    "ResNet-152": (2048, 60_000_000, 12_000_000_000),
    "EfficientNet-B4": (1792, 19_000_000, 4_600_000_000),
    "Swin-B": (1024, 88_000_000, 15_000_000_000),
    "ConvNeXt-L": (1536, 198_000_000, 34_000_000_000),
    "EfficientNet-B7": (2560, 66_000_000, 39_000_000_000),
}


@dataclass
class OverheadReport:
    feature_dim: int
    num_partitions: int
    num_layers: int
    window: int
    param_count_weights: int      # 6*D^2*N / P
    param_count_with_bias: int    # weights + 6*D*N
    param_count_total: int        # with_bias + layer-norm affine 4*D*N
    flops_per_window: int         # (6*B*D^2/P + 2*B^2*D) * N
    backbone_name: str = ""
    backbone_params: int | None = None
    backbone_flops: int | None = None

    @property
    def param_ratio(self) -> float | None:
        if not self.backbone_params:
            return None
        return self.param_count_with_bias / self.backbone_params

    @property
    def flops_ratio(self) -> float | None:
        if not self.backbone_flops:
            return None
        return self.flops_per_window / self.backbone_flops


def param_count(config: IciiaConfig) -> OverheadReport:
    """Exact parameter counts; FLOPs filled in for the config's train window."""
    d, p, n = config.feature_dim, config.num_partitions, config.num_layers
    weights = 6 * d * d * n // p
    with_bias = weights + 6 * d * n
    total = with_bias + 4 * d * n
    return OverheadReport(
        feature_dim=d, num_partitions=p, num_layers=n, window=config.train_window,
        param_count_weights=weights, param_count_with_bias=with_bias,
        param_count_total=total, flops_per_window=flops(config, config.train_window),
    )


def flops(config: IciiaConfig, window: int) -> int:
    """MACs for one window of the given size: (6*B*D^2/P + 2*B^2*D) * N."""
    d, p, n = config.feature_dim, config.num_partitions, config.num_layers
    b = int(window)
    if b < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    return (6 * b * d * d // p + 2 * b * b * d) * n


def report(config: IciiaConfig, window: int | None = None, backbone_name: str = "",
           backbone_params: int | None = None,
           backbone_flops: int | None = None) -> OverheadReport:
    """Assemble a full report, optionally with backbone ratio columns."""
    rep = param_count(config)
    if window is not None:
        rep.window = int(window)
        rep.flops_per_window = flops(config, window)
    rep.backbone_name = backbone_name
    rep.backbone_params = backbone_params
    rep.backbone_flops = backbone_flops
    return rep


def instrumented_count(window: AttentionWindow, params: IciiaParams,
                       config: IciiaConfig, ablation: str = "none") -> int:
    """MACs actually executed by a forward pass over the window.

    Projections run on all rows; attention products run only over valid
    rows, so a full window reproduces :func:`flops` exactly.
    """
    counter = MacCounter()
    iciia_forward(window, params, config, counter=counter, ablation=ablation)
    return counter.total


def backbone_table(num_layers: int = 3, window: int = 16,
                   partition_values: tuple[int, ...] = (1, 256)) -> list[OverheadReport]:
    """Reports for every known backbone at each partition count."""
    rows = []
    for name, (d, bp, bf) in BACKBONES.items():
        for p in partition_values:
            cfg = IciiaConfig(feature_dim=d, num_heads=4, num_partitions=p,
                              num_layers=num_layers, train_window=window)
            rows.append(report(cfg, window, name, bp, bf))
    return rows
