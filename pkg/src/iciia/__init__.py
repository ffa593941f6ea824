"""Intra-client inter-image attention for feature calibration.

A self-contained library + CLI: manual-backprop tensor ops, the calibration
module (partitioned projections, feature shuffling, multi-head attention),
analytic and instrumented overhead accounting, a synthetic heterogeneous-client
feature generator, training procedures, and an experiment harness.
"""

from .errors import ConfigError, FormatError, IciiaError, ModeError, ShapeError, UsageError
from .tensor_ops import MacCounter, Param, cross_entropy, layer_norm, linear, relu, \
    scaled_dot_attention, softmax_rows
from .model import ABLATION_TAGS, AttentionWindow, IciiaConfig, IciiaLayerParams, IciiaModel, \
    IciiaParams, PartitionedProjection, export_attention_scores, ffn_block, iciia_forward, \
    init_params, inverse_shuffle, mhsa_block, partitioned_project, shuffle, shuffle_index_map
from .overhead import BACKBONES, OverheadReport, backbone_table, flops, instrumented_count, \
    param_count, report
from .datagen import ClientSet, FeatureRecord, SyntheticSpec, generate, load_dataset, \
    make_labeled_windows, make_windows, read_features, write_dataset, write_features
from .evaluation import EvalReport, choose_fallback_threshold, evaluate, \
    fallback_buckets, pooled_accuracy
from .trainer import Checkpoint, Sgd, TrainConfig, finetune_last_layer, load_checkpoint, \
    save_checkpoint, train_global_classifier, train_iciia
from .harness import evaluate_checkpoint, finetune_accuracy, finetune_clients, run_ablations, \
    sweep_heterogeneity, sweep_history, sweep_partitions

__version__ = "0.1.0"
