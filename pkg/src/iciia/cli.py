"""Command-line interface for data generation, training, evaluation, overhead
accounting, sweeps, and ablations.

Exit code 0 on success; failures print one machine-readable JSON line to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import datagen, harness, overhead
from .errors import IciiaError
from .evaluation import pooled_accuracy
from .model import ABLATION_TAGS, IciiaConfig
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, \
    train_global_classifier, train_iciia

DTYPES = {"f32": np.float32, "f64": np.float64}


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v != ""]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v != ""]


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=sorted(DTYPES), default="f32")


def _add_iciia_flags(p: argparse.ArgumentParser):
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--partitions", type=int, default=1)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--max-history", type=int, default=63)


def _add_spec_flags(p: argparse.ArgumentParser):
    p.add_argument("--classes", type=int, default=100)
    p.add_argument("--parent-categories", type=int, default=10)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--clients-train", type=int, default=200)
    p.add_argument("--clients-val", type=int, default=50)
    p.add_argument("--clients-test", type=int, default=50)
    p.add_argument("--samples-per-client", type=int, default=40)
    p.add_argument("--k-min", type=int, default=5)
    p.add_argument("--k-max", type=int, default=15)
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--heterogeneity", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-samples", type=int, default=10)
    p.add_argument("--test-samples", type=int, default=10)


def _spec_from_args(args, split_mode: str) -> datagen.SyntheticSpec:
    return datagen.SyntheticSpec(
        num_classes=args.classes, num_parent_categories=args.parent_categories,
        feature_dim=args.feature_dim, clients_train=args.clients_train,
        clients_val=args.clients_val, clients_test=args.clients_test,
        samples_per_client=args.samples_per_client,
        min_classes_per_client=args.k_min, max_classes_per_client=args.k_max,
        noise_sigma=args.noise_sigma, heterogeneity_ratio=args.heterogeneity,
        seed=args.seed, split_mode=split_mode,
        val_samples_per_client=args.val_samples,
        test_samples_per_client=args.test_samples)


def _train_cfg(args, freeze_classifier: bool = True) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, momentum=args.momentum,
                       batch_size=args.batch, max_epochs=args.max_epochs,
                       patience=args.patience, seed=args.seed,
                       freeze_classifier=freeze_classifier)


def _iciia_cfg(args, feature_dim: int) -> IciiaConfig:
    return IciiaConfig(feature_dim=feature_dim, num_heads=args.heads,
                       num_partitions=args.partitions, num_layers=args.layers,
                       train_window=args.window, max_history=args.max_history)


def cmd_gen_data(args) -> int:
    spec = _spec_from_args(args, args.split_mode)
    train, val, test, _ = datagen.generate(spec)
    datagen.write_dataset(args.out_dir, train, val, test, spec)
    print(f"wrote {train.num_records()}/{val.num_records()}/{test.num_records()} "
          f"train/val/test records to {args.out_dir}")
    return 0


def cmd_train_backbone(args) -> int:
    train, val, _, spec = datagen.load_dataset(args.data_dir)
    cfg = _train_cfg(args)
    ckpt = train_global_classifier(train, val, spec.num_classes, cfg,
                                   dtype=DTYPES[args.precision])
    save_checkpoint(args.out, ckpt)
    print(f"backbone classifier: best val accuracy {ckpt.best_val_accuracy:.4f} "
          f"at epoch {ckpt.best_epoch}; saved to {args.out}")
    return 0


def cmd_train_iciia(args) -> int:
    train, val, _, spec = datagen.load_dataset(args.data_dir)
    backbone = load_checkpoint(args.backbone)
    icfg = _iciia_cfg(args, spec.feature_dim)
    cfg = _train_cfg(args, freeze_classifier=not args.unfreeze_classifier)
    ckpt = train_iciia(train, val, backbone, icfg, cfg, ablation=args.ablation,
                       dtype=DTYPES[args.precision])
    save_checkpoint(args.out, ckpt)
    print(f"calibration module: best val accuracy {ckpt.best_val_accuracy:.4f} "
          f"at epoch {ckpt.best_epoch}; saved to {args.out}")
    return 0


def cmd_finetune(args) -> int:
    train, val, test, _ = datagen.load_dataset(args.data_dir)
    backbone = load_checkpoint(args.backbone)
    cfg = _train_cfg(args)
    tuned = harness.finetune_clients(train, val, backbone, cfg)
    acc = harness.finetune_accuracy(test, tuned, backbone)
    rows = []
    for cid in test.client_ids():
        records = test.clients[cid]
        if not records:
            continue
        w, b = tuned.get(cid, (backbone.classifier_w, backbone.classifier_b))
        x = np.stack([r.features for r in records]).astype(np.float32)
        y = np.asarray([r.label for r in records])
        rows.append([cid, len(records),
                     float((np.argmax(x @ w + b, axis=1) == y).mean())])
    if args.out:
        harness.write_csv(args.out, ["client_id", "n_test", "accuracy"], rows)
    print(f"fine-tuning: overall test accuracy {acc:.4f} over {len(rows)} clients")
    return 0


def cmd_evaluate(args) -> int:
    _, _, test, _ = datagen.load_dataset(args.data_dir)
    ckpt = load_checkpoint(args.checkpoint)
    dtype = DTYPES[args.precision]
    if dtype is not np.float32:
        ckpt.classifier_w = ckpt.classifier_w.astype(dtype)
        ckpt.classifier_b = ckpt.classifier_b.astype(dtype)
        if ckpt.iciia is not None:
            ckpt.iciia = ckpt.iciia.astype(dtype)
    if ckpt.iciia is None:
        acc = pooled_accuracy(test, ckpt.classifier_w, ckpt.classifier_b)
        report = {"overall_accuracy": acc, "num_records": test.num_records(),
                  "condition": {"history": None, "seed": args.seed, "ablation": "none"}}
        print(f"baseline accuracy: {acc:.4f}")
    else:
        rep = harness.evaluate_checkpoint(test, ckpt, args.history, args.seed)
        report = {"overall_accuracy": rep.overall_accuracy, "num_records": rep.num_records,
                  "condition": rep.condition, "per_client": rep.per_client,
                  "runtime_seconds": rep.runtime_seconds}
        print(f"accuracy at history={args.history}: {rep.overall_accuracy:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)
    return 0


def _overhead_csv(rows) -> list[str]:
    lines = ["backbone,feature_dim,partitions,layers,window,param_weights,"
             "param_with_bias,param_total,flops,param_ratio,flops_ratio"]
    for r in rows:
        pr = f"{r.param_ratio:.6f}" if r.param_ratio is not None else ""
        fr = f"{r.flops_ratio:.6f}" if r.flops_ratio is not None else ""
        lines.append(f"{r.backbone_name},{r.feature_dim},{r.num_partitions},"
                     f"{r.num_layers},{r.window},{r.param_count_weights},"
                     f"{r.param_count_with_bias},{r.param_count_total},"
                     f"{r.flops_per_window},{pr},{fr}")
    return lines


def cmd_overhead(args) -> int:
    if args.table:
        rows = overhead.backbone_table(num_layers=args.layers, window=args.window)
    else:
        cfg = IciiaConfig(feature_dim=args.feature_dim, num_heads=1,
                          num_partitions=args.partitions, num_layers=args.layers,
                          train_window=args.window)
        rows = [overhead.report(cfg, args.window, args.backbone_name or "",
                                args.backbone_params, args.backbone_flops)]
    lines = _overhead_csv(rows)
    print("\n".join(lines))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def cmd_sweep_history(args) -> int:
    _, _, test, _ = datagen.load_dataset(args.data_dir)
    ckpt = load_checkpoint(args.checkpoint)
    reports = harness.sweep_history(test, ckpt, args.history_values, args.seed, args.out)
    for m, rep in zip(args.history_values, reports):
        print(f"history={m}: accuracy {rep.overall_accuracy:.4f}")
    return 0


def cmd_sweep_partitions(args) -> int:
    train, val, test, spec = datagen.load_dataset(args.data_dir)
    backbone = load_checkpoint(args.backbone)
    base = _iciia_cfg(args, spec.feature_dim)
    rows = harness.sweep_partitions(train, val, test, backbone, args.partition_values,
                                    args.layer_values, base, _train_cfg(args),
                                    args.seeds, history=args.history, out_path=args.out)
    for r in rows:
        print(f"P={r['label']:>4} N={r['layers']}: params={r['param_weights']} "
              f"accuracy {r['accuracy_mean']:.4f} +- {r['accuracy_stderr']:.4f}")
    return 0


def cmd_sweep_heterogeneity(args) -> int:
    spec = _spec_from_args(args, "within-client")
    icfg = _iciia_cfg(args, spec.feature_dim)
    cfg = TrainConfig(learning_rate=args.lr, momentum=args.momentum,
                      batch_size=args.batch, max_epochs=args.max_epochs,
                      patience=args.patience, seed=args.train_seed)
    rows = harness.sweep_heterogeneity(spec, args.rho_values, icfg, cfg, args.seeds,
                                       history=args.history, out_path=args.out)
    for r in rows:
        print(f"rho={r['rho']}: {r['method']:>9} accuracy {r['accuracy_mean']:.4f} "
              f"+- {r['accuracy_stderr']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    train, val, test, spec = datagen.load_dataset(args.data_dir)
    backbone = load_checkpoint(args.backbone)
    icfg = _iciia_cfg(args, spec.feature_dim)
    rows = harness.run_ablations(train, val, test, backbone, icfg, _train_cfg(args),
                                 args.tags, args.seeds, history=args.history,
                                 out_path=args.out)
    for r in rows:
        print(f"{r['tag']:>13}: accuracy {r['accuracy_mean']:.4f} "
              f"(delta {r['delta_mean']:+.4f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iciia",
                                     description="Feature calibration experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _add_spec_flags(p)
    p.add_argument("--split-mode", choices=datagen.SPLIT_MODES, default="by-client")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-backbone", help="train the global linear classifier")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train_backbone)

    p = sub.add_parser("train-iciia", help="train the calibration module")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=ABLATION_TAGS, default="none")
    p.add_argument("--unfreeze-classifier", action="store_true")
    _add_iciia_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train_iciia)

    p = sub.add_parser("finetune", help="per-client last-layer fine-tuning baseline")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="serving-protocol evaluation of a checkpoint")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=sorted(DTYPES), default="f32")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("overhead", help="parameter/FLOP accounting table (CSV)")
    p.add_argument("--table", action="store_true",
                   help="emit the full per-backbone table")
    p.add_argument("--feature-dim", type=int, default=1024)
    p.add_argument("--partitions", type=int, default=1)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--backbone-name", default="")
    p.add_argument("--backbone-params", type=int)
    p.add_argument("--backbone-flops", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_overhead)

    p = sub.add_parser("sweep-history", help="accuracy vs history size")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history-values", type=_int_list, default=[0, 1, 3, 5, 7, 15, 31])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep_history)

    p = sub.add_parser("sweep-partitions", help="accuracy/params vs partition count")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--partition-values", type=_int_list, default=[1, 4, 16, 64])
    p.add_argument("--layer-values", type=_int_list, default=[2])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--history", type=int, default=15)
    p.add_argument("--out")
    _add_iciia_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_sweep_partitions)

    p = sub.add_parser("sweep-heterogeneity",
                       help="baseline/calibration/fine-tuning vs heterogeneity level")
    _add_spec_flags(p)
    p.add_argument("--rho-values", type=_float_list, default=[0.0, 0.5, 1.0])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--history", type=int, default=15)
    p.add_argument("--train-seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--out")
    _add_iciia_flags(p)
    p.set_defaults(fn=cmd_sweep_heterogeneity)

    p = sub.add_parser("ablate", help="train and score ablated variants")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--tags", type=lambda s: s.split(","),
                   default=["none", "no_attention", "no_partition", "no_shuffle"])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    p.add_argument("--history", type=int, default=15)
    p.add_argument("--out")
    _add_iciia_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except IciiaError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
