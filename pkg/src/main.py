import argparse
import os
import sys
from typing import Any, Dict, List, Optional

import pandas as pd

# 添加项目根目录到 sys.path
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.errors import ConfigError, QtlError
from src.models.layers import LayerGraph
from src.models.presets import COUNT_ONLY, PRESETS, preset
from src.models.surgery import HybridModel, QTL_PRESETS, build_hybrid, param_report, plan_cut
from src.tools.annotations import convert_jpeg_dir, load_neu_det
from src.tools.checkpoint import load_checkpoint, read_header, save_checkpoint
from src.tools.dataset import (
    Dataset,
    build_binary_dataset,
    holdout_split,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from src.tools.log_config import ERROR_ICON, setup_logger
from src.tools.report import boost, dumps, show_section, write_frame_csv, write_json, write_report
from src.tools.run_config import RunConfig, load_run_config
from src.trainer import cross_validate, train_classical

logger = setup_logger("qtl")

FULL_SIZE_MODELS = ("CM-1", "CM-2", "CM-3")


def emit(args: argparse.Namespace, title: str, payload: Any, table: Optional[pd.DataFrame] = None) -> None:
    """输出一份 JSON，或者可读的分节文本，二者只取其一"""
    if args.json:
        print(dumps(payload))
        return
    if table is not None:
        show_section(title, table)
    show_section(f"{title} summary", payload)


def _run_config(args: argparse.Namespace, **extra) -> RunConfig:
    overrides = {"seed": args.seed, "output_dir": args.out}
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_run_config(args.config, **overrides)


def resolve_dataset(config: RunConfig) -> Dataset:
    config.validate_paths()
    if config.dataset_source == "cache":
        return load_dataset(config.dataset_path)
    if config.dataset_source == "neu-det":
        images, report = load_neu_det(config.dataset_path)
        if report.errors:
            logger.warning(f"{ERROR_ICON} {len(report.errors)} files rejected:\n{report.to_frame().to_string()}")
        return build_binary_dataset(images, config.dropped_classes, seed=config.seed or 0,
                                    target_size=config.target_size, min_patch=config.min_patch)
    return synth_dataset(config.n_per_class, config.image_size, seed=config.seed or 0,
                         defect=config.synthetic_defect)


def _parse_pairs(tokens: List[str]) -> Dict[str, str]:
    pairs = {}
    for token in tokens:
        if "=" not in token:
            raise ConfigError(f"expected key=value, got {token!r}")
        key, value = token.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


##### dataset #####
def cmd_dataset(args: argparse.Namespace) -> int:
    if args.action == "convert":
        if not args.path:
            raise ConfigError("dataset convert needs a source directory")
        written = convert_jpeg_dir(args.path, args.out)
        emit(args, "convert", {"converted": len(written), "directory": os.path.dirname(written[0])})
        return 0

    if args.action == "inspect":
        if not args.path or not os.path.isfile(args.path):
            raise ConfigError(f"dataset cache not found: {args.path}")
        emit(args, "dataset", load_dataset(args.path).summary())
        return 0

    extra = {}
    if args.synthetic is not None:
        pairs = _parse_pairs(args.synthetic)
        unknown = set(pairs) - {"n", "size", "seed", "defect"}
        if unknown:
            raise ConfigError(f"unknown synthetic options {sorted(unknown)}")
        extra.update(dataset_source="synthetic", n_per_class=int(pairs.get("n", 100)),
                     image_size=int(pairs.get("size", 32)), synthetic_defect=pairs.get("defect", "blob"))
        if "seed" in pairs and args.seed is None:
            extra["seed"] = int(pairs["seed"])
    elif args.neu_det:
        extra.update(dataset_source="neu-det", dataset_path=args.neu_det)
    config = _run_config(args, **extra)
    dataset = resolve_dataset(config)
    path = args.path or config.dataset_cache or os.path.join(config.output_dir, "dataset.qtld")
    save_dataset(dataset, path)
    emit(args, "dataset", {**dataset.summary(), "path": os.path.abspath(path)})
    return 0


##### train-classical #####
def cmd_train_classical(args: argparse.Namespace) -> int:
    extra = {"model_preset": args.preset, "epochs": args.epochs}
    if args.dataset:
        extra.update(dataset_source="cache", dataset_path=args.dataset)
    config = _run_config(args, **extra)
    train_config = config.train_config("classical")
    dataset = resolve_dataset(config)

    result = train_classical(config.model_preset, dataset, train_config)
    out = config.output_dir
    for record in result.records:
        write_frame_csv(record.to_frame(train_config.normalize_loss), os.path.join(out, f"{record.label}.csv"))
    best = result.metrics[result.best]
    provenance = {
        "config_hash": config.config_hash(),
        "epochs_completed": train_config.epochs,
        "train_config": train_config.to_dict(),
        "test_f1": best.f1,
    }
    ckpt = save_checkpoint(result.model, os.path.join(out, f"{config.model_preset}.qtlc"),
                           seed=result.seeds[result.best], provenance=provenance)
    payload = {
        "model": config.model_preset,
        "best_restart": result.best,
        "best_seed": result.seeds[result.best],
        "param_count": result.model.param_count(),
        "metrics": best.to_dict(),
        "restarts": [m.to_dict() for m in result.metrics],
        "config_hash": provenance["config_hash"],
        "checkpoint": ckpt,
    }
    # metrics.json 只记文件名，结果目录可整体搬走
    write_json({**payload, "checkpoint": os.path.basename(ckpt)}, os.path.join(out, "metrics.json"))
    emit(args, "train-classical", payload)
    return 0


##### transfer #####
def cmd_transfer(args: argparse.Namespace) -> int:
    extra = {"qtl_preset": args.qtl, "model_checkpoint": args.checkpoint, "folds": args.folds,
             "epochs": args.epochs}
    if args.dataset:
        extra.update(dataset_source="cache", dataset_path=args.dataset)
    config = _run_config(args, **extra)
    config.validate_paths(need_checkpoint=True)
    train_config = config.train_config("hybrid")

    graph = load_checkpoint(config.model_checkpoint)
    if not isinstance(graph, LayerGraph):
        raise ConfigError(f"{config.model_checkpoint} is not a classical checkpoint")
    vqc_config = config.vqc_config()
    plan = plan_cut(graph, config.qtl_preset, config.qtl_width)
    report = param_report(graph, config.qtl_preset, vqc_config, width=config.qtl_width)

    dataset = resolve_dataset(config)
    if config.cv_source == "train":
        dataset, _ = holdout_split(dataset, train_config.test_fraction, train_config.seed)

    def builder(seed: int) -> HybridModel:
        return build_hybrid(graph, plan, vqc_config, n_classes=2, seed=seed)

    cv = cross_validate(builder, dataset, config.folds, train_config)
    out = config.output_dir
    for record in cv.records:
        write_frame_csv(record.to_frame(train_config.normalize_loss), os.path.join(out, f"{record.label}.csv"))
    best_fold = max(range(len(cv.metrics)), key=lambda i: (cv.metrics[i].f1, -i))
    ckpt = save_checkpoint(cv.models[best_fold], os.path.join(out, f"{graph.name}_{config.qtl_preset}.qtlc"),
                           seed=train_config.seed + best_fold,
                           provenance={"config_hash": config.config_hash(),
                                       "epochs_completed": train_config.epochs,
                                       "fold": best_fold})

    payload = {
        "model": graph.name,
        "qtl": config.qtl_preset,
        "folds": [m.to_dict() for m in cv.metrics],
        "summary": cv.summary,
        "mean_f1": cv.mean_f1,
        "params": report.to_dict(),
        "config_hash": config.config_hash(),
        "checkpoint": ckpt,
    }
    classical_f1 = read_header(config.model_checkpoint).get("provenance", {}).get("test_f1")
    if classical_f1:
        payload["boost_percent"] = boost(cv.mean_f1, classical_f1)
    # metrics.json 只记文件名，结果目录可整体搬走
    write_json({**payload, "checkpoint": os.path.basename(ckpt)}, os.path.join(out, "metrics.json"))
    emit(args, "transfer", payload)
    return 0


##### params #####
def layer_table(graph: LayerGraph) -> pd.DataFrame:
    return pd.DataFrame([
        {"index": i, "layer": spec.describe(), "params": spec.param_count(), "frozen": spec.frozen}
        for i, spec in enumerate(graph.layers)
    ])


def _discrepancy(graph: LayerGraph) -> Optional[str]:
    published = graph.published_param_count
    if published is None or published == graph.param_count():
        return None
    return (f"published total {published:,} cannot be reconciled with the listed layers "
            f"(constructed {graph.param_count():,}); hybrid totals are also reported against the published figure")


def _params_grid(args: argparse.Namespace) -> int:
    rows = []
    for name in FULL_SIZE_MODELS:
        graph = preset(name, seed=None)
        for qtl in QTL_PRESETS[:3]:
            rows.append(param_report(graph, qtl).to_dict())
    table = pd.DataFrame(rows)[["model", "qtl", "classical_total", "hybrid_total", "reduction_total",
                                "reduction_replaced", "published_total", "reference_hybrid_total",
                                "reference_reduction_total"]]
    emit(args, "parameter grid", {"rows": rows}, table=table)
    return 0


def cmd_params(args: argparse.Namespace) -> int:
    if args.all:
        return _params_grid(args)
    if not args.model:
        raise ConfigError("params needs a model preset or checkpoint path")

    if args.model in PRESETS:
        model = preset(args.model, seed=None)
    elif os.path.isfile(args.model):
        model = load_checkpoint(args.model)
    else:
        raise ConfigError(f"unknown model preset or checkpoint {args.model!r}; presets: {', '.join(PRESETS)}")

    if isinstance(model, HybridModel):
        payload = {"model": model.frozen_prefix.name, "qtl": model.plan.preset,
                   "total": model.param_count(), "prefix_total": model.frozen_prefix.param_count(),
                   **model.head.breakdown()}
        emit(args, "params", payload, table=layer_table(model.frozen_prefix))
        return 0

    payload: Dict[str, Any] = {"model": model.name, "total": model.param_count(),
                               "layers": layer_table(model).to_dict(orient="records")}
    note = _discrepancy(model)
    if note:
        payload["published_total"] = model.published_param_count
        payload["note"] = note
    if model.name in COUNT_ONLY:
        payload["count_only"] = True
    if args.qtl:
        payload["qtl"] = param_report(model, args.qtl, width=args.width).to_dict()
    emit(args, "params", payload, table=None if args.json else layer_table(model))
    return 0


##### report #####
def cmd_report(args: argparse.Namespace) -> int:
    if not args.run_dir or not os.path.isdir(args.run_dir):
        raise ConfigError(f"run directory not found: {args.run_dir}")
    paths = write_report(args.run_dir, args.out)
    emit(args, "report", paths)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='Run configuration file (KEY=VALUE)')
    common.add_argument('--seed', type=int, help='Override TRAIN_SEED')
    common.add_argument('--out', type=str, help='Output directory (overrides OUTPUT_DIR)')
    common.add_argument('--json', action='store_true', help='Print one JSON document to stdout')

    parser = argparse.ArgumentParser(prog='qtl', description='Quantum transfer learning toolkit')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('dataset', parents=[common], help='Build, inspect or convert datasets')
    p.add_argument('action', choices=['build', 'inspect', 'convert'])
    p.add_argument('path', nargs='?', help='Cache file (build/inspect) or JPEG directory (convert)')
    p.add_argument('--synthetic', nargs='*', metavar='KEY=VALUE', help='n=, size=, seed=, defect=')
    p.add_argument('--neu-det', type=str, help='NEU-DET root with IMAGES/ and ANNOTATIONS/')
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser('train-classical', parents=[common], help='Pretrain a classical preset')
    p.add_argument('--preset', type=str, default=None, help='Model preset (CM-1, CM-2, CM-3, CM-T)')
    p.add_argument('--dataset', type=str, help='Dataset cache file')
    p.add_argument('--epochs', type=int, help='Override the epoch count')
    p.set_defaults(func=cmd_train_classical)

    p = sub.add_parser('transfer', parents=[common], help='Graft a dressed quantum head and cross-validate')
    p.add_argument('--checkpoint', type=str, help='Classical checkpoint')
    p.add_argument('--qtl', type=str, choices=QTL_PRESETS, help='Cut preset')
    p.add_argument('--dataset', type=str, help='Dataset cache file')
    p.add_argument('--folds', type=int, help='Cross-validation folds (default 6)')
    p.add_argument('--epochs', type=int, help='Override the epoch count')
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser('params', parents=[common], help='Parameter accounting')
    p.add_argument('model', nargs='?', help='Preset name or checkpoint path')
    p.add_argument('--qtl', type=str, choices=QTL_PRESETS, help='Also account for a graft')
    p.add_argument('--width', type=int, help='Head input width for the custom QTL preset')
    p.add_argument('--all', action='store_true', help='Full model x QTL grid')
    p.set_defaults(func=cmd_params)

    p = sub.add_parser('report', parents=[common], help='Merge convergence CSVs into plot-ready files')
    p.add_argument('run_dir', nargs='?', help='Directory with convergence CSVs')
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"{ERROR_ICON} {e}")
        return 2
    except QtlError as e:
        logger.error(f"{ERROR_ICON} {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
