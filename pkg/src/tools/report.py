import glob
import json
import os
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd

from src.errors import DatasetError
from src.tools.files import atomic_write
from src.tools.log_config import ERROR_ICON, SUCCESS_ICON, setup_logger

logger = setup_logger("report")

CONVERGENCE_COLUMNS = ["epoch", "train_loss", "test_loss", "test_acc"]
NORM_COLUMN = "test_loss_norm"
NORM_SPAN = 2.0


def to_serializable(obj: Any) -> Any:
    """把 numpy/pandas/dataclass 的值转成普通 JSON 类型"""
    if hasattr(obj, "to_dict"):
        return to_serializable(obj.to_dict())
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (int, float, bool, str)) or obj is None:
        return obj
    if isinstance(obj, (list, tuple)):
        return [to_serializable(item) for item in obj]
    if isinstance(obj, dict):
        return {str(key): to_serializable(value) for key, value in obj.items()}
    if hasattr(obj, "__dict__"):
        return to_serializable(vars(obj))
    return str(obj)


def dumps(payload: Any) -> str:
    return json.dumps(to_serializable(payload), indent=2, sort_keys=True)


def show_section(title: str, payload: Any) -> None:
    """在 stdout 打印一段可读文本"""
    print(f"\n{'=' * 10} {title.center(28)} {'=' * 10}")
    if isinstance(payload, pd.DataFrame):
        print(payload.to_string(index=False))
    elif isinstance(payload, (dict, list)):
        print(dumps(payload))
    else:
        print(payload)
    print("=" * 50)


def normalize_losses(values: Sequence[float]) -> np.ndarray:
    """缩放到 [0, 2]，常数序列映射为全零"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return arr
    low, high = arr.min(), arr.max()
    if high - low <= 0:
        logger.warning(f"{ERROR_ICON} constant loss series, normalized column set to 0")
        return np.zeros_like(arr)
    return NORM_SPAN * (arr - low) / (high - low)


def convergence_frame(rows: Dict[str, Sequence[float]], normalize: bool = True) -> pd.DataFrame:
    df = pd.DataFrame({col: rows[col] for col in CONVERGENCE_COLUMNS})
    df["epoch"] = df["epoch"].astype(int)
    if normalize:
        df[NORM_COLUMN] = normalize_losses(df["test_loss"].to_numpy())
    return df


def write_frame_csv(df: pd.DataFrame, path: str) -> str:
    return atomic_write(path, df.to_csv(index=False, float_format="%.17g"))


def write_json(payload: Any, path: str) -> str:
    return atomic_write(path, dumps(payload) + "\n")


def summarize(records: List[Dict[str, float]], fields: Sequence[str]) -> Dict[str, Dict[str, float]]:
    """各指标在折或重启之间的均值和总体标准差"""
    df = pd.DataFrame(records, columns=list(fields))
    return {f: {"mean": float(df[f].mean()), "std": float(df[f].std(ddof=0))} for f in fields}


def boost(f1_hybrid: float, f1_classical: float) -> float:
    """混合模型相对经典模型的 F1 变化百分比"""
    if f1_classical <= 0:
        raise ValueError(f"classical F1 must be positive, got {f1_classical}")
    return (f1_hybrid - f1_classical) / f1_classical * 100.0


def merge_convergence(run_dir: str) -> pd.DataFrame:
    """
    One wide table over every convergence CSV in run_dir: per source file a
    normalized test-loss column and a test-accuracy column, keyed by epoch.
    """
    paths = sorted(p for p in glob.glob(os.path.join(run_dir, "*.csv"))
                   if not os.path.basename(p).startswith("merged"))
    if not paths:
        raise DatasetError(f"no convergence CSVs in {run_dir}")
    merged = None
    for path in paths:
        stem = os.path.splitext(os.path.basename(path))[0]
        df = pd.read_csv(path)
        missing = [c for c in CONVERGENCE_COLUMNS if c not in df.columns]
        if missing:
            logger.warning(f"{ERROR_ICON} skipping {path}: missing columns {missing}")
            continue
        part = pd.DataFrame({
            "epoch": df["epoch"].astype(int),
            f"{stem}_{NORM_COLUMN}": normalize_losses(df["test_loss"].to_numpy()),
            f"{stem}_test_acc": df["test_acc"],
        })
        merged = part if merged is None else merged.merge(part, on="epoch", how="outer")
    if merged is None:
        raise DatasetError(f"no usable convergence CSVs in {run_dir}")
    merged = merged.sort_values("epoch").reset_index(drop=True)
    logger.info(f"{SUCCESS_ICON} merged {len(paths)} convergence files from {run_dir}")
    return merged


def gnuplot_text(df: pd.DataFrame) -> str:
    """Whitespace-separated columns with a '#' header; missing values as NaN."""
    body = df.to_csv(sep=" ", index=False, header=False, float_format="%.10g", na_rep="NaN")
    return "# " + " ".join(df.columns) + "\n" + body


def write_report(run_dir: str, out_dir: str = None) -> Dict[str, str]:
    out_dir = out_dir or run_dir
    merged = merge_convergence(run_dir)
    csv_path = write_frame_csv(merged, os.path.join(out_dir, "merged_convergence.csv"))
    dat_path = atomic_write(os.path.join(out_dir, "merged_convergence.dat"), gnuplot_text(merged))
    return {"csv": csv_path, "dat": dat_path}
