"""CSV and JSON artifacts of a run."""

import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional

import numpy as np
import pandas as pd

from .model import COMPONENT_TAGS, Phase

logger = logging.getLogger(__name__)

CSV_OPTIONS = {"index": False, "float_format": "%.17g", "lineterminator": "\r\n", "quoting": csv.QUOTE_MINIMAL}


def _jsonable(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "to_dict"):
        return _jsonable(value.to_dict())
    return value


def write_json(path: Path, payload: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, **CSV_OPTIONS)
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def maturity_frame(times, maturities: np.ndarray, controls: np.ndarray, method: str) -> pd.DataFrame:
    """Columns t, M_1..M_n, M, u_1..u_n, U, method."""
    n = maturities.shape[0]
    data: Dict[str, Any] = {"t": np.asarray(times, dtype=float)}
    for f in range(n):
        data[f"M_{f + 1}"] = maturities[f]
    data["M"] = maturities.sum(axis=0)
    for f in range(n):
        data[f"u_{f + 1}"] = controls[f]
    data["U"] = controls[n]
    data["method"] = method
    return pd.DataFrame(data)


def write_maturity_series(path: Path, times, maturities: np.ndarray, controls: np.ndarray, method: str) -> Path:
    return _write_frame(maturity_frame(times, maturities, controls, method), path)


def snapshot_frame(t: float, grids: Mapping, method: str) -> pd.DataFrame:
    """Long format: one row per (follicle, component, cycle, cell)."""
    frames = []
    for (f, phase, k), values in sorted(grids.items()):
        res = values.shape[0]
        centers = (np.arange(res) + 0.5) / res
        X, Y = np.meshgrid(centers, centers, indexing="ij")
        frames.append(
            pd.DataFrame(
                {
                    "t": t,
                    "follicle": f + 1,
                    "component": COMPONENT_TAGS[Phase(phase)],
                    "cycle": k,
                    "x": X.ravel(),
                    "y": Y.ravel(),
                    "value": values.ravel(),
                    "method": method,
                }
            )
        )
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["t", "follicle", "component", "cycle", "x", "y", "value", "method"])


def write_snapshot(path: Path, t: float, grids: Mapping, method: str) -> Path:
    return _write_frame(snapshot_frame(t, grids, method), path)


def write_rows(path: Path, rows: List[Dict[str, Any]], columns: Optional[List[str]] = None) -> Path:
    return _write_frame(pd.DataFrame(rows, columns=columns), path)


def write_chains(path: Path, chains: Iterable) -> Path:
    return write_json(path, {"chains": [chain.to_dict() for chain in chains]})


def frozen_controls_frame(times, controls: np.ndarray) -> pd.DataFrame:
    """The open-loop schedule format read back by ``FrozenControls.from_csv``."""
    n = controls.shape[0] - 1
    data = {"t": np.asarray(times, dtype=float)}
    for f in range(n):
        data[f"u_{f + 1}"] = controls[f]
    data["U"] = controls[n]
    return pd.DataFrame(data)


def write_frozen_controls(path: Path, times, controls: np.ndarray) -> Path:
    return _write_frame(frozen_controls_frame(times, controls), path)


def checksums(paths: Iterable[Path], root: Path) -> Dict[str, str]:
    return {str(Path(p).relative_to(root)): sha256_file(p) for p in sorted(paths, key=str)}
