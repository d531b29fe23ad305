import csv
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sps

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def write_node_grid(path: PathLike, values: np.ndarray) -> Path:
    """Write a 2-D array row by row (row 0 is y = 0), repr floats separated by spaces."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in np.atleast_2d(values):
            f.write(" ".join(repr(float(v)) for v in row) + "\n")
    return path


def read_node_grid(path: PathLike) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append([float(token) for token in line.split()])
    return np.array(rows)


def export_coordinate(path: PathLike, matrix: Union[np.ndarray, sps.spmatrix]) -> Path:
    """Write the nonzeros of a matrix as `row col value` lines, with a `rows cols nnz` header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coo = sps.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for k in order:
            f.write(f"{coo.row[k]} {coo.col[k]} {repr(float(coo.data[k]))}\n")
    logger.debug(f"Exported {coo.nnz} entries to {path}")
    return path


def read_coordinate(path: PathLike) -> sps.csr_matrix:
    with open(path, "r", encoding="utf-8") as f:
        n_rows, n_cols, nnz = (int(token) for token in f.readline().split())
        rows, cols, vals = [], [], []
        for line in f:
            r, c, v = line.split()
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(v))
    if len(vals) != nnz:
        logger.warning(f"{path}: header announces {nnz} entries, found {len(vals)}")
    return sps.csr_matrix((vals, (rows, cols)), shape=(n_rows, n_cols))


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def collect_files(run_dir: PathLike, exclude_files: Optional[List[str]] = None) -> List[Path]:
    """
    List the output files of a run directory.

    Args:
        run_dir: Directory to scan recursively.
        exclude_files: File names to skip (defaults to the manifest itself).

    Returns:
        Relative paths, sorted.
    """
    if exclude_files is None:
        exclude_files = ["run_manifest.json"]

    run_path = Path(run_dir)
    if not run_path.exists():
        logger.error(f"Directory does not exist: {run_path}")
        return []

    files = []
    for root, dirs, filenames in os.walk(run_path):
        # Skip hidden directories and caches
        dirs[:] = [d for d in dirs if not d.startswith(".") and d != "__pycache__"]
        for filename in filenames:
            if filename in exclude_files or filename.startswith("."):
                continue
            files.append((Path(root) / filename).relative_to(run_path))
    return sorted(files)


def _classify_file_type(filepath: PathLike) -> str:
    path = Path(filepath).as_posix().lower()
    if path.startswith("snapshots/"):
        return "snapshot"
    if path.startswith("exports/"):
        return "export"
    if "convergence_history" in path:
        return "history"
    if path.endswith(".csv"):
        return "table"
    if path.endswith(".log"):
        return "log"
    if path.endswith(".json"):
        return "manifest"
    return "other"


def create_run_manifest(run_dir: PathLike, config: Dict[str, Any], stages: Dict[str, Dict[str, Any]],
                        extra: Optional[Dict[str, Any]] = None, output_path: Optional[PathLike] = None) -> Dict:
    """
    Describe a run: resolved config, stage outcomes and every file written.

    The manifest is saved to `output_path` (default <run_dir>/run_manifest.json).
    """
    run_path = Path(run_dir)
    manifest: Dict[str, Any] = {
        "generated_at": str(datetime.now()),
        "config": config,
        "stages": stages,
        "files": {},
    }
    if extra:
        manifest.update(extra)

    for rel_path in collect_files(run_path):
        manifest["files"][rel_path.as_posix()] = {
            "size_bytes": (run_path / rel_path).stat().st_size,
            "type": _classify_file_type(rel_path),
        }
    manifest["total_files"] = len(manifest["files"])

    output_path = Path(output_path) if output_path else run_path / "run_manifest.json"
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False, default=str)
        logger.info(f"Run manifest saved to {output_path}")
    except OSError as e:
        logger.error(f"Failed to save manifest to {output_path}: {e}")
    return manifest
