"""
persistence.py

Provides reading and writing of pretraining sets, transformer checkpoints, ReLU network
specs and result tables using a class-based approach.
"""
from typing import List, Dict, Optional, Any
import json
import logging
import os
import struct

import numpy as np
import pandas as pd

from modules.datagen import PretrainSet, Prompt
from modules.errors import LocPolLabError, OverwriteRefusedError
from modules.relu_builder import NetSpec
from modules.transformer import ArchSpec, TransformerParams

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LPTF"
NETSPEC_MAGIC = b"LPNN"
FORMAT_VERSION = 1
RESULT_FORMATS = ("csv", "json")


def _to_builtin(value: Any) -> Any:
    # JSON encoder hook for numpy scalars and arrays
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


## File store for every artifact the lab emits
class ArtifactStore:
    """
    Writes and reads artifacts, refusing to overwrite unless asked.
    """

    def __init__(self, overwrite: bool = False):
        self.overwrite = overwrite

    # Refuse existing targets and create the parent directory
    def ensure_writable(self, path: str, overwrite: Optional[bool] = None) -> None:
        allowed = self.overwrite if overwrite is None else overwrite
        if os.path.exists(path) and not allowed:
            raise OverwriteRefusedError(f"{path} exists; pass overwrite to replace it")
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)

    def write_json(self, data: Dict[str, Any], path: str, overwrite: Optional[bool] = None) -> str:
        self.ensure_writable(path, overwrite)
        try:
            with open(path, "w", encoding="utf-8") as handle:
                handle.write(json.dumps(data, indent=2, default=_to_builtin))
        except OSError as e:
            raise LocPolLabError(f"Failed to write {path}: {e}") from e
        return path

    def read_json(self, path: str) -> Dict[str, Any]:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                return json.load(handle)
        except (OSError, json.JSONDecodeError) as e:
            raise LocPolLabError(f"Failed to read {path}: {e}") from e

    # Emit a result table as CSV or JSON records
    def write_frame(self, frame: pd.DataFrame, path: str, format: str = "csv",
                    metadata: Optional[Dict[str, Any]] = None, overwrite: Optional[bool] = None) -> str:
        """
        Write a result table.

        Args:
            frame (pd.DataFrame): Rows to write
            path (str): Target path
            format (str): "csv" or "json"
            metadata (Dict[str, Any]): Config and seeds embedded in JSON output
            overwrite (bool): Replace an existing file

        Returns:
            str: The written path
        """
        if format not in RESULT_FORMATS:
            raise ValueError(f"Unsupported format: {format}")
        if format == "json":
            return self.write_json({"metadata": metadata or {}, "rows": frame.to_dict(orient="records")}, path, overwrite)
        self.ensure_writable(path, overwrite)
        try:
            frame.to_csv(path, index=False)
        except OSError as e:
            raise LocPolLabError(f"Failed to write {path}: {e}") from e
        logger.info(f"✅ Wrote {len(frame)} rows to {path}")
        return path

    # JSON Lines, one sequence per line
    def write_pretrain_set(self, pset: PretrainSet, path: str, overwrite: Optional[bool] = None) -> str:
        self.ensure_writable(path, overwrite)
        try:
            with open(path, "w", encoding="utf-8") as handle:
                for prompt in pset.prompts:
                    handle.write(json.dumps(prompt.to_record(), default=_to_builtin) + "\n")
        except OSError as e:
            raise LocPolLabError(f"Failed to write {path}: {e}") from e
        logger.info(f"✅ Wrote {pset.gamma} sequences to {path}")
        return path

    def read_pretrain_set(self, path: str) -> PretrainSet:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                prompts = [Prompt.from_record(json.loads(line)) for line in handle if line.strip()]
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise LocPolLabError(f"Failed to read {path}: {e}") from e
        seeds = {p.seed for p in prompts}
        return PretrainSet(gamma=len(prompts), prompts=prompts, seed=seeds.pop() if len(seeds) == 1 else None)

    # Binary checkpoint plus JSON sidecar
    def save_checkpoint(self, params: TransformerParams, path: str, provenance: Optional[Dict[str, Any]] = None,
                        overwrite: Optional[bool] = None) -> str:
        """
        Save parameters as magic, version, (d_e, d_ffn, L, d), (B, M) and row-major float64 block tensors.

        Args:
            params (TransformerParams): Parameters to save
            path (str): Binary target; the sidecar goes to <path>.json
            provenance (Dict[str, Any]): Seed, config, build report or training summary
            overwrite (bool): Replace existing files

        Returns:
            str: The binary path
        """
        arch = params.arch
        self.ensure_writable(path, overwrite)
        self.ensure_writable(path + ".json", overwrite)
        try:
            with open(path, "wb") as handle:
                handle.write(CHECKPOINT_MAGIC)
                handle.write(struct.pack("<5I", FORMAT_VERSION, arch.d_e, arch.d_ffn, arch.L, arch.d))
                handle.write(struct.pack("<2d", arch.B, arch.M))
                for block in params.blocks:
                    for array in block.arrays():
                        handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
        except OSError as e:
            raise LocPolLabError(f"Failed to write checkpoint {path}: {e}") from e
        self.write_json({"format_version": FORMAT_VERSION, "arch": arch.to_dict(), "provenance": provenance or {}},
                        path + ".json", overwrite=True)
        logger.info(f"✅ Saved checkpoint with {arch.L} blocks to {path}")
        return path

    def load_checkpoint(self, path: str) -> TransformerParams:
        try:
            with open(path, "rb") as handle:
                raw = handle.read()
        except OSError as e:
            raise LocPolLabError(f"Failed to read checkpoint {path}: {e}") from e
        if raw[:4] != CHECKPOINT_MAGIC:
            raise LocPolLabError(f"{path} is not a transformer checkpoint")
        version, d_e, d_ffn, L, d = struct.unpack_from("<5I", raw, 4)
        if version != FORMAT_VERSION:
            raise LocPolLabError(f"Unsupported checkpoint version {version}")
        B, M = struct.unpack_from("<2d", raw, 24)
        arch = ArchSpec(d_e=d_e, d_ffn=d_ffn, L=L, B=B, d=d, M=M)
        values = np.frombuffer(raw, dtype="<f8", offset=40)
        if values.size != arch.n_params:
            raise LocPolLabError(f"Checkpoint holds {values.size} values, architecture needs {arch.n_params}")
        return TransformerParams.from_vector(arch, values.astype(np.float64))

    def save_netspec(self, net: NetSpec, path: str, overwrite: Optional[bool] = None) -> str:
        self.ensure_writable(path, overwrite)
        try:
            with open(path, "wb") as handle:
                handle.write(NETSPEC_MAGIC)
                handle.write(struct.pack("<2I", FORMAT_VERSION, len(net.layers)))
                for W, b in net.layers:
                    handle.write(struct.pack("<2I", *W.shape))
                    handle.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
                    handle.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        except OSError as e:
            raise LocPolLabError(f"Failed to write network {path}: {e}") from e
        return path

    def load_netspec(self, path: str) -> NetSpec:
        try:
            with open(path, "rb") as handle:
                raw = handle.read()
        except OSError as e:
            raise LocPolLabError(f"Failed to read network {path}: {e}") from e
        if raw[:4] != NETSPEC_MAGIC:
            raise LocPolLabError(f"{path} is not a network spec")
        version, count = struct.unpack_from("<2I", raw, 4)
        if version != FORMAT_VERSION:
            raise LocPolLabError(f"Unsupported network version {version}")
        offset, layers = 12, []
        for _ in range(count):
            rows, cols = struct.unpack_from("<2I", raw, offset)
            offset += 8
            W = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
            offset += 8 * rows * cols
            b = np.frombuffer(raw, dtype="<f8", count=rows, offset=offset)
            offset += 8 * rows
            layers.append((W.astype(np.float64), b.astype(np.float64)))
        return NetSpec(layers=layers)


## Append-only partial results for resumable grid experiments
class PartialRows:
    """
    Appends one finished grid point per write to <name>.partial.csv.
    """

    def __init__(self, path: str, columns: List[str]):
        self.path = path
        self.columns = columns

    def load(self) -> pd.DataFrame:
        if not os.path.exists(self.path):
            return pd.DataFrame(columns=self.columns)
        frame = pd.read_csv(self.path)
        missing = set(self.columns) - set(frame.columns)
        if missing:
            raise LocPolLabError(f"Partial file {self.path} lacks columns {sorted(missing)}")
        logger.info(f"📊 Resuming from {len(frame)} rows in {self.path}")
        return frame[self.columns]

    def append(self, row: Dict[str, Any]) -> None:
        parent = os.path.dirname(self.path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        header = not os.path.exists(self.path)
        pd.DataFrame([row], columns=self.columns).to_csv(self.path, mode="a", header=header, index=False)

    def discard(self) -> None:
        if os.path.exists(self.path):
            os.remove(self.path)


# Global instance for easy access
artifact_store = ArtifactStore()


def write_frame(frame: pd.DataFrame, path: str, format: str = "csv",
                metadata: Optional[Dict[str, Any]] = None, overwrite: bool = False) -> str:
    """Backward compatibility function."""
    return artifact_store.write_frame(frame, path, format, metadata, overwrite)


def save_checkpoint(params: TransformerParams, path: str, provenance: Optional[Dict[str, Any]] = None,
                    overwrite: bool = False) -> str:
    """Backward compatibility function."""
    return artifact_store.save_checkpoint(params, path, provenance, overwrite)


def load_checkpoint(path: str) -> TransformerParams:
    """Backward compatibility function."""
    return artifact_store.load_checkpoint(path)
