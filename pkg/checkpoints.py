"""Run directory storage: flat tensor files, checkpoints and the metrics log."""

import csv
import hashlib
import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DATA_NAME = "params.bin"
CHECKPOINT_PATTERN = re.compile(r"^ckpt_(\d+)$")


class CheckpointError(RuntimeError):
    """Raised when a checkpoint or flat tensor file cannot be read."""


class FingerprintError(CheckpointError):
    """Raised when a checkpoint was written for a different model configuration."""


def fingerprint(document: Dict[str, Any]) -> str:
    """SHA-256 over the canonical JSON form of a config fragment."""
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_flat(
    directory: Path,
    tensors: Iterable[Tuple[str, torch.Tensor]],
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    """Write named tensors as concatenated little-endian float32 plus a manifest.

    Args:
        directory: Target directory (created if missing)
        tensors: Ordered (name, tensor) pairs
        extra: Additional manifest fields
    """
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, tensor in tensors:
        values = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").reshape(-1)
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        chunks.append(values)
        offset += values.size
    data = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    (directory / DATA_NAME).write_bytes(data.tobytes())
    manifest = dict(extra or {})
    manifest["tensors"] = entries
    manifest["count"] = offset
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_flat(directory: Path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """Read tensors written by ``write_flat``.

    Args:
        directory: Directory holding manifest.json and params.bin

    Returns:
        Tuple of (name -> float32 tensor, manifest without the tensor table)
    """
    manifest_path = directory / MANIFEST_NAME
    data_path = directory / DATA_NAME
    if not manifest_path.exists() or not data_path.exists():
        raise CheckpointError(f"No tensor data found in {directory}")
    manifest = json.loads(manifest_path.read_text())
    data = np.frombuffer(data_path.read_bytes(), dtype="<f4")
    if data.size != manifest["count"]:
        raise CheckpointError(f"{data_path} holds {data.size} values, manifest says {manifest['count']}")
    tensors = {}
    for entry in manifest.pop("tensors"):
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        values = data[entry["offset"]:entry["offset"] + size].astype(np.float32)
        tensors[entry["name"]] = torch.from_numpy(values.reshape(entry["shape"]).copy())
    return tensors, manifest


class MetricsLog:
    """Append-only CSV log with a fixed header."""

    def __init__(self, path: Path, columns: Sequence[str]):
        """Open (or create) the log.

        Args:
            path: CSV file path
            columns: Column names, written once when the file is created
        """
        self.path = Path(path)
        self.columns = list(columns)
        if not self.path.exists():
            with self.path.open("w", newline="") as handle:
                csv.writer(handle).writerow(self.columns)

    def append(self, row: Dict[str, Any]) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise ValueError(f"Unknown metrics columns: {sorted(unknown)}")
        with self.path.open("a", newline="") as handle:
            csv.writer(handle).writerow([_format_cell(row.get(column)) for column in self.columns])

    def read(self) -> List[Dict[str, str]]:
        with self.path.open(newline="") as handle:
            return list(csv.DictReader(handle))


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunStore:
    """Files of one run: resolved config, metrics log and checkpoints."""

    def __init__(self, run_dir: Path):
        """Initialize the store.

        Args:
            run_dir: Run directory (created if missing)
        """
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.metrics: Optional[MetricsLog] = None
        logger.info(f"Initialized run directory at {self.run_dir}")

    def write_config(self, document: Dict[str, Any]) -> Path:
        path = self.run_dir / "config.yaml"
        path.write_text(yaml.safe_dump(document, sort_keys=True))
        return path

    def open_metrics(self, columns: Sequence[str], name: str = "metrics.csv") -> MetricsLog:
        self.metrics = MetricsLog(self.run_dir / name, columns)
        return self.metrics

    def append_metrics(self, row: Dict[str, Any]) -> None:
        if self.metrics is None:
            raise RuntimeError("Metrics log not opened - call open_metrics() first")
        self.metrics.append(row)

    def save_checkpoint(
        self,
        step: int,
        tensors: Iterable[Tuple[str, torch.Tensor]],
        config_fingerprint: str,
        extra: Optional[Dict[str, Any]] = None,
    ) -> Path:
        """Write ``ckpt_<step>``.

        Args:
            step: Optimizer step counter
            tensors: Ordered (name, tensor) pairs of trainable parameters
            config_fingerprint: Fingerprint of the model configuration
            extra: Additional manifest fields (model config, learning rate, ...)

        Returns:
            Checkpoint directory
        """
        path = self.run_dir / f"ckpt_{step}"
        manifest = dict(extra or {})
        manifest.update({"step": step, "fingerprint": config_fingerprint})
        write_flat(path, tensors, manifest)
        logger.info(f"Saved checkpoint {path.name}")
        return path

    def latest_checkpoint(self) -> Optional[Path]:
        steps = []
        for child in self.run_dir.iterdir():
            match = CHECKPOINT_PATTERN.match(child.name)
            if match and child.is_dir():
                steps.append((int(match.group(1)), child))
        return max(steps)[1] if steps else None


def load_checkpoint(
    path: Path,
    expected_fingerprint: Optional[str] = None,
) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """Load a checkpoint directory.

    Args:
        path: ``ckpt_<step>`` directory
        expected_fingerprint: Refuse to load when the stored fingerprint differs

    Returns:
        Tuple of (tensors, manifest)
    """
    path = Path(path)
    if not path.is_dir():
        raise CheckpointError(f"Checkpoint not found: {path}")
    tensors, manifest = read_flat(path)
    if expected_fingerprint is not None:
        check_fingerprint(path, manifest, expected_fingerprint)
    return tensors, manifest


def check_fingerprint(path: Path, manifest: Dict[str, Any], expected: str) -> None:
    stored = manifest.get("fingerprint")
    if stored != expected:
        raise FingerprintError(
            f"Checkpoint {Path(path).name} fingerprint {str(stored)[:12]}... does not match "
            f"configuration {expected[:12]}..."
        )
