"""Checkpoint directory: ``model.vrst`` (concatenated VRST records),
``model.manifest`` (config hash, step, one line per tensor) and
``config.txt`` (resolved config). Contents depend only on the training
state, so identical runs give identical bytes.
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config, parse_text
from .core import vrst

MODEL_FILE = "model.vrst"
MANIFEST_FILE = "model.manifest"
CONFIG_FILE = "config.txt"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: Config
    step: int
    tensors: dict[str, np.ndarray]
    skipped: int = 0

    def model_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("opt.")}

    def optimizer_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("opt.")}


def save_checkpoint(directory, cfg: Config, step: int, model_state: dict, optimizer_state: dict | None = None,
                    skipped: int = 0) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = io.BytesIO()
    lines = [f"config_hash {cfg.hash()}", f"step {step}", f"skipped {skipped}"]
    for name, arr in list(model_state.items()) + list((optimizer_state or {}).items()):
        offset = blob.tell()
        nbytes = vrst.write(blob, arr)
        shape = ",".join(str(d) for d in np.shape(arr)) or "-"
        lines.append(f"tensor {name} {shape} {offset} {nbytes}")
    # write the payload before the manifest so a manifest always describes a complete file
    (directory / MODEL_FILE).write_bytes(blob.getvalue())
    (directory / CONFIG_FILE).write_text(cfg.resolved().to_text())
    (directory / MANIFEST_FILE).write_text("\n".join(lines) + "\n")
    return directory


def read_manifest(directory) -> tuple[dict[str, str], list[tuple[str, tuple, int, int]]]:
    path = Path(directory) / MANIFEST_FILE
    if not path.exists():
        raise CheckpointError(f"no manifest in {directory}")
    header, entries = {}, []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "tensor" and len(parts) == 5:
            shape = () if parts[2] == "-" else tuple(int(d) for d in parts[2].split(","))
            entries.append((parts[1], shape, int(parts[3]), int(parts[4])))
        elif len(parts) == 2:
            header[parts[0]] = parts[1]
        else:
            raise CheckpointError(f"malformed manifest line {line!r}")
    return header, entries


def load_checkpoint(directory) -> Checkpoint:
    """Read and validate a checkpoint; the config text must hash to the manifest's hash."""
    directory = Path(directory)
    header, entries = read_manifest(directory)
    try:
        cfg = parse_text((directory / CONFIG_FILE).read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read {CONFIG_FILE}: {exc.strerror}") from exc
    if cfg.hash() != header.get("config_hash"):
        raise CheckpointError(f"config hash mismatch: manifest {header.get('config_hash')}, config {cfg.hash()}")
    data = (directory / MODEL_FILE).read_bytes()
    tensors = {}
    for name, shape, offset, nbytes in entries:
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{name}: record runs past the end of {MODEL_FILE}")
        arr = vrst.read(io.BytesIO(chunk))
        if arr.shape != shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} != manifest {shape}")
        tensors[name] = arr
    return Checkpoint(cfg, int(header.get("step", 0)), tensors, int(header.get("skipped", 0)))


def file_digest(directory) -> str:
    """sha256 over the three checkpoint files, for determinism checks."""
    h = hashlib.sha256()
    for name in (MODEL_FILE, MANIFEST_FILE, CONFIG_FILE):
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()
