"""
Checkpoint container for SMCN networks.

A checkpoint is a numpy .npz archive: every array is stored little-endian
float64 under a short key, and one JSON "meta" entry holds the format
version, architecture, global step, optimizer hyperparameters, rng state and
the index mapping parameter names to keys.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .constants import CHECKPOINT_FORMAT_VERSION
from .network import NetworkSpec, build_smcn
from .optimizers import OptimizerState, optimizer_from_dict

logger = logging.getLogger(__name__)

_STORED_DTYPE = "<f8"


class CheckpointError(Exception):
    """Custom exception for unreadable or incompatible checkpoints."""
    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        self.path = str(path) if path is not None else None
        where = f" ({self.path})" if self.path else ""
        super().__init__(f"Checkpoint error{where}: {message}")


@dataclass
class Checkpoint:
    """In-memory copy of a network's state at one global step."""
    step: int
    architecture: dict
    params: Dict[str, np.ndarray]
    trainable: Dict[str, bool]
    batchnorm: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    optimizer: Optional[OptimizerState] = None
    rng_state: Optional[dict] = None
    path: Optional[Path] = None

    @property
    def activation(self) -> str:
        return self.architecture["activation"]

    @property
    def variant(self) -> str:
        return self.architecture["variant"]

    @property
    def num_classes(self) -> int:
        return int(self.architecture["num_classes"])


def snapshot(
    net: NetworkSpec,
    step: int,
    optimizer: Optional[OptimizerState] = None,
    rng_state: Optional[dict] = None,
) -> Checkpoint:
    """Copy the current weights (and optionally optimizer/rng state) of a network."""
    return Checkpoint(
        step=step,
        architecture=net.metadata(),
        params={name: p.values.copy() for name, p in net.parameters.items()},
        trainable={name: p.trainable for name, p in net.parameters.items()},
        batchnorm={name: (s.running_mean.copy(), s.running_var.copy()) for name, s in net.batchnorms.items()},
        optimizer=_copy_optimizer(optimizer),
        rng_state=rng_state,
    )


def _copy_optimizer(optimizer: Optional[OptimizerState]) -> Optional[OptimizerState]:
    if optimizer is None:
        return None
    slots = {slot: {name: arr.copy() for name, arr in arrays.items()} for slot, arrays in optimizer.slots().items()}
    return optimizer_from_dict(optimizer.kind, optimizer.hyperparameters(), slots)


def restore(net: NetworkSpec, ckpt: Checkpoint, names: Optional[Iterable[str]] = None) -> None:
    """
    Copy checkpointed values into a network in place.

    Args:
        net: Target network; must have the checkpoint's parameter names and shapes
        ckpt: Source checkpoint
        names: Restrict the copy to these parameter names (batch-norm statistics
            are only restored on a full restore)
    """
    selected = list(ckpt.params) if names is None else list(names)
    for name in selected:
        if name not in net.parameters:
            raise CheckpointError(f"Parameter '{name}' does not exist in the target network", ckpt.path)
        if name not in ckpt.params:
            raise CheckpointError(f"Parameter '{name}' is not in the checkpoint", ckpt.path)
        target = net.parameters[name].tensor.values
        source = ckpt.params[name]
        if target.shape != source.shape:
            raise CheckpointError(f"Shape mismatch for '{name}': {source.shape} vs {target.shape}", ckpt.path)
        target[...] = source
    if names is None:
        for name, (mean, var) in ckpt.batchnorm.items():
            state = net.batchnorms[name]
            state.running_mean = mean.astype(net.dtype)
            state.running_var = var.astype(net.dtype)


def checkpoint_path(run_dir: Union[str, Path], step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:08d}.npz"


def list_checkpoints(run_dir: Union[str, Path]) -> List[Tuple[int, Path]]:
    """(step, path) of every checkpoint in a run directory, in step order."""
    found = []
    for path in (Path(run_dir) / "checkpoints").glob("step_*.npz"):
        try:
            found.append((int(path.stem.split("_", 1)[1]), path))
        except ValueError:
            logger.warning(f"Ignoring unexpected file {path}")
    return sorted(found)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write a checkpoint archive; parent directories are created."""
    path = Path(path)
    arrays: Dict[str, np.ndarray] = {}
    parameters = []
    for index, (name, values) in enumerate(ckpt.params.items()):
        key = f"p{index}"
        arrays[key] = np.asarray(values, dtype=_STORED_DTYPE)
        parameters.append({"name": name, "key": key, "shape": list(values.shape),
                           "trainable": bool(ckpt.trainable.get(name, True))})
    batchnorm = []
    for index, (name, (mean, var)) in enumerate(ckpt.batchnorm.items()):
        arrays[f"bm{index}"] = np.asarray(mean, dtype=_STORED_DTYPE)
        arrays[f"bv{index}"] = np.asarray(var, dtype=_STORED_DTYPE)
        batchnorm.append({"name": name, "mean": f"bm{index}", "var": f"bv{index}"})
    optimizer = None
    if ckpt.optimizer is not None:
        slots = {}
        for slot, per_param in ckpt.optimizer.slots().items():
            slots[slot] = {}
            for index, (name, values) in enumerate(per_param.items()):
                key = f"o_{slot}{index}"
                arrays[key] = np.asarray(values, dtype=_STORED_DTYPE)
                slots[slot][name] = key
        optimizer = {"kind": ckpt.optimizer.kind, "hyperparameters": ckpt.optimizer.hyperparameters(), "slots": slots}

    meta = {
        "version": CHECKPOINT_FORMAT_VERSION,
        "step": int(ckpt.step),
        "architecture": ckpt.architecture,
        "parameters": parameters,
        "batchnorm": batchnorm,
        "optimizer": optimizer,
        "rng_state": ckpt.rng_state,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            np.savez(handle, meta=np.array(json.dumps(meta)), **arrays)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {str(e)}")
        raise CheckpointError(str(e), path)
    ckpt.path = path
    logger.info(f"Checkpoint written: {path} (step {ckpt.step})")
    return path


def load_checkpoint(path: Union[str, Path], dtype=np.float64) -> Checkpoint:
    """
    Read a checkpoint archive.

    Args:
        path: .npz file written by save_checkpoint
        dtype: dtype of the returned parameter arrays

    Returns:
        Checkpoint with its path set
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError("file not found", path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["meta"]))
            if meta.get("version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(f"unsupported format version {meta.get('version')}", path)
            params = {p["name"]: archive[p["key"]].astype(dtype) for p in meta["parameters"]}
            trainable = {p["name"]: bool(p["trainable"]) for p in meta["parameters"]}
            batchnorm = {b["name"]: (archive[b["mean"]].astype(dtype), archive[b["var"]].astype(dtype))
                         for b in meta["batchnorm"]}
            optimizer = None
            if meta.get("optimizer"):
                opt = meta["optimizer"]
                slots = {slot: {name: archive[key].astype(dtype) for name, key in keys.items()}
                         for slot, keys in opt["slots"].items()}
                optimizer = optimizer_from_dict(opt["kind"], opt["hyperparameters"], slots)
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"unreadable archive: {str(e)}", path)
    return Checkpoint(
        step=int(meta["step"]),
        architecture=meta["architecture"],
        params=params,
        trainable=trainable,
        batchnorm=batchnorm,
        optimizer=optimizer,
        rng_state=meta.get("rng_state"),
        path=path,
    )


def network_from_checkpoint(ckpt: Checkpoint, dtype=None) -> NetworkSpec:
    """Rebuild the checkpoint's architecture and load its weights."""
    arch = ckpt.architecture
    net = build_smcn(
        arch["variant"],
        arch["activation"],
        num_classes=int(arch["num_classes"]),
        seed=int(arch.get("seed", 0)),
        conv_channels=int(arch["conv_channels"]),
        dense_units=tuple(arch["dense_units"]),
        image_size=int(arch["image_size"]),
        bn_placement=arch.get("bn_placement", "before"),
        dtype=dtype or np.dtype(arch.get("dtype", "float32")),
    )
    restore(net, ckpt)
    for name, trainable in ckpt.trainable.items():
        net.parameters[name].trainable = trainable
    return net
