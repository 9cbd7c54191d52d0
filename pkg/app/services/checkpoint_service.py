import hashlib
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn

from app.core.exceptions import CheckpointError
from app.schemas import CheckpointMeta, CheckpointRef

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def content_hash(modules: Dict[str, nn.Module]) -> str:
    """SHA-256 over parameter and buffer bytes, in sorted module and key order."""
    h = hashlib.sha256()
    for name in sorted(modules):
        state = modules[name].state_dict()
        for key in sorted(state):
            t = state[key].detach().cpu().contiguous()
            h.update(f"{name}.{key}:{t.dtype}:{tuple(t.shape)}".encode("utf-8"))
            h.update(t.numpy().tobytes())
    return h.hexdigest()


def shape_mismatches(module: nn.Module, state: Dict[str, torch.Tensor]) -> List[str]:
    own = module.state_dict()
    out: List[str] = []
    for key in sorted(set(own) | set(state)):
        if key not in state:
            out.append(f"{key}: missing in checkpoint")
        elif key not in own:
            out.append(f"{key}: unexpected in checkpoint")
        elif tuple(own[key].shape) != tuple(state[key].shape):
            out.append(f"{key}: checkpoint {tuple(state[key].shape)} vs model {tuple(own[key].shape)}")
    return out


def read_meta(path: PathLike) -> CheckpointMeta:
    side = sidecar_path(path)
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint not found: {path}", field="--checkpoint")
    if not side.exists():
        raise CheckpointError(f"checkpoint sidecar not found: {side}", field="--checkpoint")
    try:
        return CheckpointMeta.model_validate_json(side.read_text(encoding="utf-8"))
    except ValueError as e:
        raise CheckpointError(f"unreadable checkpoint sidecar {side}: {e}", field="--checkpoint") from e


def load_blob(path: PathLike, device: str = "cpu") -> Tuple[Dict[str, Any], CheckpointMeta]:
    meta = read_meta(path)
    try:
        blob = torch.load(path, map_location=torch.device(device), weights_only=True)
    except Exception as e:
        logger.exception("Failed to read checkpoint %s", path)
        raise CheckpointError(f"unreadable checkpoint {path}: {e}", field="--checkpoint") from e
    if not isinstance(blob, dict) or "modules" not in blob:
        raise CheckpointError(f"checkpoint {path} has no module states", field="--checkpoint")
    return blob, meta


def restore_module(module: nn.Module, state: Dict[str, torch.Tensor], name: str) -> None:
    problems = shape_mismatches(module, state)
    if problems:
        raise CheckpointError(
            f"architecture mismatch for {name}: " + "; ".join(problems[:10]),
            field=name,
            mismatches=len(problems),
        )
    module.load_state_dict(state)


def check_architecture(meta: CheckpointMeta, expected: Dict[str, Any]) -> None:
    diffs = [
        f"{k}: checkpoint {meta.architecture.get(k)!r} vs config {v!r}"
        for k, v in sorted(expected.items())
        if meta.architecture.get(k) != v
    ]
    if diffs:
        raise CheckpointError("architecture mismatch with checkpoint: " + "; ".join(diffs), field="network")


class CheckpointIO:
    """
    Saves and restores named modules (and optimizers) as one torch blob plus a
    JSON sidecar carrying CheckpointMeta.

    Writes go to a temporary file in the target directory and are renamed into
    place, so a reader never sees a partial checkpoint.
    """

    def __init__(self, directory: PathLike, **modules: nn.Module):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.module_dict: Dict[str, nn.Module] = dict(modules)

    def register(self, **modules: nn.Module) -> None:
        self.module_dict.update(modules)

    def content_hash(self) -> str:
        return content_hash(self.module_dict)

    def save(
        self,
        name: str,
        meta: Dict[str, Any],
        optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
        extra: Optional[Dict[str, Any]] = None,
    ) -> CheckpointRef:
        path = self.directory / f"{name}.pt"
        full_meta = CheckpointMeta(
            **meta,
            param_count=int(sum(p.numel() for m in self.module_dict.values() for p in m.parameters())),
            content_hash=self.content_hash(),
        )
        blob: Dict[str, Any] = {
            "modules": {k: m.state_dict() for k, m in self.module_dict.items()},
            "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        }
        if extra:
            blob["extra"] = extra

        logger.info("Saving checkpoint into %s (phase=%s, epoch=%d)", path, full_meta.phase, full_meta.epoch)
        side = sidecar_path(path)
        staged: Dict[Path, str] = {}
        blob_in_place = False
        try:
            staged[path] = self._stage(path, lambda f: torch.save(blob, f))
            staged[side] = self._stage(side, lambda f: f.write(full_meta.model_dump_json(indent=2).encode("utf-8")))
            os.replace(staged[path], path)
            del staged[path]
            blob_in_place = True
            os.replace(staged[side], side)
            del staged[side]
        except Exception as e:
            for tmp in staged.values():
                if os.path.exists(tmp):
                    os.remove(tmp)
            # the new blob has no matching sidecar
            if blob_in_place:
                path.unlink(missing_ok=True)
                side.unlink(missing_ok=True)
            logger.exception("Checkpoint write failed for %s", path)
            raise CheckpointError(f"failed to write checkpoint {path}: {e}", field="--out") from e
        return CheckpointRef(path=str(path), meta=full_meta)

    def load(
        self,
        path: PathLike,
        optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
        device: str = "cpu",
    ) -> Tuple[CheckpointMeta, Dict[str, Any]]:
        logger.info("Loading checkpoint from %s", path)
        blob, meta = load_blob(path, device)
        states = blob["modules"]
        for name, module in self.module_dict.items():
            if name not in states:
                raise CheckpointError(f"checkpoint {path} has no state for {name!r}", field=name)
            restore_module(module, states[name], name)
        for name, opt in (optimizers or {}).items():
            if name in blob.get("optimizers", {}):
                opt.load_state_dict(blob["optimizers"][name])
        return meta, blob.get("extra", {})

    def _stage(self, path: Path, write) -> str:
        """Write into a temporary file beside ``path`` and return its name; the caller renames it."""
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(self.directory))
        try:
            with os.fdopen(fd, "wb") as f:
                write(f)
                f.flush()
                os.fsync(f.fileno())
        except Exception:
            os.remove(tmp)
            raise
        return tmp
