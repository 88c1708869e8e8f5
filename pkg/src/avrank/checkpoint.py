"""Versioned checkpoint files shared by the generator, discriminator and extractor."""

from __future__ import annotations

from pathlib import Path

import torch

FORMAT = "avrank-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, *, kind: str, config: dict, tensors: dict, iteration: int = 0,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": dict(config),
        "iteration": int(iteration),
        "tensors": {k: v.detach().cpu().clone() for k, v in tensors.items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path}: holds {payload.get('kind')!r}, expected {kind!r}")
    return payload


def read_state_dict(path) -> dict:
    """Tensor dict from either one of our checkpoints or a plain torch state dict."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weight file {path} does not exist")
    try:
        obj = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable weight file ({exc})") from exc
    if isinstance(obj, dict) and obj.get("format") == FORMAT:
        obj = obj["tensors"]
    if not isinstance(obj, dict) or not all(isinstance(v, torch.Tensor) for v in obj.values()):
        raise CheckpointError(f"{path}: expected a mapping of parameter tensors")
    return obj


def load_matching(module: torch.nn.Module, state: dict, source="weights") -> None:
    """Load every tensor of ``module`` from ``state``; extra keys are ignored."""
    own = module.state_dict()
    missing = [k for k in own if k not in state]
    if missing:
        raise CheckpointError(f"{source}: missing {len(missing)} tensors, e.g. {missing[0]!r}")
    for k, v in own.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise CheckpointError(
                f"{source}: {k} has shape {tuple(state[k].shape)}, expected {tuple(v.shape)}"
            )
    module.load_state_dict({k: state[k] for k in own})
