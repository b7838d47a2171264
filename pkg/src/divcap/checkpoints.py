"""Versioned checkpoint container shared by the generator and discriminators."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, config, model: torch.nn.Module, extra: dict | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": asdict(config),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, kind: str, expected_config=None) -> dict:
    """Load a checkpoint, rejecting version, kind, or config mismatches."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path}: not a recognized checkpoint container")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['format_version']} != {FORMAT_VERSION}"
        )
    if payload["kind"] != kind:
        raise CheckpointError(f"{path}: checkpoint kind {payload['kind']!r}, expected {kind!r}")
    if expected_config is not None:
        stored = payload["config"]
        expected = asdict(expected_config)
        diffs = sorted(
            k
            for k in set(stored) | set(expected)
            if tuple_safe(stored.get(k)) != tuple_safe(expected.get(k))
        )
        if diffs:
            raise CheckpointError(f"{path}: config mismatch on keys {diffs}")
    return payload


def tuple_safe(value):
    return tuple(value) if isinstance(value, (list, tuple)) else value
