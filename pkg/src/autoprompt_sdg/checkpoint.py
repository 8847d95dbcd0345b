"""Self-describing checkpoint container shared by both training stages."""

import copy
from dataclasses import dataclass, field
from pathlib import Path

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelCheckpoint:
    kind: str  # "agm" | "segmenter"
    state_dict: dict
    config: dict
    iteration: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format_version": FORMAT_VERSION,
                "kind": self.kind,
                "state_dict": self.state_dict,
                "config": self.config,
                "iteration": self.iteration,
                "seed": self.seed,
                "extra": self.extra,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format {blob.get('format_version')!r}")
        return cls(
            blob["kind"], blob["state_dict"], blob["config"], blob["iteration"], blob["seed"], blob.get("extra", {})
        )


def snapshot_state(module):
    """Detached, cloned copy of a module's state dict."""
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def plain_config(obj):
    """Deep-copy a config dict so checkpoints never alias live objects."""
    return copy.deepcopy(obj)
