"""Run manifests: everything needed to repeat a command bit for bit.

A manifest holds no timestamps, so re-running a command from its manifest
produces an identical manifest as well as identical outputs.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from .config import MANIFEST_KIND

TOOL_VERSION = "0.1.0"


def blob_sha1(data: bytes) -> str:
    """Content hash in the form ``git hash-object`` uses."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    dataset_fingerprint: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)
    checkpoint_sha1: str | None = None
    tool_version: str = TOOL_VERSION

    def add_output(self, path) -> None:
        self.outputs[os.path.basename(path)] = file_sha256(path)

    def to_dict(self) -> dict:
        return {
            "kind": MANIFEST_KIND,
            "tool_version": self.tool_version,
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "dataset_fingerprint": self.dataset_fingerprint,
            "outputs": dict(sorted(self.outputs.items())),
            "checkpoint_sha1": self.checkpoint_sha1,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, path) -> str:
        text = self.to_json()
        with open(path, "w") as fh:
            fh.write(text)
        return text

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("kind") != MANIFEST_KIND:
            raise ValueError(f"{path}: not a run manifest")
        return cls(d["command"], d["config"], d["seed"], d.get("dataset_fingerprint"),
                   d.get("outputs", {}), d.get("checkpoint_sha1"), d.get("tool_version", TOOL_VERSION))
