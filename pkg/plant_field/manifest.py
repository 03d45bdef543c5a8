"""Pipeline manifest tying every output file to its inputs, seed and config hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any

from .const import _LOGGER
from .exceptions import ManifestError

if TYPE_CHECKING:
    from collections.abc import Iterable
    from pathlib import Path

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
HASH_BLOCK = 1 << 20


def file_digest(path: Path) -> str:
    """Return the SHA-256 of a file."""
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        while block := handle.read(HASH_BLOCK):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class StageRecord:
    """One executed stage."""

    name: str
    seed: int
    config_hash: str
    inputs: list[str] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0
    metrics: dict[str, Any] = field(default_factory=dict)


@dataclass
class PipelineManifest:
    """Stages in execution order; paths are relative to the run directory."""

    root: Path
    stages: dict[str, StageRecord] = field(default_factory=dict)

    @property
    def path(self) -> Path:
        """Return the manifest file path."""
        return self.root / MANIFEST_NAME

    def record(  # noqa: PLR0913
        self,
        name: str,
        seed: int,
        config_hash: str,
        inputs: Iterable[Path],
        outputs: Iterable[Path],
        seconds: float,
        metrics: dict[str, Any] | None = None,
    ) -> StageRecord:
        """Hash a stage's outputs and store its record."""
        hashed = {}
        for output in sorted(outputs):
            if not output.exists():
                msg = f"Stage {name} did not write {output}"
                raise ManifestError(msg)
            hashed[self._relative(output)] = file_digest(output)
        entry = StageRecord(
            name=name,
            seed=seed,
            config_hash=config_hash,
            inputs=sorted(self._relative(p) for p in inputs),
            outputs=hashed,
            seconds=round(seconds, 3),
            metrics=metrics or {},
        )
        self.stages[name] = entry
        return entry

    def _relative(self, path: Path) -> str:
        try:
            return path.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return path.as_posix()

    def to_dict(self) -> dict[str, Any]:
        """Return the manifest record."""
        return {
            "version": MANIFEST_VERSION,
            "stages": [asdict(entry) for entry in self.stages.values()],
        }

    def write(self) -> None:
        """Write the manifest after checking every output still exists."""
        for entry in self.stages.values():
            for output in entry.outputs:
                if not (self.root / output).exists():
                    msg = f"Output {output} of stage {entry.name} is missing"
                    raise ManifestError(msg)
        self.path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def verify(self, stages: Iterable[str] | None = None) -> None:
        """Recompute output hashes and compare them with the records."""
        names = list(self.stages) if stages is None else list(stages)
        for name in names:
            entry = self.stages.get(name)
            if entry is None:
                msg = f"Manifest has no record of stage {name}"
                raise ManifestError(msg)
            for output, expected in entry.outputs.items():
                path = self.root / output
                if not path.exists():
                    msg = f"Output {output} of stage {name} is missing"
                    raise ManifestError(msg)
                if file_digest(path) != expected:
                    msg = f"Output {output} of stage {name} changed since it was written"
                    raise ManifestError(msg)

    @classmethod
    def read(cls, root: Path, verify: bool = True) -> PipelineManifest:
        """Read a manifest, or start an empty one when none exists."""
        manifest = cls(root=root)
        if not manifest.path.exists():
            return manifest
        try:
            record = json.loads(manifest.path.read_text())
            for item in record["stages"]:
                entry = StageRecord(**item)
                manifest.stages[entry.name] = entry
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            msg = f"Malformed manifest {manifest.path}: {err}"
            raise ManifestError(msg) from err
        if verify:
            manifest.verify()
        _LOGGER.debug("Read manifest with stages %s", list(manifest.stages))
        return manifest
