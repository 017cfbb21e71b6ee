"""Run manifests: what a command read, wrote and how long it took."""

import hashlib
import json
import logging
import os
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from .config import RunConfig
from .models import AssemblyRecord, RunManifest

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "run_manifest.json"


def file_sha256(path: Union[str, Path], chunk_size: int = 1 << 20) -> str:
    """Hex sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunRecorder:
    """Collects inputs, outputs and assembly logs of one command run."""

    def __init__(self, command: str, config: RunConfig):
        self.command = command
        self.config = config
        self.started_at = datetime.now(timezone.utc).isoformat()
        self._start = time.perf_counter()
        self.input_hashes: Dict[str, str] = {}
        self.outputs: List[str] = []
        self.assembly_logs: Dict[str, List[AssemblyRecord]] = {}

    def add_inputs(self, paths: Iterable[Union[str, Path]]) -> None:
        for path in paths:
            path = Path(path)
            if path.is_file():
                self.input_hashes[str(path)] = file_sha256(path)

    def add_outputs(self, paths: Iterable[Union[str, Path]]) -> None:
        self.outputs.extend(str(p) for p in paths)

    def add_assembly_log(self, volume_id: str, records: List[AssemblyRecord]) -> None:
        self.assembly_logs[volume_id] = list(records)

    def finish(self) -> RunManifest:
        return RunManifest(
            command=self.command,
            config=self.config.model_dump(mode="json"),
            input_hashes=self.input_hashes,
            outputs=sorted(self.outputs),
            started_at=self.started_at,
            wall_time_s=time.perf_counter() - self._start,
            assembly_logs=self.assembly_logs,
        )

    def write(self, directory: Union[str, Path], filename: Optional[str] = None) -> Path:
        """Finish and write the manifest atomically into ``directory``."""
        return write_run_manifest(Path(directory) / (filename or MANIFEST_FILENAME), self.finish())


def write_run_manifest(path: Union[str, Path], manifest: RunManifest) -> Path:
    """Write via a temporary file and rename, so readers never see a partial manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2), encoding="utf-8")
    os.replace(tmp, path)
    logger.info(f"Run manifest written to {path}")
    return path


def read_run_manifest(path: Union[str, Path]) -> RunManifest:
    return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
