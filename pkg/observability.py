from __future__ import annotations

import json
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

MANIFEST_VERSION = 1


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def emit_event(event: str, **fields: Any) -> None:
    payload = {
        "ts": datetime.now(timezone.utc).isoformat(),
        "event": event,
        **fields,
    }
    line = json.dumps(payload, ensure_ascii=True, default=_jsonable)
    print(f"[Event]: {line}")

    log_file = os.getenv("METALABEL_LOG_FILE", "").strip()
    if log_file:
        try:
            path = Path(log_file)
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        except Exception as e:
            # Best effort.
            print(f"[EventWarning]: failed to write METALABEL_LOG_FILE='{log_file}': {e}", file=sys.stderr)


def git_describe(fallback: str) -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
        return out.stdout.strip() or fallback
    except (OSError, subprocess.SubprocessError):
        return fallback


def write_manifest(
    out_dir: Path,
    *,
    command: str,
    argv: list[str],
    config: dict[str, Any] | None,
    seed: int | None,
    workers: int,
    version: str,
    started: datetime,
    finished: datetime,
    outputs: list[str],
    extra: dict[str, Any] | None = None,
    name: str = "manifest.json",
) -> Path:
    """Write a manifest (``manifest.json`` unless named otherwise) beside a command's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "workers": workers,
        "version": git_describe(version),
        "started": started.isoformat(),
        "finished": finished.isoformat(),
        "seconds": round((finished - started).total_seconds(), 3),
        "outputs": sorted(outputs),
        **(extra or {}),
    }
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=2, default=_jsonable) + "\n", encoding="utf-8")
    return path
