"""
services/outputs.py
Write run outputs: CSV and JSON files written to a temp file and moved into place, metadata
sidecars, timestamped run directories with a keep-N retention policy.

Every CSV gets a ``<name>.meta.json`` next to it carrying the config hash, the seed and the
method vocabulary. Nothing time-dependent goes into files, so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from typing import Any, Dict, List, Mapping, Optional

import pandas as pd

from imputers import METHODS, VOCABULARY_VERSION

logger = logging.getLogger(__name__)

PACKAGE_VERSION = "0.1.0"
RUN_STEM = "run"
FLOAT_FORMAT = "%.10g"


def _timestamp() -> str:
    return time.strftime("%Y%m%d-%H%M%S")


def _ensure_dir(path: str):
    try:
        os.makedirs(path, exist_ok=True)
    except Exception:
        pass


def atomic_write_text(path: str, text: str):
    """Write to ``path + '.tmp'`` and replace ``path`` in one step; the temp file never lingers."""
    _ensure_dir(os.path.dirname(os.path.abspath(path)))
    tmp_path = path + ".tmp"
    try:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
    except Exception:
        pass
    try:
        with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp_path, path)
    except Exception:
        try:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
        except Exception:
            pass
        raise


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(doc: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def write_json(obj: Any, path: str):
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2, default=str) + "\n")


def metadata(config_doc: Mapping[str, Any], seed: Optional[int], command: str, **extra) -> Dict[str, Any]:
    meta = {
        "command": command,
        "config_hash": config_hash(config_doc),
        "seed": seed,
        "methods": list(METHODS),
        "vocabulary_version": VOCABULARY_VERSION,
        "version": PACKAGE_VERSION,
    }
    meta.update(extra)
    return meta


def write_csv(frame: pd.DataFrame, path: str, meta: Optional[Mapping[str, Any]] = None):
    """CSV with a header row, LF endings, empty fields for NA, and an optional metadata sidecar."""
    text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n", na_rep="")
    atomic_write_text(path, text)
    if meta is not None:
        write_json(dict(meta), os.path.splitext(path)[0] + ".meta.json")
    logger.debug("wrote %s (%d rows)", path, len(frame))


def write_lines(lines, path: str):
    atomic_write_text(path, "".join(f"{line}\n" for line in lines))


# --- Run directories -----------------------------------------------------------------------


def _list_run_dirs(out_dir: str, stem: str = RUN_STEM) -> List[str]:
    try:
        items = []
        for name in os.listdir(out_dir):
            p = os.path.join(out_dir, name)
            if name.startswith(stem + "-") and os.path.isdir(p):
                items.append(p)
        return items
    except Exception:
        return []


def new_run_dir(out_dir: str, stem: str = RUN_STEM) -> str:
    """Create ``<out_dir>/<stem>-YYYYmmdd-HHMMSS`` (suffixed when the second is taken)."""
    _ensure_dir(out_dir)
    base = os.path.join(out_dir, f"{stem}-{_timestamp()}")
    path, n = base, 1
    while os.path.exists(path):
        path = f"{base}-{n}"
        n += 1
    os.makedirs(path)
    return path


def retention_prune(out_dir: str, keep: int, stem: str = RUN_STEM) -> List[str]:
    """Delete all but the ``keep`` newest run directories; returns what was removed."""
    if keep is None or keep <= 0:
        return []
    runs = _list_run_dirs(out_dir, stem)
    # Sort by modified time descending (newest first)
    try:
        runs.sort(key=lambda p: (os.path.getmtime(p), p), reverse=True)
    except Exception:
        runs.sort(reverse=True)
    removed = []
    for old in runs[keep:]:
        try:
            shutil.rmtree(old)
            removed.append(old)
        except Exception:
            pass
    if removed:
        logger.info("retention: removed %d old run director%s", len(removed), "y" if len(removed) == 1 else "ies")
    return removed


def cleanup_stale_tmp(out_dir: str, *, min_age_seconds: int = 24 * 60 * 60):
    """Remove ``*.tmp`` files left by interrupted writes once they are old enough."""
    try:
        now = time.time()
        for root, _dirs, files in os.walk(out_dir or "."):
            for name in files:
                if not name.lower().endswith(".tmp"):
                    continue
                p = os.path.join(root, name)
                try:
                    if (now - float(os.path.getmtime(p))) >= float(min_age_seconds):
                        os.remove(p)
                except Exception:
                    pass
    except Exception:
        pass
