from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List

INDEX_NAME = "manifest.json"


def sha256_file(p: Path) -> str:
    h = hashlib.sha256()
    with p.open("rb") as f:
        for chunk in iter(lambda: f.read(8192), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def atomic_write_bytes(path: Path, data: bytes) -> Path:
    """Write to a temp file in the same directory, then rename over the target."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, obj: Any) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2) + "\n")



@dataclass
class OutputIndex:
    """
    Checksum index over an output directory (artifacts, reports). Contains only
    relative paths and hashes so identical runs produce identical indexes.
    """
    out_dir: Path

    @classmethod
    def create(cls, out_dir: Path) -> "OutputIndex":
        out_dir.mkdir(parents=True, exist_ok=True)
        return cls(out_dir=out_dir)

    def write(self) -> Path:
        files: List[Path] = sorted(self.out_dir.rglob("*"))
        entries = []
        for p in files:
            if p.is_file() and p.name != INDEX_NAME and not p.name.startswith("."):
                entries.append({"path": p.relative_to(self.out_dir).as_posix(), "sha256": sha256_file(p)})
        return write_json(self.out_dir / INDEX_NAME, {"files": entries})


def verify_outputs(out_dir: Path) -> Dict[str, Any]:
    mf = json.loads((out_dir / INDEX_NAME).read_text(encoding="utf-8"))
    mismatches = []
    missing = []
    for entry in mf["files"]:
        p = out_dir / entry["path"]
        if not p.exists():
            missing.append(entry["path"])
            continue
        actual = sha256_file(p)
        if actual != entry["sha256"]:
            mismatches.append({"path": entry["path"], "expected": entry["sha256"], "actual": actual})
    return {"ok": not mismatches and not missing, "missing": missing, "mismatches": mismatches}
