"""Clip manifests and the append-only JSON-lines journal that stores them."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

SCHEMA_VERSION = 1
STATUSES = ("pending", "kept", "dropped", "error")


@dataclass(frozen=True)
class Verdict:
    """Filter outcome. ``error`` means the inputs could not be read, which is not a drop."""

    status: str = "pending"
    reason: str | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown verdict status {self.status!r}")

    @classmethod
    def kept(cls) -> "Verdict":
        return cls("kept")

    @classmethod
    def dropped(cls, reason: str) -> "Verdict":
        return cls("dropped", reason)

    @classmethod
    def error(cls, reason: str) -> "Verdict":
        return cls("error", reason)

    @property
    def is_kept(self) -> bool:
        return self.status == "kept"

    def __str__(self):
        return self.status if self.reason is None else f"{self.status}({self.reason})"


@dataclass(frozen=True)
class ClipManifest:
    """One clip. Paths are relative to the manifest file's directory."""

    clip_id: str
    frames_path: str
    landmarks_path: str
    n_frames: int
    fps: int | str
    face_boxes: tuple = ()
    filter_verdict: Verdict = field(default_factory=Verdict)
    reference_frame: int | None = None
    identity_embedding_path: str | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["face_boxes"] = [[list(b) for b in frame] for frame in self.face_boxes]
        d["v"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ClipManifest":
        d = dict(d)
        if d.pop("v", None) != SCHEMA_VERSION:
            raise ValueError(f"clip {d.get('clip_id')!r}: unsupported manifest schema")
        d["face_boxes"] = tuple(tuple(tuple(int(v) for v in b) for b in frame) for frame in d["face_boxes"])
        d["filter_verdict"] = Verdict(**d["filter_verdict"])
        return cls(**d)

    def with_updates(self, **changes) -> "ClipManifest":
        return replace(self, **changes)

    def validate(self, root) -> None:
        """Check the kept-clip invariant: resolvable paths and an in-range reference frame."""
        if not self.filter_verdict.is_kept:
            return
        root = Path(root)
        for name in ("frames_path", "landmarks_path", "identity_embedding_path"):
            value = getattr(self, name)
            if value is not None and not (root / value).exists():
                raise FileNotFoundError(f"clip {self.clip_id}: {name} {value} does not resolve")
        if self.reference_frame is not None and not 0 <= self.reference_frame < self.n_frames:
            raise ValueError(f"clip {self.clip_id}: reference frame {self.reference_frame} out of range")


def _dumps(entry: ClipManifest) -> str:
    return json.dumps(entry.to_json(), sort_keys=True, separators=(",", ":"))


def append_entries(path, entries) -> None:
    """Journal append; later lines for the same clip supersede earlier ones."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for entry in entries:
            fh.write(_dumps(entry) + "\n")


def read_manifests(path) -> dict[str, ClipManifest]:
    """Merge the journal: last entry per clip wins, first-appearance order kept."""
    merged: dict[str, ClipManifest] = {}
    path = Path(path)
    if not path.exists():
        return merged
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = ClipManifest.from_json(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad manifest line: {exc}") from exc
        merged[entry.clip_id] = entry
    return merged


def write_manifests(path, entries) -> None:
    """Rewrite the journal compactly (one line per clip), atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        for entry in entries:
            fh.write(_dumps(entry) + "\n")
    os.replace(tmp, path)
