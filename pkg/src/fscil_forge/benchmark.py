"""Session schedules: overlap exclusion, even partitioning, shipped S2S/S2R suites."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ManifestError, ProtocolError

SPLITS = ("train", "test")


def normalize_name(name: str) -> str:
    return re.sub(r"\s+", " ", name.replace("_", " ")).strip().lower()


@dataclass(frozen=True)
class SampleRef:
    sample_id: str
    split: str
    path: str | None = None


@dataclass
class DatasetManifest:
    name: str
    classes: list  # [(class_name, [SampleRef, ...]), ...] in manifest order

    def __post_init__(self):
        cleaned, seen, ids = [], set(), set()
        for cname, samples in self.classes:
            cname = normalize_name(cname)
            if cname in seen:
                raise ManifestError(f"{self.name}: duplicate class {cname!r}")
            seen.add(cname)
            for s in samples:
                if s.split not in SPLITS:
                    raise ManifestError(f"{self.name}: sample {s.sample_id!r} has split {s.split!r}")
                if s.sample_id in ids:
                    raise ManifestError(f"{self.name}: duplicate sample id {s.sample_id!r}")
                ids.add(s.sample_id)
            cleaned.append((cname, list(samples)))
        self.classes = cleaned

    @property
    def class_names(self) -> list:
        return [c for c, _ in self.classes]

    def samples_of(self, class_name: str, split: str | None = None) -> list:
        for c, samples in self.classes:
            if c == class_name:
                return [s for s in samples if split is None or s.split == split]
        raise ManifestError(f"{self.name}: no class {class_name!r}")

    def to_json(self) -> dict:
        return {"name": self.name,
                "classes": [{"name": c, "samples": [{"sample_id": s.sample_id, "split": s.split, "path": s.path}
                                                    for s in samples]} for c, samples in self.classes]}

    @classmethod
    def from_json(cls, doc: dict, root: Path | None = None) -> "DatasetManifest":
        try:
            classes = []
            for entry in doc["classes"]:
                refs = []
                for s in entry.get("samples", []):
                    path = s.get("path")
                    if path is not None and root is not None and not Path(path).is_absolute():
                        path = str((root / path).resolve())
                    refs.append(SampleRef(str(s["sample_id"]), s["split"], path))
                classes.append((entry["name"], refs))
            return cls(doc.get("name", "manifest"), classes)
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from exc


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    return DatasetManifest.from_json(doc, root=path.parent)


def save_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


def _check_unique(names, what):
    seen = set()
    for n in names:
        if n in seen:
            raise ManifestError(f"duplicate class {n!r} in {what} list")
        seen.add(n)


def exclude_overlap(inc_classes, base_classes, aliases=()) -> list:
    """Drop incremental classes equal to, or aliased to, a base class. Order is kept."""
    inc = [normalize_name(c) for c in inc_classes]
    base = [normalize_name(c) for c in base_classes]
    _check_unique(inc, "incremental")
    _check_unique(base, "base")
    base_set = set(base)
    aliased = set()
    for a, b in aliases:
        a, b = normalize_name(a), normalize_name(b)
        if b in base_set:
            aliased.add(a)
        if a in base_set:
            aliased.add(b)
    return [c for c in inc if c not in base_set and c not in aliased]


def partition_sessions(classes, per_session: int) -> list:
    if per_session < 1:
        raise ManifestError("per_session must be >= 1")
    classes = list(classes)
    if not classes:
        raise ManifestError("no classes to partition")
    return [classes[i:i + per_session] for i in range(0, len(classes), per_session)]


@dataclass
class Session:
    index: int
    classes: list
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


@dataclass
class SessionSchedule:
    sessions: list
    samples: dict = field(default_factory=dict)  # sample_id -> {"class": ..., "path": ...}

    def __post_init__(self):
        seen = {}
        for s in self.sessions:
            for c in s.classes:
                if c in seen:
                    raise ProtocolError(f"class {c!r} appears in sessions {seen[c]} and {s.index}")
                seen[c] = s.index
        if [s.index for s in self.sessions] != list(range(1, len(self.sessions) + 1)):
            raise ProtocolError("session indices must be 1..B in order")

    @property
    def n_sessions(self) -> int:
        return len(self.sessions)

    def session(self, b: int) -> Session:
        if not 1 <= b <= len(self.sessions):
            raise ProtocolError(f"session {b} out of range 1..{len(self.sessions)}")
        return self.sessions[b - 1]

    def intro_session(self) -> dict:
        return {c: s.index for s in self.sessions for c in s.classes}

    def visible_classes(self, b: int) -> list:
        return [c for s in self.sessions[:b] for c in s.classes]

    def sizes(self) -> list:
        return [len(s.classes) for s in self.sessions]

    def class_of(self, sample_id: str) -> str:
        return self.samples[sample_id]["class"]

    def to_json(self) -> dict:
        doc = {"sessions": [{"index": s.index, "classes": list(s.classes), "train": list(s.train),
                             "test": list(s.test)} for s in self.sessions]}
        doc["samples"] = {k: dict(self.samples[k]) for k in sorted(self.samples)}
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, doc: dict) -> "SessionSchedule":
        try:
            sessions = [Session(int(s["index"]), list(s["classes"]), list(s.get("train", [])),
                                list(s.get("test", []))) for s in doc["sessions"]]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed schedule: {exc}") from exc
        return cls(sessions, dict(doc.get("samples", {})))


def load_schedule(path) -> SessionSchedule:
    return SessionSchedule.from_json(json.loads(Path(path).read_text()))


def _refs(manifest: DatasetManifest, classes, samples: dict):
    train, test = [], []
    for c in classes:
        for s in manifest.samples_of(c):
            (train if s.split == "train" else test).append(s.sample_id)
            samples[s.sample_id] = {"class": c, "path": s.path}
    return train, test


def build_schedule(base: DatasetManifest, inc: DatasetManifest, per_session: int, aliases=()) -> SessionSchedule:
    """Session 1 holds every base class; the rest are the non-overlapping incremental classes."""
    samples: dict = {}
    base_classes = base.class_names
    kept = exclude_overlap(inc.class_names, base_classes, aliases)
    overlap_ids = {s.sample_id for _, ss in base.classes for s in ss} & {s.sample_id for _, ss in inc.classes for s in ss}
    if overlap_ids:
        raise ManifestError(f"sample ids shared by base and incremental manifests: {sorted(overlap_ids)[:3]}")
    train, test = _refs(base, base_classes, samples)
    sessions = [Session(1, list(base_classes), train, test)]
    for i, chunk in enumerate(partition_sessions(kept, per_session) if kept else [], start=2):
        train, test = _refs(inc, chunk, samples)
        sessions.append(Session(i, chunk, train, test))
    return SessionSchedule(sessions, samples)


# --- shipped FSCIL3D-XL suites ---------------------------------------------------

SUITES = {"s2s": ("shapenet55.json", "modelnet40.json"), "s2r": ("shapenet55.json", "co3d.json")}


def _data_text(name: str) -> str:
    return resources.files("fscil_forge").joinpath("data", name).read_text()


def shipped_manifest(name: str) -> DatasetManifest:
    return DatasetManifest.from_json(json.loads(_data_text(name)))


def shipped_aliases(task: str) -> list:
    doc = json.loads(_data_text("aliases.json"))
    return [tuple(p) for p in doc[task]]


def shipped_schedule(task: str, per_session: int = 4) -> SessionSchedule:
    base_name, inc_name = SUITES[task]
    return build_schedule(shipped_manifest(base_name), shipped_manifest(inc_name), per_session, shipped_aliases(task))
