"""Synthetic FSCIL benchmarks built from the parametric shape library, and lazy file loading."""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

from .benchmark import DatasetManifest, SampleRef, SessionSchedule, build_schedule, save_manifest
from .errors import ConfigError, DataError
from .geometry import SHAPE_NAMES, PointCloud, gen_synthetic, load_cloud, write_pcb
from .rng import derive_seed


def _sample_seed(seed: int, class_name: str, split: str, k: int) -> int:
    return derive_seed(seed, "sample", class_name, split, k)


def _synthetic_manifest(name, classes, train_per_class, test_per_class, seed):
    entries = []
    for c in classes:
        refs = [SampleRef(f"{name}/{c}/{split}{k}", split)
                for split, count in (("train", train_per_class), ("test", test_per_class))
                for k in range(count)]
        entries.append((c, refs))
    return DatasetManifest(name, entries)


def synthetic_benchmark(n_base: int = 10, n_inc: int = 6, per_session: int = 2, train_per_class: int = 5,
                        test_per_class: int = 5, n_points: int = 256, seed: int = 0, noisy_incremental: bool = False):
    """Schedule plus in-memory clouds over the first ``n_base + n_inc`` library shapes.

    ``noisy_incremental`` renders incremental classes with scan-like noise, a
    desk analogue of the synthetic-to-real shift.
    """
    if n_base < 1 or n_inc < 0:
        raise ConfigError("need n_base >= 1 and n_inc >= 0")
    if n_base + n_inc > len(SHAPE_NAMES):
        raise ConfigError(f"only {len(SHAPE_NAMES)} synthetic shapes are available")
    if train_per_class < 1 or test_per_class < 1:
        raise ConfigError("each class needs at least one train and one test sample")
    base_cls = list(SHAPE_NAMES[:n_base])
    inc_cls = list(SHAPE_NAMES[n_base:n_base + n_inc])
    base = _synthetic_manifest("base", base_cls, train_per_class, test_per_class, seed)
    inc = _synthetic_manifest("inc", inc_cls, train_per_class, test_per_class, seed)
    schedule = build_schedule(base, inc, per_session)
    clouds = {}
    for man, noisy in ((base, False), (inc, noisy_incremental)):
        for c, refs in man.classes:
            for ref in refs:
                k = int(ref.sample_id.rsplit(ref.split, 1)[1])
                pc = gen_synthetic(c, n_points, _sample_seed(seed, c, ref.split, k), noisy=noisy)
                clouds[ref.sample_id] = PointCloud(pc.points, c, ref.sample_id)
    return schedule, clouds


def write_synthetic_dataset(out_dir, n_base: int = 10, n_inc: int = 6, train_per_class: int = 5,
                            test_per_class: int = 5, n_points: int = 256, seed: int = 0,
                            noisy_incremental: bool = False):
    """Write PCB1 clouds plus ``base.json`` and ``inc.json`` manifests; returns the two paths."""
    out = Path(out_dir)
    schedule, clouds = synthetic_benchmark(n_base, n_inc, max(n_inc, 1), train_per_class, test_per_class,
                                           n_points, seed, noisy_incremental)
    paths = []
    for name, sessions in (("base", schedule.sessions[:1]), ("inc", schedule.sessions[1:])):
        entries = []
        for sess in sessions:
            for c in sess.classes:
                refs = []
                for sid in [*sess.train, *sess.test]:
                    if schedule.class_of(sid) != c:
                        continue
                    rel = Path("clouds") / (sid.replace("/", "_") + ".pcb")
                    (out / rel).parent.mkdir(parents=True, exist_ok=True)
                    write_pcb(out / rel, clouds[sid])
                    refs.append(SampleRef(sid, "train" if sid in sess.train else "test", rel.as_posix()))
                entries.append((c, refs))
        manifest = DatasetManifest(name, entries)
        path = out / f"{name}.json"
        save_manifest(path, manifest)
        paths.append(path)
    return tuple(paths)


class ScheduleClouds:
    """Callable ``sample_id -> PointCloud`` reading each sample's file on first use."""

    def __init__(self, schedule: SessionSchedule, root=None):
        self.schedule = schedule
        self.root = Path(root) if root is not None else None
        self._load = lru_cache(maxsize=None)(self._read)

    def _read(self, sid: str) -> PointCloud:
        info = self.schedule.samples.get(sid)
        if info is None:
            raise DataError(f"sample {sid!r} is not in the schedule")
        path = info.get("path")
        if not path:
            raise DataError(f"sample {sid!r} has no file path")
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return load_cloud(p, info["class"], sid)

    def __call__(self, sid: str) -> PointCloud:
        return self._load(sid)


def dump_clouds_index(clouds: dict) -> str:
    """Sorted ``sample_id -> class`` listing, handy for diffing synthetic runs."""
    return json.dumps({k: clouds[k].class_name for k in sorted(clouds)}, indent=1) + "\n"
