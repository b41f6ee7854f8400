import json

import numpy as np
import pytest

from fscil_forge.benchmark import build_schedule, load_manifest
from fscil_forge.datasets import ScheduleClouds, dump_clouds_index, synthetic_benchmark, write_synthetic_dataset
from fscil_forge.errors import ConfigError, DataError


def test_synthetic_benchmark_contents():
    sched, clouds = synthetic_benchmark(3, 2, 1, 2, 1, 32, 5)
    assert sched.sizes() == [3, 1, 1]
    assert all(len(pc) == 32 for pc in clouds.values())
    for sid, pc in clouds.items():
        assert sched.class_of(sid) == pc.class_name and pc.sample_id == sid
    other, clouds2 = synthetic_benchmark(3, 2, 1, 2, 1, 32, 6)
    assert other.dumps() == sched.dumps()
    assert not np.array_equal(clouds[sched.session(1).train[0]].points, clouds2[sched.session(1).train[0]].points)
    index = json.loads(dump_clouds_index(clouds))
    assert list(index) == sorted(clouds)


@pytest.mark.parametrize("args", [(0, 1), (10, 7), (2, 1, 1, 0)])
def test_synthetic_benchmark_errors(args):
    with pytest.raises(ConfigError):
        synthetic_benchmark(*args)


def test_written_dataset_matches_memory(tmp_path):
    base, inc = write_synthetic_dataset(tmp_path, 3, 2, 2, 1, 32, 1)
    sched = build_schedule(load_manifest(base), load_manifest(inc), 1)
    mem_sched, clouds = synthetic_benchmark(3, 2, 1, 2, 1, 32, 1)
    assert sched.sizes() == mem_sched.sizes()
    loader = ScheduleClouds(sched, tmp_path)
    for sid, pc in clouds.items():
        got = loader(sid)
        assert got.class_name == pc.class_name
        assert np.allclose(got.points, pc.points, atol=1e-6)
    with pytest.raises(DataError):
        loader("missing/0")


def test_written_dataset_byte_identical(tmp_path):
    a = write_synthetic_dataset(tmp_path / "a", 2, 1, 1, 1, 16, 3)
    b = write_synthetic_dataset(tmp_path / "b", 2, 1, 1, 1, 16, 3)
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    files_a = sorted(p.name for p in (tmp_path / "a" / "clouds").iterdir())
    assert files_a == sorted(p.name for p in (tmp_path / "b" / "clouds").iterdir())
    for name in files_a:
        assert (tmp_path / "a" / "clouds" / name).read_bytes() == (tmp_path / "b" / "clouds" / name).read_bytes()
