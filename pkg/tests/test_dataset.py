import json

import numpy as np
import pytest

from conftest import sample_from
from shimkit.errors import DatasetError
from shimkit.field import ComplexImage, Mask, ShimWeights, TargetProfile
from shimkit.dataset import MANIFEST, DatasetManifest, load_dataset, save_dataset, write_manifest


def f32_samples(rng, n=3, h=5, w=6, c=4):
    out = []
    for i in range(n):
        data = (rng.normal(size=(h, w, c)) + 1j * rng.normal(size=(h, w, c))).astype(np.complex64)
        s = sample_from(ComplexImage(data.astype(np.complex128)), Mask(rng.random((h, w)) < 0.6, 500.0),
                        TargetProfile(1.0, 1e-3), phantom=1, slice=i, aug=2, angle=-20.0)
        out.append(s)
    out[0].ref_weights = ShimWeights(rng.normal(size=c) + 1j * rng.normal(size=c))
    out[0].ref_rmse = 0.123
    return out


@pytest.fixture
def saved(rng, tmp_path):
    samples = f32_samples(rng)
    manifest = DatasetManifest(coil_array={"count": 4}, seed=7, run_config={"a": 1})
    save_dataset(samples, manifest, tmp_path)
    return samples, tmp_path


def test_round_trip_bit_exact(saved):
    samples, path = saved
    manifest, loaded = load_dataset(path)
    assert manifest.seed == 7 and manifest.coil_array == {"count": 4} and manifest.run_config == {"a": 1}
    assert len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        assert a == b
        assert a.b1.data.tobytes() == b.b1.data.tobytes()
        assert b.mask.source_threshold == 500.0
    assert loaded[0].ref_weights == samples[0].ref_weights
    assert loaded[1].ref_weights is None


def test_payload_layout(saved):
    samples, path = saved
    s = samples[1]
    raw = np.fromfile(path / f"slice_{s.key}.f32", dtype="<f4").reshape(5, 6, 4, 2)
    np.testing.assert_array_equal(raw[..., 0], s.b1.data.real.astype(np.float32))
    np.testing.assert_array_equal(raw[..., 1], s.b1.data.imag.astype(np.float32))


def test_manifest_rewrite_keeps_payloads(saved):
    samples, path = saved
    before = (path / f"slice_{samples[2].key}.f32").stat().st_mtime_ns
    samples[2].ref_rmse, samples[2].ref_weights = 0.5, ShimWeights(np.ones(4))
    write_manifest(path, samples, DatasetManifest())
    _, loaded = load_dataset(path)
    assert loaded[2].ref_rmse == 0.5
    assert (path / f"slice_{samples[2].key}.f32").stat().st_mtime_ns == before


def test_truncated_payload_names_entry(saved):
    samples, path = saved
    f = path / f"slice_{samples[1].key}.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(DatasetError, match=samples[1].key) as err:
        load_dataset(path)
    assert f.name in str(err.value)


def test_missing_payload(saved):
    samples, path = saved
    (path / f"slice_{samples[0].key}.mask").unlink()
    with pytest.raises(DatasetError, match="missing payload"):
        load_dataset(path)


def test_newer_major_version_refused(saved):
    _, path = saved
    doc = json.loads((path / MANIFEST).read_text())
    doc["version"] = "2.0"
    (path / MANIFEST).write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="version 2.0"):
        load_dataset(path)


def test_newer_minor_version_accepted(saved):
    _, path = saved
    doc = json.loads((path / MANIFEST).read_text())
    doc["version"] = "1.7"
    (path / MANIFEST).write_text(json.dumps(doc))
    assert load_dataset(path)[0].version == "1.7"


def test_malformed_manifest(saved):
    _, path = saved
    (path / MANIFEST).write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        load_dataset(path)


def test_no_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_duplicate_keys_rejected(rng, tmp_path):
    samples = f32_samples(rng, n=2)
    samples[1].provenance["slice"] = 0
    with pytest.raises(DatasetError, match="duplicate"):
        save_dataset(samples, DatasetManifest(), tmp_path)


def test_per_voxel_target(rng, tmp_path):
    s = f32_samples(rng, n=1)[0]
    s.target = TargetProfile(np.linspace(0.5, 1.5, s.mask.count), 0.01)
    save_dataset([s], DatasetManifest(), tmp_path)
    loaded = load_dataset(tmp_path)[1][0]
    np.testing.assert_array_equal(loaded.target.values(s.mask.count), s.target.values(s.mask.count))
    assert loaded.target.lam == 0.01
