"""On-disk dataset: a JSON manifest plus one binary payload per slice.

Layout of a dataset directory::

    manifest.json
    slice_p00_s012_a03.f32    # float32 LE, (H, W, C, 2): re/im pairs, channel-minor
    slice_p00_s012_a03.mask   # uint8, (H, W)

The manifest also carries reference solutions (weights, RMSE) once they
have been computed, so payloads are written once and never rewritten.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DatasetError
from .field import ComplexImage, Mask, ShimWeights, SliceSample, TargetProfile

FORMAT = "shimkit-dataset"
VERSION = "1.0"
MANIFEST = "manifest.json"


@dataclass
class DatasetManifest:
    version: str = VERSION
    coil_array: dict = field(default_factory=dict)
    phantoms: list = field(default_factory=list)
    wave: dict = field(default_factory=dict)
    seed: int = 0
    run_config: dict = field(default_factory=dict)
    entries: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def _payload_names(sample: SliceSample):
    stem = f"slice_{sample.key}"
    return stem + ".f32", stem + ".mask"


def sample_entry(sample: SliceSample) -> dict:
    field_file, mask_file = _payload_names(sample)
    h, w, c = sample.b1.data.shape
    mag = np.asarray(sample.target.magnitude)
    entry = {
        "key": sample.key,
        "provenance": sample.provenance,
        "field_file": field_file,
        "mask_file": mask_file,
        "height": h,
        "width": w,
        "channels": c,
        "mask_threshold": sample.mask.source_threshold,
        "target_magnitude": float(mag) if mag.ndim == 0 else mag.tolist(),
        "lambda": sample.target.lam,
        "ref_weights": None,
        "ref_rmse": None,
    }
    if sample.ref_weights is not None:
        v = sample.ref_weights.values
        entry["ref_weights"] = [[float(z.real), float(z.imag)] for z in v]
        entry["ref_rmse"] = sample.ref_rmse
    return entry


def _write_json(path: Path, obj):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")
    os.replace(tmp, path)


def write_manifest(directory, samples, manifest: DatasetManifest):
    """Rewrite ``manifest.json`` from ``samples`` without touching payloads."""
    manifest.entries = [sample_entry(s) for s in samples]
    doc = {
        "format": FORMAT,
        "version": manifest.version,
        "tool_version": __version__,
        "coil_array": manifest.coil_array,
        "phantoms": manifest.phantoms,
        "wave": manifest.wave,
        "seed": manifest.seed,
        "run_config": manifest.run_config,
        "extra": manifest.extra,
        "entries": manifest.entries,
    }
    _write_json(Path(directory) / MANIFEST, doc)


def save_dataset(samples, manifest: DatasetManifest, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    keys = [s.key for s in samples]
    if len(set(keys)) != len(keys):
        raise DatasetError("duplicate sample keys; provenance must be unique per sample")
    for s in samples:
        field_file, mask_file = _payload_names(s)
        data = s.b1.data
        pairs = np.stack([data.real, data.imag], axis=-1).astype("<f4")
        (directory / field_file).write_bytes(pairs.tobytes())
        (directory / mask_file).write_bytes(s.mask.bits.astype(np.uint8).tobytes())
    write_manifest(directory, samples, manifest)


def _read_payload(path: Path, count: int, dtype) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing payload {path.name}")
    raw = path.read_bytes()
    expected = count * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DatasetError(f"payload {path.name} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype)


def load_dataset(directory):
    """Load ``(manifest, samples)`` from ``directory``; checks version and payload sizes."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise DatasetError(f"no {MANIFEST} in {directory}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from exc
    if doc.get("format") != FORMAT:
        raise DatasetError(f"{path}: not a {FORMAT} manifest")
    version = str(doc.get("version", ""))
    if version.split(".")[0] != VERSION.split(".")[0]:
        raise DatasetError(f"{path}: dataset version {version} is not supported (reader is {VERSION})")
    samples = []
    for entry in doc["entries"]:
        h, w, c = entry["height"], entry["width"], entry["channels"]
        try:
            pairs = _read_payload(directory / entry["field_file"], h * w * c * 2, "<f4")
            bits = _read_payload(directory / entry["mask_file"], h * w, np.uint8)
        except DatasetError as exc:
            raise DatasetError(f"entry {entry['key']}: {exc}") from None
        pairs = pairs.reshape(h, w, c, 2).astype(np.float64)
        b1 = ComplexImage(pairs[..., 0] + 1j * pairs[..., 1])
        mask = Mask(bits.reshape(h, w).astype(bool), entry["mask_threshold"])
        target = TargetProfile(np.asarray(entry["target_magnitude"], dtype=np.float64), entry["lambda"])
        if np.ndim(entry["target_magnitude"]) == 0:
            target = TargetProfile(entry["target_magnitude"], entry["lambda"])
        ref_w = None
        if entry.get("ref_weights") is not None:
            ref_w = ShimWeights([complex(re, im) for re, im in entry["ref_weights"]])
        samples.append(SliceSample(b1, mask, target, ref_w, entry.get("ref_rmse"), dict(entry["provenance"])))
    manifest = DatasetManifest(
        version=version,
        coil_array=doc.get("coil_array", {}),
        phantoms=doc.get("phantoms", []),
        wave=doc.get("wave", {}),
        seed=doc.get("seed", 0),
        run_config=doc.get("run_config", {}),
        entries=doc["entries"],
        extra=doc.get("extra", {}),
    )
    return manifest, samples
