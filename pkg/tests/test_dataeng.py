import filecmp
import json
import shutil
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from mmglab.dataeng import DatasetSpec, generate_synthetic, load_dataset, validate_splits
from mmglab.dataeng.synth import PRESETS, generate_examples, generator_maps, write_manifest
from mmglab.dataeng.tensorio import (BadMagicError, DimsOverflowError, TruncatedError, UnsupportedError,
                                     decode_tensor, encode_tensor, read_tensor, write_tensor)
from mmglab.errors import ConfigError, DataError
from mmglab.modality import MODALITIES

from conftest import TINY_SPEC


# -- tensor files ----------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(width=32, allow_nan=False)))
def test_tensor_roundtrip_is_bit_exact(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.shape == arr.shape and out.tobytes() == arr.tobytes()


def test_tensor_file_roundtrip_and_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_tensor(tmp_path / "t.mmgt", arr)
    blob = (tmp_path / "t.mmgt").read_bytes()
    assert blob[:4] == b"MMGT" and blob[4:7] == bytes([1, 0, 2])
    assert struct.unpack("<2I", blob[7:15]) == (2, 3)
    assert blob[15:] == arr.astype("<f4").tobytes()
    assert np.array_equal(read_tensor(tmp_path / "t.mmgt"), arr)


def test_rank_zero_roundtrip():
    blob = encode_tensor(np.float32(2.5))
    assert len(blob) == 7 + 4
    out = decode_tensor(blob)
    assert out.shape == () and out.item() == 2.5


def test_float64_roundtrip():
    x = np.random.default_rng(0).standard_normal((3, 2))
    assert decode_tensor(encode_tensor(x, np.float64)).tobytes() == x.tobytes()


def test_distinct_error_codes():
    good = encode_tensor(np.ones((2, 2), np.float32))
    errors = {}
    for name, blob, cls in (("magic", b"XXXX" + good[4:], BadMagicError),
                            ("trunc", good[:-1], TruncatedError),
                            ("dims", good[:7] + struct.pack("<2I", 2 ** 31, 2 ** 31) + good[15:], DimsOverflowError)):
        with pytest.raises(cls) as exc:
            decode_tensor(blob)
        errors[name] = exc.value.code
        assert isinstance(exc.value, DataError)
    assert len(set(errors.values())) == 3
    with pytest.raises(TruncatedError):
        decode_tensor(good[:9])
    with pytest.raises(UnsupportedError):
        decode_tensor(good[:5] + bytes([9]) + good[6:])


def test_missing_tensor_file(tmp_path):
    with pytest.raises(DataError, match="nope.mmgt"):
        read_tensor(tmp_path / "nope.mmgt")


# -- generation -------------------------------------------------------------------

def test_same_seed_gives_identical_directory(tmp_path):
    spec = DatasetSpec(**{**TINY_SPEC, "unlabeled_pool_size": 8})
    a, b = generate_synthetic(spec, tmp_path / "a"), generate_synthetic(spec, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    match, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
    assert not mismatch and not errors
    c = generate_synthetic(DatasetSpec(**{**TINY_SPEC, "unlabeled_pool_size": 8, "seed": 4}), tmp_path / "c")
    assert (a / "ex_000000" / "video.mmgt").read_bytes() != (c / "ex_000000" / "video.mmgt").read_bytes()


def test_generated_counts_and_layout(tiny_data):
    s = TINY_SPEC
    assert len(tiny_data) == (s["num_base_classes"] * s["base_examples_per_class"]
                              + s["num_novel_classes"] * s["novel_examples_per_class"] + s["unlabeled_pool_size"])
    assert len(tiny_data.split("novel")) == s["num_novel_classes"] * s["novel_examples_per_class"]
    assert len(tiny_data.split("unlabeled")) == s["unlabeled_pool_size"]
    for e in tiny_data.split("unlabeled"):
        assert e.label is None
    for e in tiny_data.split("base-train") + tiny_data.split("base-test"):
        assert e.label in tiny_data.base_classes
    assert set(tiny_data.token_shapes()) == set(MODALITIES)
    assert not tiny_data.access_log


def test_manifest_keys(tiny_dir):
    manifest = json.loads((tiny_dir / "manifest.json").read_text())
    assert set(manifest) == {"schema_version", "base_classes", "novel_classes", "examples"}
    rec = manifest["examples"][0]
    assert set(rec) == {"id", "clip_id", "label", "split", "files"}
    assert rec["files"] == {m: f"{rec['id']}/{m}.mmgt" for m in MODALITIES}
    unl = [r for r in manifest["examples"] if r["split"] == "unlabeled"]
    assert unl and all(r["label"] is None for r in unl)


def test_spec_errors():
    with pytest.raises(ConfigError):
        DatasetSpec(num_base_classes=1).validate()
    with pytest.raises(ConfigError):
        DatasetSpec(modality_noise={"video": -1.0, "audio": 0.1, "imu": 0.1}).validate()
    with pytest.raises(ConfigError):
        DatasetSpec.from_dict({"classes": 3})
    with pytest.raises(ConfigError):
        DatasetSpec.preset("nonexistent")
    assert DatasetSpec.preset("null").class_separation == 0.0
    assert set(PRESETS) == {"default", "complementary", "null"}


def test_noise_free_latents_are_recoverable():
    spec = DatasetSpec(**{**TINY_SPEC, "modality_noise": {m: 0.0 for m in MODALITIES}})
    maps = generator_maps(spec)
    pinv = {m: np.linalg.pinv(a) for m, a in maps.items()}
    worst = 0.0
    for n, (_, tensors, latent) in enumerate(generate_examples(spec)):
        for m in MODALITIES:
            # tensors are stored as float32, so recovery is checked against the float32 rounding
            rec = pinv[m] @ tensors[m].astype(np.float64).ravel()
            worst = max(worst, np.max(np.abs(rec - latent)))
        if n > 200:
            break
    assert worst < 1e-6


def _probe_accuracy(data, modality):
    def xy(split):
        recs = data.split(split)
        return data.stack(recs, modality).reshape(len(recs), -1), data.labels(recs)
    xtr, ytr = xy("base-train")
    xte, yte = xy("base-test")
    onehot = np.eye(len(data.base_classes))[ytr]
    x1 = np.hstack([xtr, np.ones((len(xtr), 1))])
    w = np.linalg.solve(x1.T @ x1 + 1.0 * np.eye(x1.shape[1]), x1.T @ onehot)
    pred = np.argmax(np.hstack([xte, np.ones((len(xte), 1))]) @ w, axis=1)
    return float(np.mean(pred == yte))


def test_noise_free_data_is_linearly_separable(tmp_path):
    spec = DatasetSpec(num_base_classes=5, num_novel_classes=2, base_examples_per_class=12,
                       novel_examples_per_class=4, unlabeled_pool_size=0, class_spread=0.0,
                       modality_noise={m: 0.0 for m in MODALITIES}, seed=1)
    data = load_dataset(generate_synthetic(spec, tmp_path))
    for m in MODALITIES:
        assert _probe_accuracy(data, m) == 1.0


def test_probe_accuracy_follows_noise_ordering(tmp_path):
    spec = DatasetSpec(base_examples_per_class=40, num_novel_classes=2, novel_examples_per_class=4,
                       unlabeled_pool_size=0, seed=2)
    data = load_dataset(generate_synthetic(spec, tmp_path))
    acc = {m: _probe_accuracy(data, m) for m in MODALITIES}
    assert acc["video"] > acc["audio"] > acc["imu"], acc


# -- loading ----------------------------------------------------------------------

def _copy(tiny_dir, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(tiny_dir, dst)
    return dst, json.loads((dst / "manifest.json").read_text())


def test_missing_file_names_the_path(tiny_dir, tmp_path):
    root, _ = _copy(tiny_dir, tmp_path)
    (root / "ex_000003" / "audio.mmgt").unlink()
    with pytest.raises(DataError, match="ex_000003/audio.mmgt"):
        load_dataset(root)


@pytest.mark.parametrize("mutate, message", [
    (lambda m: m["examples"].append(dict(m["examples"][0])), "duplicate"),
    (lambda m: m["examples"][0].update(label="novel_000"), "class table"),
    (lambda m: m["examples"][0].update(split="holdout"), "unknown split"),
    (lambda m: m.pop("novel_classes"), "missing keys"),
    (lambda m: m["examples"][-1].update(label="base_000"), "unlabeled"),
])
def test_manifest_errors(tiny_dir, tmp_path, mutate, message):
    root, manifest = _copy(tiny_dir, tmp_path)
    mutate(manifest)
    write_manifest(root, manifest)
    with pytest.raises(DataError, match=message):
        load_dataset(root)


def test_no_manifest_or_bad_json(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{")
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_hand_built_two_example_manifest(tmp_path):
    shapes = {"video": (2, 3), "audio": (1, 2), "imu": (1, 1)}
    records = []
    for eid in ("b_second", "a_first"):
        (tmp_path / eid).mkdir()
        for m, s in shapes.items():
            write_tensor(tmp_path / eid / f"{m}.mmgt", np.full(s, len(eid), np.float32))
        records.append({"id": eid, "clip_id": "c" + eid, "label": "k", "split": "base-train",
                        "files": {m: f"{eid}/{m}.mmgt" for m in MODALITIES}})
    write_manifest(tmp_path, {"schema_version": 1, "base_classes": ["k"], "novel_classes": ["n"],
                              "examples": records})
    data = load_dataset(tmp_path)
    assert [e.id for e in data] == ["b_second", "a_first"]
    assert data.tensor("a_first", "video").shape == (2, 3)
    assert data.accessed("base-train", "video") == {"a_first"}
    assert validate_splits(data).ok


# -- split validation -------------------------------------------------------------

def test_generated_splits_are_clean(tiny_data):
    assert validate_splits(tiny_data).violations == []


def test_injected_clip_overlap(tiny_dir, tmp_path):
    root, manifest = _copy(tiny_dir, tmp_path)
    base_clip = next(r["clip_id"] for r in manifest["examples"] if r["split"] == "base-train")
    next(r for r in manifest["examples"] if r["split"] == "novel")["clip_id"] = base_clip
    write_manifest(root, manifest)
    report = validate_splits(load_dataset(root))
    assert [v.kind for v in report.violations] == ["clip-overlap"]


def test_injected_class_overlap(tiny_dir, tmp_path):
    root, manifest = _copy(tiny_dir, tmp_path)
    manifest["novel_classes"].append(manifest["base_classes"][0])
    write_manifest(root, manifest)
    assert validate_splits(load_dataset(root)).kinds() == {"class-overlap": 1}


def test_injected_train_test_overlap(tiny_data):
    rec = tiny_data.split("base-train")[0]
    # ids are unique on load, so the overlap is injected on the in-memory handle
    tiny_data.examples.append(replace(rec, split="base-test", files=rec.files))
    assert validate_splits(tiny_data).kinds() == {"train-test-overlap": 1}
