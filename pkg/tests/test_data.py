import hashlib
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from grabdae.config import ConfigError, TrainConfig, config_from_dict, parse_config
from grabdae.data import (
    CheckpointError,
    EmptyDatasetError,
    FormatError,
    SynthSpec,
    decode_pgm,
    decode_ppm,
    encode_pgm,
    encode_ppm,
    load_checkpoint,
    load_dataset,
    mask_path_for,
    read_mask,
    save_checkpoint,
    synth_generate,
    write_ppm,
)
from grabdae.data.codec import decode_ppm_bytes
from grabdae.grabmask import GrabMaskParams
from grabdae.model import ModelConfig, StudentModel, TeacherModel
from grabdae.train import evaluate

# -- codec ------------------------------------------------------------------

def test_ppm_white_pixel():
    np.testing.assert_array_equal(decode_ppm(b"P6 1 1 255\n\xff\xff\xff"), np.ones((1, 1, 3)))


def test_ppm_known_fixture():
    buf = b"P6\n# fixture\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 204])
    img = decode_ppm(buf)
    assert img.shape == (2, 2, 3) and img.dtype == np.float32
    np.testing.assert_array_equal(img[0, 0], [1, 0, 0])
    np.testing.assert_array_equal(img[1, 0], [0, 0, 1])
    np.testing.assert_array_equal(img[1, 1], np.float32([51, 102, 204]) / np.float32(255))


@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_ppm_round_trip(img):
    assert decode_ppm_bytes(encode_ppm(img)).tobytes() == img.tobytes()
    assert encode_ppm(decode_ppm(encode_ppm(img))) == encode_ppm(img)


@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6))))
def test_pgm_round_trip(gray):
    assert decode_pgm(encode_pgm(gray)).tobytes() == gray.tobytes()


@pytest.mark.parametrize("buf, offset", [
    (b"P3 1 1 255\n\x00\x00\x00", 0),
    (b"P6 1 1 255\n\x00\x00", 13),
    (b"P6 1 x 255\n\x00\x00\x00", 5),
    (b"P6 1 1 65535\n\x00\x00\x00", 12),
    (b"P6 1", 4),
])
def test_ppm_errors_carry_offset(buf, offset):
    with pytest.raises(FormatError) as exc:
        decode_ppm(buf)
    assert exc.value.offset == offset
    assert f"byte {offset}" in str(exc.value)


# -- dataset ----------------------------------------------------------------

@pytest.fixture
def ab_root(tmp_path):
    for cls in ("b", "a"):
        (tmp_path / cls).mkdir()
        for i in range(2):
            write_ppm(tmp_path / cls / f"{i}.ppm", np.zeros((4, 4, 3)))
    return tmp_path


def test_dataset_labelled(ab_root):
    ds = load_dataset(ab_root)
    assert len(ds) == 4 and ds.class_names == ["a", "b"]
    assert ds.labels.tolist() == [0, 0, 1, 1]
    assert ds.load_images().shape == (4, 4, 4, 3)


def test_dataset_unlabelled(ab_root):
    ds = load_dataset(ab_root, labeled=False, domain="target")
    assert len(ds) == 4 and not ds.labeled
    assert all(s.label is None and s.domain == "target" for s in ds.samples)
    with pytest.raises(ValueError):
        ds.labels


def test_dataset_ordering_stable(ab_root):
    assert load_dataset(ab_root).samples == load_dataset(ab_root).samples


def test_dataset_skips_unreadable(ab_root):
    (ab_root / "a" / "bad.ppm").write_bytes(b"junk")
    ds = load_dataset(ab_root)
    assert len(ds) == 4 and len(ds.skipped) == 1 and ds.skipped[0][0].name == "bad.ppm"


def test_dataset_empty(tmp_path):
    with pytest.raises(EmptyDatasetError):
        load_dataset(tmp_path)
    with pytest.raises(EmptyDatasetError):
        load_dataset(tmp_path, labeled=False)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


# -- synth ------------------------------------------------------------------

def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_counts(tmp_path):
    synth_generate(SynthSpec(per_class=20), tmp_path)
    images = [p for p in tmp_path.rglob("*.ppm")]
    masks = list(tmp_path.rglob("*_mask.pgm"))
    assert len(images) == 120 and len(masks) == 60
    assert all(p.parent.parent.name == "target" for p in masks)


def test_synth_deterministic(tmp_path):
    spec = SynthSpec(per_class=3, seed=5)
    synth_generate(spec, tmp_path / "a")
    synth_generate(spec, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_synth_area_bounds(tmp_path):
    spec = SynthSpec(per_class=10, seed=2)
    _, tgt = synth_generate(spec, tmp_path)
    for img in tgt.rglob("*.ppm"):
        if img.name.endswith("_mask.pgm"):
            continue
        frac = read_mask(mask_path_for(img)).mean()
        assert spec.area_bounds[0] <= frac <= spec.area_bounds[1]


def test_synth_domain_shift(tmp_path):
    src, tgt = synth_generate(SynthSpec(per_class=5), tmp_path)
    mean_bg = lambda root: np.mean([load_dataset(root).load_images()[:, 0, 0].mean()])  # noqa: E731
    assert mean_bg(tgt) > mean_bg(src)


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(classes=("hexagon",))
    with pytest.raises(ValueError):
        SynthSpec(area=(0.3, 0.2))


# -- checkpoint -------------------------------------------------------------

def _model():
    return StudentModel(ModelConfig(image_side=8, conv1=4, conv2=4, feature_dim=8, disc_hidden=8), seed=4)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = _model()
    t = TeacherModel(m)
    t.params["C.b"].data[...] = 0.25
    save_checkpoint(tmp_path / "c.gdae", m, t, {"epochs": 3})
    m2, t2, meta = load_checkpoint(tmp_path / "c.gdae")
    assert meta == {"epochs": 3} and m2.cfg == m.cfg
    assert all(m2.params[k].data.tobytes() == m.params[k].data.tobytes() for k in m.params)
    assert all(t2.params[k].data.tobytes() == t.params[k].data.tobytes() for k in t.params)


def test_checkpoint_without_teacher(tmp_path):
    save_checkpoint(tmp_path / "c.gdae", _model())
    _, teacher, _ = load_checkpoint(tmp_path / "c.gdae")
    assert teacher is None


def test_checkpoint_evaluate_unchanged(tmp_path):
    m = _model()
    save_checkpoint(tmp_path / "c.gdae", m)
    m2, _, _ = load_checkpoint(tmp_path / "c.gdae")
    r = np.random.default_rng(0)
    x, y = r.uniform(0, 1, (12, 8, 8, 3)).astype(np.float32), r.integers(0, 3, 12)
    assert evaluate(m, x, y, ["a", "b", "c"]) == evaluate(m2, x, y, ["a", "b", "c"])


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(tmp_path / "c.gdae", _model())
    buf = (tmp_path / "c.gdae").read_bytes()
    (tmp_path / "t.gdae").write_bytes(buf[:-4])
    with pytest.raises(CheckpointError, match="length mismatch"):
        load_checkpoint(tmp_path / "t.gdae")


def _rewrite(path, edit):
    buf = path.read_bytes()
    mlen = int.from_bytes(buf[8:12], "little")
    manifest = json.loads(buf[12:12 + mlen])
    edit(manifest)
    mb = json.dumps(manifest).encode()
    path.write_bytes(buf[:8] + len(mb).to_bytes(4, "little") + mb + buf[12 + mlen:])


def test_checkpoint_unknown_name(tmp_path):
    p = tmp_path / "c.gdae"
    save_checkpoint(p, _model())
    _rewrite(p, lambda m: m["tensors"][0].update(name="student.bogus"))
    with pytest.raises(CheckpointError, match="unknown parameter"):
        load_checkpoint(p)


def test_checkpoint_version_mismatch(tmp_path):
    p = tmp_path / "c.gdae"
    save_checkpoint(p, _model())
    buf = bytearray(p.read_bytes())
    buf[4] = 9
    p.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "c.gdae"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


# -- config -----------------------------------------------------------------

def test_config_empty_object_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    cfg = parse_config(p)
    assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.epochs) == (1e-3, 0.9, 1e-4, 32, 30)


def test_config_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"epochs": 1}')
    assert parse_config(p) == TrainConfig(epochs=1)


@pytest.mark.parametrize("data, key", [
    ({"lr": -1}, "lr"),
    ({"nope": 1}, "nope"),
    ({"epochs": 1.5}, "epochs"),
    ({"grl_schedule": 3}, "grl_schedule"),
    ({"batch_size": True}, "batch_size"),
])
def test_config_errors_name_key(data, key):
    with pytest.raises(ConfigError, match=key):
        config_from_dict(data)


def test_config_malformed_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config(p)


def test_config_other_kinds():
    assert config_from_dict({"gamma": 10}, "grabmask") == GrabMaskParams(gamma=10.0)
    assert config_from_dict({"classes": ["circle"], "side": 16}, "synth") == SynthSpec(classes=("circle",), side=16)
    with pytest.raises(ConfigError):
        config_from_dict({}, "nope")


def test_config_to_dict_round_trip():
    cfg = TrainConfig(epochs=2, pseudo_threshold=0.8)
    assert config_from_dict(cfg.to_dict()) == cfg
