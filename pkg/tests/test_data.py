import gzip
import struct

import numpy as np
import pytest

from falconlab import data
from falconlab.data import Dataset, gen_synthetic_shift, load_idx, load_mnist, write_idx
from falconlab.errors import ChecksumError, ConsistencyError, ContractError, DataFormatError, DataIOError, VersionError
from falconlab.metrics import PredictionRecord
from falconlab.nn import Model


def _pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    write_idx(images, labels, ip, lp)
    return ip, lp


def test_idx_two_image_fixture_round_trip(tmp_path):
    imgs = np.array([[[0, 255], [128, 7]], [[1, 2], [3, 4]]], dtype=np.uint8)
    ds = load_idx(*_pair(tmp_path, imgs, [3, 9]))
    np.testing.assert_array_equal(ds.inputs, imgs / 255.0)
    assert ds.labels.tolist() == [3, 9] and ds.num_classes == 10


def test_idx_header_bytes(tmp_path):
    ip, lp = _pair(tmp_path, np.zeros((2, 3, 4)), [0, 1])
    raw = ip.read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 3, 4)
    assert struct.unpack(">II", lp.read_bytes()[:8]) == (0x801, 2)


def test_idx_errors(tmp_path):
    ip, lp = _pair(tmp_path, np.zeros((2, 2, 2)), [0, 1])
    extra = tmp_path / "extra"
    write_idx(np.zeros((1, 1, 1)), [0, 1, 2], tmp_path / "unused", extra)
    with pytest.raises(ConsistencyError):
        load_idx(ip, extra)
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x00\x00\x08\x04" + ip.read_bytes()[4:])
    with pytest.raises(DataFormatError):
        load_idx(bad, lp)
    short = tmp_path / "short"
    short.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(DataIOError):
        load_idx(short, lp)
    with pytest.raises(DataIOError):
        load_idx(tmp_path / "missing", lp)


def test_load_mnist_layout_with_gzip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (3, 28, 28)).astype(np.uint8)
    write_idx(imgs, [1, 2, 3], tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte")
    raw = (tmp_path / "t10k-images-idx3-ubyte").read_bytes()
    (tmp_path / "t10k-images-idx3-ubyte").unlink()
    with gzip.open(tmp_path / "t10k-images-idx3-ubyte.gz", "wb") as fh:
        fh.write(raw)
    ds = load_mnist(tmp_path, "test")
    assert ds.inputs.shape == (3, 28, 28) and ds.split == "test"
    with pytest.raises(DataIOError):
        load_mnist(tmp_path, "train")


def test_dataset_invariants():
    with pytest.raises(ContractError):
        Dataset(np.full((2, 2), 2.0), [0, 1])
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 2)), [0, 10])
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((2, 2)), [0])
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 2)), [0, 1], split="dev")


def test_split_validation_uses_last_samples():
    ds = Dataset(np.random.default_rng(0).random((20, 3)), np.arange(20) % 10)
    tr, va = data.split_validation(ds, 5)
    assert len(tr) == 15 and len(va) == 5 and va.split == "val"
    np.testing.assert_array_equal(va.inputs, ds.inputs[15:])


def test_synthetic_shift_examples():
    tr, te = gen_synthetic_shift(0, 2000, 0.0)
    assert abs(tr.inputs[:, 0].mean()) < 0.1 and abs(te.inputs[:, 0].mean()) < 0.1
    assert not np.array_equal(tr.inputs, te.inputs)
    a, b = gen_synthetic_shift(5, 100, 3.0), gen_synthetic_shift(5, 100, 3.0)
    assert a[0].inputs.tobytes() == b[0].inputs.tobytes() and a[1].inputs.tobytes() == b[1].inputs.tobytes()
    _, far = gen_synthetic_shift(1, 4000, 10.0)
    bayes = (far.inputs[:, 0] > 0).astype(int)  # Bayes-optimal rule for the unshifted classes
    assert abs(np.mean(bayes == far.labels) - 0.5) < 0.03
    with pytest.raises(ContractError):
        gen_synthetic_shift(0, 5, 0.0)


def test_synthetic_shift_direction_is_configurable():
    _, te0 = gen_synthetic_shift(2, 100, 0.0)
    _, te = gen_synthetic_shift(2, 100, 2.0, direction=(0.0, 1.0))
    np.testing.assert_allclose(te.inputs - te0.inputs, [[0.0, 2.0]] * 100)


def test_checkpoint_round_trip_and_errors(tmp_path):
    m = Model.from_preset("lenet-like", 10, (28, 28), seed=4)
    x = np.random.default_rng(0).random((3, 28, 28))
    path = tmp_path / "m.ckpt"
    data.save_checkpoint(m, {"lr": 0.1}, path)
    back, cfg = data.load_checkpoint(path)
    assert cfg == {"lr": 0.1}
    assert back.get_flat().tobytes() == m.get_flat().tobytes()
    m.eval()
    assert back.predict_logits(x).tobytes() == m.predict_logits(x).tobytes()
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        data.load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(DataIOError):
        data.load_checkpoint(tmp_path / "nope.ckpt")


def test_checkpoint_version_error(tmp_path):
    import hashlib
    import json

    header = json.dumps({"version": 99, "num_params": 0, "architecture": {}, "config": {}}).encode()
    body = data.CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header
    p = tmp_path / "v.ckpt"
    p.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(VersionError):
        data.load_checkpoint(p)


def test_prediction_log_examples(tmp_path):
    rng = np.random.default_rng(3)
    recs = [PredictionRecord.from_probs(rng.dirichlet(np.ones(4)), i % 4, "shear", 20) for i in range(3)]
    path = tmp_path / "log.csv"
    data.write_prediction_log(recs, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert lines[0] == "sample_id,perturbation,level,label,predicted,confidence,entropy,p_0,p_1,p_2,p_3"
    rows = data.read_prediction_log(path)
    for r, rec in zip(rows, recs):
        np.testing.assert_allclose(r["probs"], rec.probs, atol=1e-8)
        assert r["confidence"] == r["probs"].max()
        assert r["predicted"] == rec.predicted and r["level"] == 20
    with pytest.raises(ContractError):
        data.write_prediction_log([], path)
