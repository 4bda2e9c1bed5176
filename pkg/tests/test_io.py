import json
import struct

import numpy as np
import pytest

from qbias import io as qio
from qbias.fixtures import depthwise_toy_net, fixture_set
from qbias.nn import forward
from qbias.quant import forward_quant, same_except_biases


class TestBatch:
    def test_float_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(3, 4, 5, 2)).astype(np.float32)
        qio.save_batch(tmp_path / "x.qbt", x)
        y = qio.load_batch(tmp_path / "x.qbt")
        assert y.dtype == np.float64
        np.testing.assert_array_equal(y, x)

    def test_int_round_trip(self, tmp_path):
        qio.save_batch(tmp_path / "l.qbt", np.array([3, 1, 4]))
        y = qio.load_batch(tmp_path / "l.qbt")
        assert y.dtype == np.int64 and list(y) == [3, 1, 4]

    def test_header_layout(self):
        data = qio.encode_batch(np.zeros((2, 3), dtype=np.float32))
        assert data[:4] == b"QBT1"
        assert struct.unpack_from("<4I", data, 4) == (0, 2, 2, 3)
        assert len(data) == 20 + 6 * 4

    def test_bad_magic(self):
        with pytest.raises(qio.FormatError, match="magic"):
            qio.decode_batch(b"NOPE" + bytes(16))

    def test_truncated(self):
        data = qio.encode_batch(np.zeros(4))
        with pytest.raises(qio.FormatError, match="size"):
            qio.decode_batch(data[:-1])

    def test_unknown_type(self):
        data = bytearray(qio.encode_batch(np.zeros(1)))
        data[4] = 9
        with pytest.raises(qio.FormatError, match="element type"):
            qio.decode_batch(bytes(data))


class TestModels:
    def test_graph_round_trip(self, tmp_path):
        g = depthwise_toy_net(seed=4)
        qio.save_graph(tmp_path, g)
        back = qio.load_graph(tmp_path)
        x = fixture_set(0)["calib"][:8]
        np.testing.assert_allclose(forward(back, x)[0], forward(g, x)[0], rtol=1e-4, atol=1e-5)
        assert [l.name for l in back.layers] == [l.name for l in g.layers]
        manifest = json.loads((tmp_path / "model.json").read_text())
        assert manifest["format"] == "qbias-graph" and manifest["blob"] == "model.bin"

    def test_qmodel_round_trip_is_exact(self, tmp_path, toy):
        q = toy["qmodel"]
        qio.save_qmodel(tmp_path, q)
        back = qio.load_qmodel(tmp_path)
        assert same_except_biases(q, back)
        for k, b in q.biases().items():
            np.testing.assert_array_equal(back.bias(k), b)
        x = toy["heldout"][:8]
        np.testing.assert_array_equal(forward_quant(back, x)[0], forward_quant(q, x)[0])

    def test_save_is_deterministic(self, tmp_path, toy):
        qio.save_qmodel(tmp_path / "a", toy["qmodel"])
        qio.save_qmodel(tmp_path / "b", qio.load_qmodel(tmp_path / "a"))
        for name in ("qmodel.json", "qmodel.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_grids_serialized(self, tmp_path, toy):
        qio.save_qmodel(tmp_path, toy["qmodel"])
        m = json.loads((tmp_path / "qmodel.json").read_text())
        assert m["layers"][0]["w_grid"]["bits"] == 6
        assert set(m["layers"][0]["a_grid"]) == {"bits", "scale", "zero_point", "symmetric", "qmin", "qmax"}

    def test_wrong_manifest_kind(self, tmp_path, toy):
        qio.save_graph(tmp_path, toy["fp"])
        (tmp_path / "qmodel.json").write_text((tmp_path / "model.json").read_text())
        with pytest.raises(qio.FormatError):
            qio.load_qmodel(tmp_path)

    def test_corrupt_json(self, tmp_path):
        (tmp_path / "model.json").write_text("{")
        with pytest.raises(qio.FormatError):
            qio.load_graph(tmp_path)

    def test_blob_too_short(self, tmp_path, toy):
        qio.save_graph(tmp_path, toy["fp"])
        blob = tmp_path / "model.bin"
        blob.write_bytes(blob.read_bytes()[:100])
        with pytest.raises(qio.FormatError, match="past end"):
            qio.load_graph(tmp_path)

    def test_invalid_graph_rejected(self, tmp_path, toy):
        qio.save_graph(tmp_path, toy["fp"])
        m = json.loads((tmp_path / "model.json").read_text())
        m["graph"]["layers"][1]["inputs"] = [3]
        (tmp_path / "model.json").write_text(json.dumps(m))
        with pytest.raises(qio.FormatError, match="earlier layer"):
            qio.load_graph(tmp_path)


class TestAtomicWrite:
    def test_no_temp_left(self, tmp_path):
        qio.atomic_write(tmp_path / "sub" / "f.txt", "hello")
        assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]

    def test_failure_keeps_old_file(self, tmp_path):
        target = tmp_path / "f.bin"
        target.write_bytes(b"old")
        with pytest.raises(TypeError):
            qio.atomic_write(target, 12345)
        assert target.read_bytes() == b"old"
        assert [p.name for p in tmp_path.iterdir()] == ["f.bin"]
