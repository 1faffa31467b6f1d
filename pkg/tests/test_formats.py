"""On-disk formats: AGT1 tensors, PGM maps, AGCK checkpoints, index files."""

import numpy as np
import numpy.testing as npt
import pytest

import agnet.formats as F
from agnet.errors import CheckpointError, DataError


class TestAgt:
    @pytest.mark.parametrize("shape", [(3,), (4, 5), (2, 3, 4), ()])
    def test_roundtrip_bitwise(self, rng, tmp_path, shape):
        arr = rng.standard_normal(shape).astype(np.float32)
        F.write_agt(tmp_path / "t.agt1", arr)
        back = F.read_agt(tmp_path / "t.agt1")
        assert back.shape == arr.shape
        npt.assert_array_equal(back, arr)

    def test_header_layout(self, tmp_path):
        F.write_agt(tmp_path / "t.agt1", np.zeros((2, 3), dtype=np.float32))
        raw = (tmp_path / "t.agt1").read_bytes()
        assert raw[:4] == b"AGT1"
        assert int.from_bytes(raw[4:8], "little") == 2
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 3
        assert len(raw) == 16 + 4 * 6

    def test_bad_magic(self, tmp_path):
        (tmp_path / "t.agt1").write_bytes(b"NOPE" + b"\0" * 12)
        with pytest.raises(DataError):
            F.read_agt(tmp_path / "t.agt1")

    def test_truncated_payload(self, tmp_path):
        F.write_agt(tmp_path / "t.agt1", np.zeros(8, dtype=np.float32))
        raw = (tmp_path / "t.agt1").read_bytes()
        (tmp_path / "t.agt1").write_bytes(raw[:-4])
        with pytest.raises(DataError):
            F.read_agt(tmp_path / "t.agt1")

    def test_trailing_bytes(self, tmp_path):
        F.write_agt(tmp_path / "t.agt1", np.zeros(2, dtype=np.float32))
        with open(tmp_path / "t.agt1", "ab") as fh:
            fh.write(b"x")
        with pytest.raises(DataError):
            F.read_agt(tmp_path / "t.agt1")

    def test_implausible_ndim(self, tmp_path):
        (tmp_path / "t.agt1").write_bytes(b"AGT1" + (99).to_bytes(4, "little"))
        with pytest.raises(DataError):
            F.read_agt(tmp_path / "t.agt1")


class TestPgm:
    def test_bytes_and_scaling(self, tmp_path):
        arr = np.array([[0.0, 0.5], [1.0, 2.0]])
        F.write_pgm(tmp_path / "m.pgm", arr)
        raw = (tmp_path / "m.pgm").read_bytes()
        assert raw.startswith(b"P5\n2 2\n255\n")
        pix = np.frombuffer(raw[len(b"P5\n2 2\n255\n"):], dtype=np.uint8).reshape(2, 2)
        npt.assert_array_equal(pix, [[0, 64], [128, 255]])  # peak 2.0 -> 255

    def test_negative_values_clamped(self, tmp_path):
        F.write_pgm(tmp_path / "m.pgm", np.array([[-3.0, 1.0]]))
        raw = (tmp_path / "m.pgm").read_bytes()
        pix = np.frombuffer(raw.split(b"\n", 3)[3], dtype=np.uint8)
        npt.assert_array_equal(pix, [0, 255])

    def test_all_zero_map(self, tmp_path):
        F.write_pgm(tmp_path / "m.pgm", np.zeros((2, 3)))
        raw = (tmp_path / "m.pgm").read_bytes()
        pix = np.frombuffer(raw.split(b"\n", 3)[3], dtype=np.uint8)
        npt.assert_array_equal(pix, 0)

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(DataError):
            F.write_pgm(tmp_path / "m.pgm", np.zeros((2, 2, 2)))


class TestCheckpoint:
    def test_roundtrip(self, rng, tmp_path):
        tensors = {
            "b.w": rng.standard_normal((3, 4)).astype(np.float32),
            "a.v": rng.standard_normal(5).astype(np.float32),
            "scalar": np.float32(2.5),
        }
        F.save_checkpoint(tmp_path / "c.agck", tensors, "lr = 0.1\nseed = 3")
        back, cfg = F.load_checkpoint(tmp_path / "c.agck")
        assert cfg == "lr = 0.1\nseed = 3"
        assert set(back) == set(tensors)
        for k in tensors:
            npt.assert_array_equal(back[k], np.asarray(tensors[k], dtype=np.float32))

    def test_byte_stream_is_content_deterministic(self, rng, tmp_path):
        tensors = {"x": rng.standard_normal(4).astype(np.float32), "y": np.ones(2, np.float32)}
        F.save_checkpoint(tmp_path / "a.agck", dict(tensors), "cfg")
        # same content, different insertion order -> identical bytes (sorted names)
        F.save_checkpoint(tmp_path / "b.agck", dict(reversed(list(tensors.items()))), "cfg")
        assert (tmp_path / "a.agck").read_bytes() == (tmp_path / "b.agck").read_bytes()

    def test_empty_config(self, tmp_path):
        F.save_checkpoint(tmp_path / "c.agck", {"t": np.zeros(1, np.float32)})
        _, cfg = F.load_checkpoint(tmp_path / "c.agck")
        assert cfg == ""

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            F.load_checkpoint(tmp_path / "nope.agck")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.agck").write_bytes(b"AGT1" + b"\0" * 8)
        with pytest.raises(CheckpointError):
            F.load_checkpoint(tmp_path / "c.agck")

    def test_truncation_detected(self, rng, tmp_path):
        F.save_checkpoint(tmp_path / "c.agck", {"w": rng.standard_normal(16).astype(np.float32)})
        raw = (tmp_path / "c.agck").read_bytes()
        for cut in (6, 20, len(raw) - 2):
            (tmp_path / "cut.agck").write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                F.load_checkpoint(tmp_path / "cut.agck")

    def test_trailing_garbage_detected(self, tmp_path):
        F.save_checkpoint(tmp_path / "c.agck", {"w": np.zeros(2, np.float32)})
        with open(tmp_path / "c.agck", "ab") as fh:
            fh.write(b"junk")
        with pytest.raises(CheckpointError):
            F.load_checkpoint(tmp_path / "c.agck")


class TestBoxText:
    def test_roundtrip(self):
        assert F.parse_box(F.format_box((1, 2, 3, 4))) == (1, 2, 3, 4)
        assert F.parse_box(F.format_box(None)) is None

    def test_malformed(self):
        with pytest.raises(DataError):
            F.parse_box("1,2,3")
        with pytest.raises(DataError):
            F.parse_box("a,b,c,d")


class TestIndex:
    def test_roundtrip(self, tmp_path):
        entries = [
            ("images/00000.agt1", 0, (1, 2, 3, 4)),
            ("images/00001.agt1", 5, None),
        ]
        F.write_index(tmp_path / "i.tsv", entries)
        assert F.read_index(tmp_path / "i.tsv") == entries

    def test_blank_lines_skipped(self, tmp_path):
        (tmp_path / "i.tsv").write_text("a.agt1\t0\t-\n\nb.agt1\t1\t-\n")
        assert len(F.read_index(tmp_path / "i.tsv")) == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            F.read_index(tmp_path / "nope.tsv")

    def test_wrong_field_count(self, tmp_path):
        (tmp_path / "i.tsv").write_text("a.agt1\t0\n")
        with pytest.raises(DataError):
            F.read_index(tmp_path / "i.tsv")

    def test_bad_label(self, tmp_path):
        (tmp_path / "i.tsv").write_text("a.agt1\tx\t-\n")
        with pytest.raises(DataError):
            F.read_index(tmp_path / "i.tsv")
