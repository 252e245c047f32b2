import struct
from collections import OrderedDict

import numpy as np
import pytest

from wedgefill.core.errors import MissingArtifactError, TensorFormatError
from wedgefill.core.tensor_store import (
    MAGIC,
    ArtifactStore,
    decode_tensors,
    encode_pgm16,
    encode_tensors,
    format_loss_log,
    format_manifest,
    get_store,
    hu_window,
    parse_loss_log,
    parse_manifest,
    read_raw_slice,
    read_tensors,
    write_tensors,
)


class TestTensorContainer:
    """SINOTN01 binary container"""

    def test_round_trip_random_shapes(self, rng):
        """read(write(x)) == x bit-exactly for float32 data of any rank"""
        entries = OrderedDict()
        for index in range(6):
            shape = tuple(int(d) for d in rng.integers(1, 5, size=index % 4))
            entries[f"entry/{index}-ü"] = np.asarray(rng.standard_normal(shape), dtype=np.float32)
        decoded = decode_tensors(encode_tensors(entries))
        assert list(decoded) == list(entries)
        for name, value in entries.items():
            assert decoded[name].shape == value.shape
            assert decoded[name].tobytes() == value.tobytes()

    def test_layout(self):
        """Header arithmetic: magic, count, name, ndim, dims, little-endian float32 payload"""
        data = encode_tensors({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
        expected = (MAGIC + struct.pack("<I", 1) + struct.pack("<I", 2) + b"ab" + struct.pack("<I", 2)
                    + struct.pack("<II", 1, 2) + struct.pack("<ff", 1.0, 2.0))
        assert data == expected

    def test_bad_magic(self):
        with pytest.raises(TensorFormatError, match="magic"):
            decode_tensors(b"NOTATENS" + b"\x00" * 4)

    def test_truncated(self):
        data = encode_tensors({"x": np.zeros((3, 3), dtype=np.float32)})
        with pytest.raises(TensorFormatError, match="truncated"):
            decode_tensors(data[:-4])

    def test_trailing_bytes(self):
        data = encode_tensors({"x": np.zeros(2, dtype=np.float32)})
        with pytest.raises(TensorFormatError, match="trailing"):
            decode_tensors(data + b"\x00")

    def test_duplicate_names_rejected(self):
        """A hand-made container with two equal names is malformed"""
        one = struct.pack("<I", 1) + b"x" + struct.pack("<I", 1) + struct.pack("<I", 1) + struct.pack("<f", 0.0)
        data = MAGIC + struct.pack("<I", 2) + one + one
        with pytest.raises(TensorFormatError, match="duplicate"):
            decode_tensors(data)

    def test_atomic_write_leaves_no_temporaries(self, tmp_path):
        path = tmp_path / "nested" / "a.sinotn"
        write_tensors(path, {"x": np.ones(3)})
        assert read_tensors(path)["x"].tolist() == [1.0, 1.0, 1.0]
        assert [p.name for p in path.parent.iterdir()] == ["a.sinotn"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_tensors(tmp_path / "absent.sinotn")


class TestImageExport:
    """16-bit PGM and raw HU slices"""

    def test_pgm_header(self):
        """Header is exactly 'P5\\n<w> <h>\\n65535\\n'"""
        data = encode_pgm16(np.zeros((3, 5)))
        assert data.startswith(b"P5\n5 3\n65535\n")
        assert len(data) == len(b"P5\n5 3\n65535\n") + 2 * 15

    def test_pgm_linear_big_endian(self):
        """0 -> 0, 1 -> 65535, values outside [0, 1] clipped, samples big-endian"""
        data = encode_pgm16(np.array([[0.0, 1.0, 2.0, -1.0]]))
        samples = np.frombuffer(data[len(b"P5\n4 1\n65535\n"):], dtype=">u2")
        assert samples.tolist() == [0, 65535, 65535, 0]

    def test_pgm_rejects_stacks(self):
        with pytest.raises(TensorFormatError):
            encode_pgm16(np.zeros((2, 3, 3)))

    def test_hu_window(self):
        """-250 HU -> 0, 500 HU -> 1, outside values clipped"""
        values = hu_window(np.array([-1000.0, -250.0, 125.0, 500.0, 3000.0]))
        np.testing.assert_allclose(values, [0.0, 0.0, 0.5, 1.0, 1.0])

    def test_raw_slice(self, tmp_path):
        path = tmp_path / "slice.raw"
        values = np.arange(16, dtype="<f4").reshape(4, 4)
        path.write_bytes(values.tobytes())
        np.testing.assert_array_equal(read_raw_slice(path, 4), values)
        with pytest.raises(TensorFormatError):
            read_raw_slice(path, 5)


class TestManifestsAndLogs:
    """Text artifacts next to every checkpoint"""

    def test_manifest_round_trip(self):
        fields = {"stage": "score", "config_hash": "0123456789abcdef", "seed": 3}
        assert parse_manifest(format_manifest(fields)) == {k: str(v) for k, v in fields.items()}

    def test_loss_log_round_trip(self):
        """Losses are written with repr so they read back exactly"""
        rows = [(1, 0.1), (2, 1.0 / 3.0), (3, 2.5e-9)]
        text = format_loss_log(rows)
        assert text.splitlines()[0] == "step,loss"
        assert parse_loss_log(text) == rows


class TestArtifactStore:
    """Run-directory layout"""

    def test_layout(self, tmp_path):
        store = get_store(tmp_path / "run")
        assert store.run_dir.is_dir()
        assert store.dataset_path == tmp_path / "run" / "dataset" / "dataset.sinotn"
        score = store.stage("score")
        assert score.checkpoint.name == "score.sinotn"
        assert score.loss_log.name == "score_loss.csv"
        assert store.stage("pairs").checkpoint == store.pairs_path

    def test_require_names_producer(self, tmp_path):
        """A missing prerequisite names the stage that produces it"""
        store = ArtifactStore(tmp_path)
        with pytest.raises(MissingArtifactError) as info:
            store.require(store.stage("score").checkpoint, "score")
        assert info.value.exit_code == 3
        assert "run stage 'score' first" in str(info.value)
