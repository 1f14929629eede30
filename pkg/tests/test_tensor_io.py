"""
Unit tests for the file formats
"""

import numpy as np
import pytest

from app.exceptions import DataValidationError
from app.schemas import DomainId, GroundTruthRecord, SummaryRecord, SummaryStatus
from app.services.tensor_io import (
    decode_tensor,
    encode_tensor,
    iter_jsonl,
    load_checkpoint,
    load_dataset,
    load_embeddings,
    load_ground_truth,
    load_summaries,
    read_tensor,
    save_checkpoint,
    save_dataset,
    save_embeddings,
    save_ground_truth,
    save_summaries,
    write_jsonl,
    write_tensor,
)
from tests.conftest import make_embedding, make_instance


class TestTensorFormat:
    """Test the binary tensor format"""

    def test_header_layout(self):
        """Test magic, rank and dims precede the payload"""
        data = encode_tensor(np.zeros((2, 3), dtype=np.float32))
        assert data[:4] == b"AMPT"
        assert int.from_bytes(data[4:8], "little") == 2
        assert int.from_bytes(data[8:12], "little") == 2
        assert int.from_bytes(data[12:16], "little") == 3
        assert len(data) == 16 + 6 * 4

    def test_decode_preserves_values(self):
        arr = np.arange(24, dtype=np.float32).reshape(1, 2, 4, 3)
        decoded, end = decode_tensor(encode_tensor(arr))
        assert np.array_equal(decoded, arr)
        assert end == len(encode_tensor(arr))

    def test_scalar_keeps_rank_zero(self):
        """Test a 0-d tensor is written with rank 0 and decoded as a scalar"""
        data = encode_tensor(np.array(0.5, dtype=np.float32))
        assert int.from_bytes(data[4:8], "little") == 0
        assert len(data) == 8 + 4
        decoded, end = decode_tensor(data)
        assert decoded.shape == ()
        assert float(decoded) == 0.5
        assert end == len(data)

    def test_truncated_payload(self, tmp_path):
        """Test a cut-off tensor file is reported as truncated"""
        path = tmp_path / "t.ampt"
        path.write_bytes(encode_tensor(np.ones((4, 4)))[:-3])
        with pytest.raises(DataValidationError, match="unexpected end of file"):
            read_tensor(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.ampt"
        path.write_bytes(b"XXXX" + encode_tensor(np.ones(2))[4:])
        with pytest.raises(DataValidationError, match="bad tensor magic"):
            read_tensor(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataValidationError, match="not found"):
            read_tensor(tmp_path / "absent.ampt")


class TestJsonLines:
    """Test JSONL parsing"""

    def test_line_numbers(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_bytes(b'{"a": 1}\n\n{"a": 2}\n')
        assert [lineno for lineno, _ in iter_jsonl(path)] == [1, 3]

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_bytes(b'{"a": 1}\n{"a": \n{"a": 3}\n')
        with pytest.raises(DataValidationError, match="line 2") as exc:
            list(iter_jsonl(path))
        assert exc.value.line == 2

    def test_truncated_last_line(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_bytes(b'{"a": 1}\n{"a": 2')
        with pytest.raises(DataValidationError, match="unexpected end of file at line 2"):
            list(iter_jsonl(path))


class TestDataset:
    """Test manifest + tensor persistence"""

    def test_save_and_load(self, tmp_path):
        instances = [
            make_instance("p1", "p1-P0", DomainId.P, raw_text="⟨N⟩amber-kettle-001"),
            make_instance("p1", "p1-S0", DomainId.S, num_frames=6, raw_text="okay guys", seed=1),
        ]
        manifest = save_dataset(instances, tmp_path / "train.jsonl")
        assert (tmp_path / "tensors" / "p1-S0.ampt").exists()

        loaded = load_dataset(manifest)
        assert [i.instance_id for i in loaded] == ["p1-P0", "p1-S0"]
        assert loaded[1].domain is DomainId.S
        assert loaded[0].raw_text == "⟨N⟩amber-kettle-001"
        assert np.array_equal(loaded[1].frames, instances[1].frames)

    def test_missing_tensor_names_line(self, tmp_path):
        manifest = save_dataset([make_instance("p1", "p1-P0", DomainId.P)], tmp_path / "m.jsonl")
        (tmp_path / "tensors" / "p1-P0.ampt").unlink()
        with pytest.raises(DataValidationError, match="line 1"):
            load_dataset(manifest)

    def test_empty_product_id_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_tensor(tmp_path / "tensors" / "x.ampt", np.zeros((1, 4, 4, 3)))
        write_jsonl(path, [{"product_id": "", "instance_id": "x", "domain": "P",
                            "frames_file": "tensors/x.ampt", "raw_text": ""}])
        with pytest.raises(DataValidationError, match="product_id empty at line 1"):
            load_dataset(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataValidationError, match="file not found"):
            load_dataset(tmp_path / "nope.jsonl")


class TestEmbeddings:
    """Test embedding files"""

    def test_save_and_load(self, tmp_path):
        records = [make_embedding("p1", "i1", DomainId.P, [1.0, 2.0, 2.0])]
        save_embeddings(records, tmp_path / "e.jsonl")
        loaded = load_embeddings(tmp_path / "e.jsonl")
        assert loaded[0].domain is DomainId.P
        np.testing.assert_allclose(loaded[0].vector, records[0].vector, atol=1e-7)

    def test_many_unit_vectors(self, tmp_path):
        """Test 1000 random unit vectors survive a save/load within 1e-6"""
        rng = np.random.default_rng(0)
        domains = DomainId.ordered()
        records = [make_embedding(f"p{i // 3}", f"i{i}", domains[i % 3], rng.standard_normal(16))
                   for i in range(1000)]
        save_embeddings(records, tmp_path / "e.jsonl")
        loaded = load_embeddings(tmp_path / "e.jsonl")
        assert [r.instance_id for r in loaded] == [r.instance_id for r in records]
        for original, restored in zip(records, loaded):
            assert restored.domain is original.domain
            np.testing.assert_allclose(restored.vector, original.vector, atol=1e-6)

    def test_corrupt_norm(self, tmp_path):
        """Test a vector far from unit norm is rejected with its line"""
        path = tmp_path / "e.jsonl"
        write_jsonl(path, [{"product_id": "p", "instance_id": "i", "domain": "P", "vector": [0.5, 0.5]}])
        with pytest.raises(DataValidationError, match="corrupt embedding file.*line 1"):
            load_embeddings(path)

    def test_small_drift_renormalized(self, tmp_path):
        path = tmp_path / "e.jsonl"
        write_jsonl(path, [{"product_id": "p", "instance_id": "i", "domain": "S", "vector": [1.00001, 0.0]}])
        record = load_embeddings(path)[0]
        assert abs(float(np.linalg.norm(record.vector.astype(np.float64))) - 1.0) < 1e-6


class TestSummariesAndTruth:
    """Test summary and ground-truth files"""

    def test_summaries_keyed_by_instance(self, tmp_path):
        records = [
            SummaryRecord(instance_id="a", product_name="amber-kettle-001", features=["waterproof"],
                          status=SummaryStatus.OK, signal_level=0.12),
            SummaryRecord(instance_id="b", status=SummaryStatus.ASR_MISSING),
        ]
        save_summaries(records, tmp_path / "s.jsonl")
        loaded = load_summaries(tmp_path / "s.jsonl")
        assert loaded["a"].features == ["waterproof"]
        assert loaded["b"].status is SummaryStatus.ASR_MISSING

    def test_invalid_summary_line(self, tmp_path):
        path = tmp_path / "s.jsonl"
        write_jsonl(path, [{"instance_id": "a", "status": "no_output", "signal_level": 0.5}])
        with pytest.raises(DataValidationError, match="line 1"):
            load_summaries(path)

    def test_ground_truth(self, tmp_path):
        save_ground_truth([GroundTruthRecord(product_id="p1", true_name="n", true_attributes=["a"])],
                          tmp_path / "g.jsonl")
        assert load_ground_truth(tmp_path / "g.jsonl")["p1"].true_name == "n"


class TestCheckpoint:
    """Test the checkpoint container"""

    def test_save_and_load(self, tmp_path):
        tensors = {"w": np.ones((2, 3), dtype=np.float32), "t": np.array(0.5, dtype=np.float32)}
        save_checkpoint(tmp_path / "c.ckpt", {"num_classes": 3}, tensors)
        header, loaded = load_checkpoint(tmp_path / "c.ckpt")
        assert header["num_classes"] == 3
        assert [t["name"] for t in header["tensors"]] == ["w", "t"]
        assert loaded["t"].shape == ()
        assert np.array_equal(loaded["w"], tensors["w"])

    def test_bytes_are_stable(self, tmp_path):
        tensors = {"w": np.arange(6, dtype=np.float32)}
        save_checkpoint(tmp_path / "a.ckpt", {"b": 1, "a": [1, 2]}, tensors)
        save_checkpoint(tmp_path / "b.ckpt", {"a": [1, 2], "b": 1}, tensors)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", {}, {"w": np.ones(10, dtype=np.float32)})
        data = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(data[:-8])
        with pytest.raises(DataValidationError, match="unexpected end of file"):
            load_checkpoint(tmp_path / "c.ckpt")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
