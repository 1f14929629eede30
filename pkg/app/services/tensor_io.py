"""
TriDomain Retrieval - File Formats
Binary tensors, JSONL manifests, embedding/summary/ground-truth files and checkpoints
"""

import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np
import orjson
from pydantic import ValidationError

from app.exceptions import DataValidationError
from app.schemas import (
    DomainId,
    EmbeddingRecord,
    GroundTruthRecord,
    ProductInstance,
    SummaryRecord,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TENSOR_MAGIC = b"AMPT"
TENSOR_SUFFIX = ".ampt"
MANIFEST_FIELDS = ("product_id", "instance_id", "domain", "frames_file", "raw_text")

# Records whose norm drifts beyond this are treated as corrupt
EMBEDDING_NORM_TOLERANCE = 1e-4


# =============================================================================
# Binary Tensor Format
# =============================================================================
# "AMPT" | u32 LE rank | rank x u32 LE dims | row-major float32 LE payload

def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize an array into the binary tensor format"""
    arr = np.asarray(array, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buffer: bytes, offset: int = 0, source: str = "<buffer>") -> Tuple[np.ndarray, int]:
    """
    Parse one tensor starting at offset

    Returns:
        (array, offset just past the payload)
    """
    if len(buffer) < offset + 8:
        raise DataValidationError(f"unexpected end of file: {source}", path=source)
    if buffer[offset:offset + 4] != TENSOR_MAGIC:
        raise DataValidationError(f"bad tensor magic in {source}", path=source)
    (rank,) = struct.unpack_from("<I", buffer, offset + 4)
    dims_end = offset + 8 + 4 * rank
    if len(buffer) < dims_end:
        raise DataValidationError(f"unexpected end of file: {source}", path=source)
    shape = struct.unpack_from(f"<{rank}I", buffer, offset + 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = dims_end + 4 * count
    if len(buffer) < end:
        raise DataValidationError(f"unexpected end of file: {source}", path=source)
    arr = np.frombuffer(buffer, dtype="<f4", count=count, offset=dims_end)
    return arr.reshape(shape).astype(np.float32), end


def write_tensor(path: PathLike, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))


def read_tensor(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"tensor file not found: {path}", path=str(path))
    array, _ = decode_tensor(path.read_bytes(), source=str(path))
    return array


# =============================================================================
# JSON Lines
# =============================================================================

def _dump_line(record: Dict[str, Any]) -> bytes:
    return orjson.dumps(record) + b"\n"


def write_jsonl(path: PathLike, records: Sequence[Dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(_dump_line(r) for r in records))


def iter_jsonl(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """
    Yield (1-based line number, record) pairs, skipping blank lines

    A final line without its newline that fails to parse is reported
    as a truncated file rather than a malformed record.
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"file not found: {path}", path=str(path))

    data = path.read_bytes()
    lines = data.split(b"\n")
    truncated = bool(data) and not data.endswith(b"\n")

    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = orjson.loads(line)
        except orjson.JSONDecodeError as e:
            if truncated and lineno == len(lines):
                raise DataValidationError(
                    f"unexpected end of file at line {lineno}: {path}", path=str(path), line=lineno
                ) from e
            raise DataValidationError(
                f"malformed record at line {lineno}: {e}", path=str(path), line=lineno
            ) from e
        if not isinstance(record, dict):
            raise DataValidationError(
                f"malformed record at line {lineno}: expected an object", path=str(path), line=lineno
            )
        yield lineno, record


def describe_validation_error(error: ValidationError) -> str:
    """First pydantic error as 'field message'"""
    first = error.errors()[0]
    message = str(first.get("msg", "invalid value")).removeprefix("Value error, ")
    field = ".".join(str(part) for part in first.get("loc", ()))
    if field and field not in message:
        message = f"{field}: {message}"
    return message


def _require_fields(record: Dict[str, Any], fields: Sequence[str], path: Path, lineno: int) -> None:
    for name in fields:
        if name not in record:
            raise DataValidationError(f"{name} missing at line {lineno}", path=str(path), line=lineno)


# =============================================================================
# Dataset Manifest
# =============================================================================

def save_dataset(instances: Sequence[ProductInstance], manifest_path: PathLike,
                 tensor_dir: str = "tensors") -> Path:
    """
    Write frame tensors as sidecar files and a JSONL manifest next to them

    Args:
        instances: Instances to persist, in manifest order
        manifest_path: Destination manifest file
        tensor_dir: Sidecar directory, relative to the manifest

    Returns:
        Path of the manifest
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    rows = []
    for inst in instances:
        rel = f"{tensor_dir}/{inst.instance_id}{TENSOR_SUFFIX}"
        write_tensor(base / rel, inst.frames)
        rows.append({
            "product_id": inst.product_id,
            "instance_id": inst.instance_id,
            "domain": inst.domain.value,
            "frames_file": rel,
            "raw_text": inst.raw_text,
        })
    write_jsonl(manifest_path, rows)
    logger.info(f"✓ Saved {len(rows)} instances to {manifest_path}")
    return manifest_path


def load_dataset(path: PathLike) -> List[ProductInstance]:
    """Load a manifest and its tensors, validating every instance"""
    path = Path(path)
    base = path.parent
    instances: List[ProductInstance] = []

    for lineno, record in iter_jsonl(path):
        _require_fields(record, MANIFEST_FIELDS, path, lineno)
        frames_path = base / str(record["frames_file"])
        if not frames_path.exists():
            raise DataValidationError(
                f"tensor file not found: {frames_path} (line {lineno})", path=str(frames_path), line=lineno
            )
        frames = read_tensor(frames_path)
        try:
            instances.append(ProductInstance(
                product_id=record["product_id"],
                instance_id=record["instance_id"],
                domain=record["domain"],
                frames=frames,
                raw_text=record["raw_text"],
            ))
        except ValidationError as e:
            raise DataValidationError(
                f"{describe_validation_error(e)} at line {lineno}", path=str(path), line=lineno
            ) from e

    logger.debug(f"Loaded {len(instances)} instances from {path}")
    return instances


# =============================================================================
# Embeddings
# =============================================================================

def save_embeddings(records: Sequence[EmbeddingRecord], path: PathLike) -> None:
    write_jsonl(path, [
        {
            "product_id": r.product_id,
            "instance_id": r.instance_id,
            "domain": r.domain.value,
            "vector": r.vector.tolist(),
        }
        for r in records
    ])
    logger.info(f"✓ Saved {len(records)} embeddings to {path}")


def load_embeddings(path: PathLike) -> List[EmbeddingRecord]:
    path = Path(path)
    records: List[EmbeddingRecord] = []

    for lineno, record in iter_jsonl(path):
        _require_fields(record, ("product_id", "instance_id", "domain", "vector"), path, lineno)
        vector = np.asarray(record["vector"], dtype=np.float64)
        norm = float(np.linalg.norm(vector)) if vector.ndim == 1 and vector.size else 0.0
        if not np.isfinite(norm) or abs(norm - 1.0) > EMBEDDING_NORM_TOLERANCE:
            raise DataValidationError(
                f"corrupt embedding file: vector norm {norm:.6f} at line {lineno}", path=str(path), line=lineno
            )
        try:
            if abs(norm - 1.0) > 1e-6:
                rec = EmbeddingRecord.from_unnormalized(
                    record["product_id"], record["instance_id"], DomainId(record["domain"]), vector
                )
            else:
                rec = EmbeddingRecord(
                    product_id=record["product_id"], instance_id=record["instance_id"],
                    domain=record["domain"], vector=vector.astype(np.float32),
                )
        except (ValidationError, ValueError) as e:
            detail = describe_validation_error(e) if isinstance(e, ValidationError) else str(e)
            raise DataValidationError(f"{detail} at line {lineno}", path=str(path), line=lineno) from e
        records.append(rec)

    return records


# =============================================================================
# Summaries and Ground Truth
# =============================================================================

def save_summaries(records: Sequence[SummaryRecord], path: PathLike) -> None:
    write_jsonl(path, [r.model_dump(mode="json") for r in records])
    logger.info(f"✓ Saved {len(records)} summaries to {path}")


def load_summaries(path: PathLike) -> Dict[str, SummaryRecord]:
    """Summaries keyed by instance_id"""
    path = Path(path)
    summaries: Dict[str, SummaryRecord] = {}
    for lineno, record in iter_jsonl(path):
        _require_fields(record, ("instance_id", "status"), path, lineno)
        try:
            summary = SummaryRecord.model_validate(record)
        except ValidationError as e:
            raise DataValidationError(
                f"{describe_validation_error(e)} at line {lineno}", path=str(path), line=lineno
            ) from e
        summaries[summary.instance_id] = summary
    return summaries


def save_ground_truth(records: Sequence[GroundTruthRecord], path: PathLike) -> None:
    write_jsonl(path, [r.model_dump(mode="json") for r in records])


def load_ground_truth(path: PathLike) -> Dict[str, GroundTruthRecord]:
    """Ground truth keyed by product_id"""
    path = Path(path)
    truth: Dict[str, GroundTruthRecord] = {}
    for lineno, record in iter_jsonl(path):
        try:
            gt = GroundTruthRecord.model_validate(record)
        except ValidationError as e:
            raise DataValidationError(
                f"{describe_validation_error(e)} at line {lineno}", path=str(path), line=lineno
            ) from e
        truth[gt.product_id] = gt
    return truth


# =============================================================================
# Checkpoints
# =============================================================================
# u32 LE header length | JSON header | tensors in header["tensors"] order

def save_checkpoint(path: PathLike, header: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> Path:
    """
    Write a checkpoint: JSON header (config + named-tensor index) then tensors

    Tensor order follows the dict order, recorded in the header index.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = [{"name": name, "shape": list(np.shape(arr))} for name, arr in tensors.items()]
    header_bytes = orjson.dumps({**header, "tensors": index}, option=orjson.OPT_SORT_KEYS)
    payload = b"".join(encode_tensor(arr) for arr in tensors.values())
    path.write_bytes(struct.pack("<I", len(header_bytes)) + header_bytes + payload)
    logger.info(f"✓ Checkpoint written: {path} ({len(index)} tensors)")
    return path


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"checkpoint not found: {path}", path=str(path))
    data = path.read_bytes()
    if len(data) < 4:
        raise DataValidationError(f"unexpected end of file: {path}", path=str(path))
    (header_len,) = struct.unpack_from("<I", data, 0)
    if len(data) < 4 + header_len:
        raise DataValidationError(f"unexpected end of file: {path}", path=str(path))
    try:
        header = orjson.loads(data[4:4 + header_len])
    except orjson.JSONDecodeError as e:
        raise DataValidationError(f"corrupt checkpoint header: {path}", path=str(path)) from e

    tensors: Dict[str, np.ndarray] = {}
    offset = 4 + header_len
    for entry in header.get("tensors", []):
        array, offset = decode_tensor(data, offset, source=str(path))
        if list(array.shape) != list(entry["shape"]):
            raise DataValidationError(f"tensor {entry['name']} shape mismatch in {path}", path=str(path))
        tensors[entry["name"]] = array
    return header, tensors
