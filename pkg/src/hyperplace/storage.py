"""
Binary Storage
Index and feature-grid file formats, dataset directories and storage accounting

Index file (little-endian):
    magic "HVPR" | version u32 | curvature f64 | L u16 | level bitmask u16 |
    D u32 | record count u64
    then per record: id u64 | geotag flag u8 (+ latitude f64, longitude f64) |
    for each stored level ascending, 2^(ℓ−1) descriptors of D float32

Feature-grid file (little-endian):
    magic "HFGR" | version u32 | leaf count u32 | h_f u32 | w_f u32 | C u32
    then the leaf grids in order, float32, row-major
"""

import re
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from loguru import logger

from hyperplace.errors import FormatError, InvalidInputError
from hyperplace.hierarchy import MAX_LEVELS, MIN_LEVELS, DescriptorTree, FeatureGrid, PoolingSpec, window_layout
from hyperplace.hypgeo import BallConfig
from hyperplace.index import DatabaseIndex, PanoramaRecord, PanoramaSource

INDEX_MAGIC = b"HVPR"
INDEX_VERSION = 1
INDEX_HEADER = struct.Struct("<4sIdHHIQ")
RECORD_ID = struct.Struct("<QB")
GEOTAG = struct.Struct("<dd")

GRID_MAGIC = b"HFGR"
GRID_VERSION = 1
GRID_HEADER = struct.Struct("<4sIIIII")

FLOAT32 = np.dtype("<f4")

PANORAMA_FILE = re.compile(r"panorama_(\d+)\.hfgr")
GEOTAGS_CSV = "geotags.csv"
GROUND_TRUTH_CSV = "ground_truth.csv"


def record_payload_bytes(dim: int, stored_levels: Sequence[int]) -> int:
    """
    Descriptor bytes of one record: Σ over stored levels of 2^(ℓ−1)·D·4

    Example:
        >>> record_payload_bytes(2048, (1, 5))  # (1 + 16) descriptors
        139264
    """
    return sum(2 ** (level - 1) for level in set(stored_levels)) * dim * FLOAT32.itemsize


def index_storage_bytes(index: DatabaseIndex) -> int:
    """Exact size of the persisted index file"""
    payload = record_payload_bytes(index.config.dim, index.stored_levels)
    per_record = sum(RECORD_ID.size + payload + (0 if r.geotag is None else GEOTAG.size) for r in index.records)
    return INDEX_HEADER.size + per_record


def encode_index(index: DatabaseIndex) -> bytes:
    bitmask = sum(1 << (level - 1) for level in index.stored_levels)
    chunks = [
        INDEX_HEADER.pack(
            INDEX_MAGIC, INDEX_VERSION, index.config.curvature, index.depth, bitmask, index.config.dim, len(index)
        )
    ]
    for record in index.records:
        chunks.append(RECORD_ID.pack(record.id, 0 if record.geotag is None else 1))
        if record.geotag is not None:
            chunks.append(GEOTAG.pack(*record.geotag))
        for level in index.stored_levels:
            chunks.append(record.tree.level(level).astype(FLOAT32).tobytes())
    return b"".join(chunks)


def decode_index(data: bytes) -> DatabaseIndex:
    """
    Parse an index file, failing closed

    Raises:
        FormatError: bad magic, version or header field, truncation, ids out of
            order, non-finite or out-of-ball descriptors, or trailing bytes;
            the error carries the byte offset of the problem
    """
    if len(data) < INDEX_HEADER.size:
        raise FormatError("truncated index header", len(data))
    magic, version, curvature, depth, bitmask, dim, count = INDEX_HEADER.unpack_from(data, 0)
    if magic != INDEX_MAGIC:
        raise FormatError(f"bad index magic {magic!r}", 0)
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}", 4)
    if not np.isfinite(curvature) or curvature <= 0.0:
        raise FormatError(f"invalid curvature {curvature}", 8)
    if not MIN_LEVELS <= depth <= MAX_LEVELS:
        raise FormatError(f"invalid level count {depth}", 16)
    stored = tuple(level for level in range(1, 17) if bitmask >> (level - 1) & 1)
    if not stored or stored[-1] > depth:
        raise FormatError(f"level bitmask {bitmask:#06x} does not fit {depth} levels", 18)
    if dim == 0:
        raise FormatError("descriptor dimension is zero", 20)

    config = BallConfig(curvature=curvature, dim=dim)
    payload = record_payload_bytes(dim, stored)
    offset = INDEX_HEADER.size
    if count * (RECORD_ID.size + payload) > len(data) - offset:
        raise FormatError(f"file too short for {count} records", len(data))

    records = []
    previous_id = -1
    for _ in range(count):
        if offset + RECORD_ID.size > len(data):
            raise FormatError("truncated record header", offset)
        record_id, flag = RECORD_ID.unpack_from(data, offset)
        if record_id <= previous_id:
            raise FormatError(f"record id {record_id} is not in ascending order", offset)
        if flag > 1:
            raise FormatError(f"invalid geotag flag {flag}", offset + 8)
        offset += RECORD_ID.size
        geotag = None
        if flag:
            if offset + GEOTAG.size > len(data):
                raise FormatError("truncated geotag", offset)
            geotag = GEOTAG.unpack_from(data, offset)
            if not all(np.isfinite(geotag)):
                raise FormatError("non-finite geotag", offset)
            offset += GEOTAG.size
        levels = {}
        for level in stored:
            rows = 2 ** (level - 1)
            size = rows * dim * FLOAT32.itemsize
            if offset + size > len(data):
                raise FormatError(f"truncated level-{level} descriptors of record {record_id}", offset)
            points = np.frombuffer(data, dtype=FLOAT32, count=rows * dim, offset=offset).astype(np.float64)
            points = points.reshape(rows, dim)
            if not np.all(np.isfinite(points)) or np.any(config.sqrt_c * np.linalg.norm(points, axis=-1) >= 1.0):
                raise FormatError(f"record {record_id} has level-{level} descriptors outside the ball", offset)
            levels[level] = points
            offset += size
        records.append(PanoramaRecord(record_id, DescriptorTree(depth, config, levels), geotag))
        previous_id = record_id
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after the last record", offset)
    return DatabaseIndex(config, window_layout(depth), stored, tuple(records))


def persist_index(index: DatabaseIndex, path: Path | str) -> int:
    """Write the index file; returns the number of bytes written"""
    path = Path(path)
    data = encode_index(index)
    path.write_bytes(data)
    logger.success(f"Index persisted | path={path}, records={len(index)}, bytes={len(data)}")
    return len(data)


def load_index(path: Path | str) -> DatabaseIndex:
    path = Path(path)
    index = decode_index(path.read_bytes())
    logger.success(
        f"Index loaded | path={path}, records={len(index)}, levels={index.depth}, "
        f"stored={list(index.stored_levels)}, dim={index.config.dim}"
    )
    return index


def pooling_sidecar(index_path: Path | str) -> Path:
    """`<index>.pooling.json` next to the index file"""
    index_path = Path(index_path)
    return index_path.with_name(index_path.name + ".pooling.json")


def write_pooling_spec(spec: PoolingSpec, index_path: Path | str) -> Path:
    path = pooling_sidecar(index_path)
    path.write_text(spec.model_dump_json(indent=2))
    return path


def read_pooling_spec(index_path: Path | str) -> PoolingSpec | None:
    path = pooling_sidecar(index_path)
    if not path.exists():
        return None
    return PoolingSpec.model_validate_json(path.read_text())


def encode_grids(grids: Sequence[FeatureGrid]) -> bytes:
    if not grids:
        raise InvalidInputError("a grid file needs at least one leaf grid")
    shape = grids[0].values.shape
    if any(grid.values.shape != shape for grid in grids):
        raise InvalidInputError("all leaf grids of a file must share one shape")
    header = GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, len(grids), *shape)
    body = np.stack([grid.values for grid in grids]).astype(FLOAT32)
    return header + body.tobytes()


def decode_grids(data: bytes) -> list[FeatureGrid]:
    if len(data) < GRID_HEADER.size:
        raise FormatError("truncated feature-grid header", len(data))
    magic, version, leaves, height, width, channels = GRID_HEADER.unpack_from(data, 0)
    if magic != GRID_MAGIC:
        raise FormatError(f"bad feature-grid magic {magic!r}", 0)
    if version != GRID_VERSION:
        raise FormatError(f"unsupported feature-grid version {version}", 4)
    if min(leaves, height, width, channels) == 0:
        raise FormatError("feature-grid header has a zero extent", 8)
    expected = GRID_HEADER.size + leaves * height * width * channels * FLOAT32.itemsize
    if len(data) < expected:
        raise FormatError("truncated feature-grid values", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after the grid values", expected)
    values = np.frombuffer(data, dtype=FLOAT32, offset=GRID_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise FormatError("feature grid contains non-finite values", GRID_HEADER.size)
    values = values.reshape(leaves, height, width, channels)
    return [FeatureGrid(leaf) for leaf in values]


def write_grids(path: Path | str, grids: Sequence[FeatureGrid]) -> None:
    Path(path).write_bytes(encode_grids(grids))


def read_grids(path: Path | str) -> list[FeatureGrid]:
    return decode_grids(Path(path).read_bytes())


def read_query_grid(path: Path | str) -> FeatureGrid:
    """A query file is a grid file holding exactly one leaf"""
    grids = read_grids(path)
    if len(grids) != 1:
        raise FormatError(f"query file holds {len(grids)} grids, expected 1", 8)
    return grids[0]


def read_panorama_dir(features_dir: Path | str) -> list[PanoramaSource]:
    """
    Panorama sources from `panorama_<id>.hfgr` files, ascending id

    Geotags are taken from `geotags.csv` (id, latitude, longitude) when present.
    """
    features_dir = Path(features_dir)
    if not features_dir.is_dir():
        raise FileNotFoundError(f"feature directory {features_dir} does not exist")
    geotags: dict[int, tuple[float, float]] = {}
    csv_path = features_dir / GEOTAGS_CSV
    if csv_path.exists():
        frame = pd.read_csv(csv_path)
        geotags = {
            int(row.id): (float(row.latitude), float(row.longitude)) for row in frame.itertuples(index=False)
        }
    sources = []
    for path in sorted(features_dir.iterdir()):
        match = PANORAMA_FILE.fullmatch(path.name)
        if match is None:
            continue
        panorama_id = int(match.group(1))
        sources.append(PanoramaSource(panorama_id, read_grids(path), geotags.get(panorama_id)))
    sources.sort(key=lambda source: source.id)
    logger.info(f"Panoramas read | dir={features_dir}, count={len(sources)}, geotagged={len(geotags)}")
    return sources


def read_ground_truth(queries_dir: Path | str) -> pd.DataFrame:
    """`ground_truth.csv` with columns query, panorama_id, leaf"""
    path = Path(queries_dir) / GROUND_TRUTH_CSV
    if not path.exists():
        raise FileNotFoundError(f"ground truth {path} does not exist")
    return pd.read_csv(path)
