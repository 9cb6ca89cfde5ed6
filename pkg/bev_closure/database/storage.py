"""
HBST データベースのバイナリ保存と読み込み

全ての整数はリトルエンディアン。末尾の CRC32 はヘッダとペイロード全体にかかる。
"""
import logging
import struct
import zlib
from pathlib import Path
from typing import BinaryIO, List, Tuple, Union

import numpy as np

from bev_closure.database.hbst import (
    DescriptorDatabase,
    HbstInternal,
    HbstLeaf,
    HbstNode,
    MapRecord,
)
from bev_closure.errors import DatabaseError, DatabaseFormatError
from bev_closure.geometry.transforms import SE3
from bev_closure.imaging.features import DESCRIPTOR_BITS, DESCRIPTOR_BYTES, BinaryDescriptor, Keypoint

logger = logging.getLogger(__name__)

MAGIC = b"HBST"
FORMAT_VERSION = 1

HEADER = struct.Struct("<4sHIQQ")
TRAILER = struct.Struct("<I")
NODE_TAG = struct.Struct("<B")
INTERNAL = struct.Struct("<H")
LEAF = struct.Struct("<BI")
DESCRIPTOR = struct.Struct(f"<I{DESCRIPTOR_BYTES}s4d")
CATALOG_COUNT = struct.Struct("<I")
MAP_ENTRY = struct.Struct("<Idqq12dI")
SCAN_ENTRY = struct.Struct("<I12d")

TAG_INTERNAL = 0
TAG_LEAF = 1


def _pose_values(pose: SE3) -> Tuple[float, ...]:
    return tuple(pose.as_matrix()[:3, :].reshape(-1).tolist())


def _pose_from_values(values) -> SE3:
    matrix = np.eye(4)
    matrix[:3, :] = np.asarray(values, dtype=np.float64).reshape(3, 4)
    return SE3.from_matrix(matrix)


def _encode_node(node: HbstNode, chunks: List[bytes]):
    # 再帰の深さはビット数で抑えられる
    if isinstance(node, HbstInternal):
        chunks.append(NODE_TAG.pack(TAG_INTERNAL))
        chunks.append(INTERNAL.pack(node.split_bit))
        _encode_node(node.left, chunks)
        _encode_node(node.right, chunks)
        return
    chunks.append(NODE_TAG.pack(TAG_LEAF))
    chunks.append(LEAF.pack(int(node.overflow), len(node.descriptors)))
    for descriptor in node.descriptors:
        keypoint = descriptor.keypoint
        chunks.append(DESCRIPTOR.pack(
            descriptor.map_index,
            descriptor.bits.tobytes(),
            keypoint.u,
            keypoint.v,
            keypoint.orientation,
            keypoint.response,
        ))


def _encode_catalog(maps, chunks: List[bytes]):
    chunks.append(CATALOG_COUNT.pack(len(maps)))
    for map_index in sorted(maps):
        record = maps[map_index]
        chunks.append(MAP_ENTRY.pack(
            record.map_index,
            record.resolution,
            int(record.origin_cell[0]),
            int(record.origin_cell[1]),
            *_pose_values(record.ground_transform),
            len(record.scan_indices),
        ))
        for scan_index, pose in zip(record.scan_indices, record.scan_poses):
            chunks.append(SCAN_ENTRY.pack(scan_index, *_pose_values(pose)))


def to_bytes(db: DescriptorDatabase) -> bytes:
    chunks: List[bytes] = []
    _encode_node(db.tree.root, chunks)
    _encode_catalog(db.maps, chunks)
    payload = b"".join(chunks)

    header = HEADER.pack(MAGIC, FORMAT_VERSION, db.tree.leaf_capacity, db.tree.size, len(payload))
    body = header + payload
    return body + TRAILER.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, offset: int, end: int):
        self.data = data
        self.offset = offset
        self.end = end

    def read(self, layout: struct.Struct) -> tuple:
        if self.offset + layout.size > self.end:
            raise DatabaseFormatError("truncated file")
        values = layout.unpack_from(self.data, self.offset)
        self.offset += layout.size
        return values


def _decode_node(reader: _Reader, depth: int, used_bits: frozenset, inserted: set) -> HbstNode:
    if depth > DESCRIPTOR_BITS:
        raise DatabaseFormatError("tree deeper than descriptor length")
    (tag,) = reader.read(NODE_TAG)
    if tag == TAG_INTERNAL:
        (split_bit,) = reader.read(INTERNAL)
        if split_bit >= DESCRIPTOR_BITS or split_bit in used_bits:
            raise DatabaseFormatError(f"invalid split bit {split_bit} at depth {depth}")
        used = used_bits | {split_bit}
        left = _decode_node(reader, depth + 1, used, inserted)
        right = _decode_node(reader, depth + 1, used, inserted)
        return HbstInternal(depth=depth, split_bit=split_bit, left=left, right=right)
    if tag != TAG_LEAF:
        raise DatabaseFormatError(f"unknown node tag {tag}")

    overflow, count = reader.read(LEAF)
    leaf = HbstLeaf(depth=depth, used_bits=used_bits, overflow=bool(overflow))
    for _ in range(count):
        map_index, bits, u, v, orientation, response = reader.read(DESCRIPTOR)
        leaf.append(BinaryDescriptor(
            bits=np.frombuffer(bits, dtype=np.uint8).copy(),
            keypoint=Keypoint(u=u, v=v, orientation=orientation, response=response),
            map_index=map_index,
        ))
        inserted.add(map_index)
    return leaf


def _decode_catalog(reader: _Reader) -> dict:
    maps = {}
    (count,) = reader.read(CATALOG_COUNT)
    for _ in range(count):
        values = reader.read(MAP_ENTRY)
        map_index, resolution, origin_x, origin_y = values[:4]
        ground = _pose_from_values(values[4:16])
        scan_count = values[16]
        record = MapRecord(
            map_index=map_index,
            resolution=resolution,
            origin_cell=(origin_x, origin_y),
            ground_transform=ground,
        )
        for _ in range(scan_count):
            scan = reader.read(SCAN_ENTRY)
            record.scan_indices.append(scan[0])
            record.scan_poses.append(_pose_from_values(scan[1:]))
        maps[map_index] = record
    return maps


def from_bytes(data: bytes) -> DescriptorDatabase:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise DatabaseFormatError("bad magic")
    if len(data) < HEADER.size:
        raise DatabaseFormatError("truncated file")
    _, version, leaf_capacity, descriptor_count, payload_length = HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise DatabaseFormatError(f"unsupported version {version}")

    end = HEADER.size + payload_length
    if len(data) < end + TRAILER.size:
        raise DatabaseFormatError("truncated file")
    (stored_crc,) = TRAILER.unpack_from(data, end)
    if zlib.crc32(data[:end]) & 0xFFFFFFFF != stored_crc:
        raise DatabaseFormatError("checksum mismatch")

    reader = _Reader(data, HEADER.size, end)
    inserted: set = set()
    db = DescriptorDatabase(leaf_capacity=leaf_capacity)
    db.tree.root = _decode_node(reader, 0, frozenset(), inserted)
    db.tree.size = descriptor_count
    db.maps = _decode_catalog(reader)
    db._inserted = inserted

    loaded = sum(len(leaf.descriptors) for leaf in db.tree.leaves())
    if loaded != descriptor_count:
        raise DatabaseFormatError(f"descriptor count mismatch: header {descriptor_count}, payload {loaded}")
    if reader.offset != end:
        raise DatabaseFormatError("trailing bytes after payload")
    return db


def save(db: DescriptorDatabase, sink: Union[str, Path, BinaryIO]) -> int:
    data = to_bytes(db)
    if isinstance(sink, (str, Path)):
        path = Path(sink)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        logger.info("Descriptor database saved", extra={
            "path": str(path),
            "descriptors": len(db),
            "maps": len(db.maps),
            "bytes": len(data),
            "event": "database_saved",
        })
    else:
        sink.write(data)
    return len(data)


def load(source: Union[str, Path, BinaryIO]) -> DescriptorDatabase:
    if isinstance(source, (str, Path)):
        if not Path(source).is_file():
            raise DatabaseError(f"database file not found: {source}")
        data = Path(source).read_bytes()
    else:
        data = source.read()
    db = from_bytes(data)
    logger.info("Descriptor database loaded", extra={
        "descriptors": len(db),
        "maps": len(db.maps),
        "event": "database_loaded",
    })
    return db
