import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from bev_closure.errors import DuplicateMapError
from bev_closure.geometry.transforms import SE3
from bev_closure.imaging.features import (
    DESCRIPTOR_BITS,
    BinaryDescriptor,
    Keypoint,
    hamming_to_many,
    stack_bits,
)

logger = logging.getLogger(__name__)

LEAF_CAPACITY = 100
DEFAULT_MATCH_THRESHOLD = 50
DEFAULT_EXCLUDE_RECENT = 1


@dataclass(eq=False)
class HbstLeaf:
    depth: int
    used_bits: FrozenSet[int]
    descriptors: List[BinaryDescriptor] = field(default_factory=list)
    overflow: bool = False
    parent: Optional["HbstInternal"] = field(default=None, repr=False)
    # 分割に失敗した葉はこの件数になるまで分割を試さない
    retry_at: int = 0
    _matrix: Optional[np.ndarray] = None
    _map_indices: Optional[np.ndarray] = None

    def append(self, descriptor: BinaryDescriptor):
        self.descriptors.append(descriptor)
        self._matrix = None
        self._map_indices = None

    def matrix(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._matrix is None:
            self._matrix = stack_bits(self.descriptors)
            self._map_indices = np.array([d.map_index for d in self.descriptors], dtype=np.int64)
        return self._matrix, self._map_indices


@dataclass(eq=False)
class HbstInternal:
    depth: int
    split_bit: int
    left: "HbstNode"
    right: "HbstNode"

    def __post_init__(self):
        for child in (self.left, self.right):
            if isinstance(child, HbstLeaf):
                child.parent = self


HbstNode = Union[HbstInternal, HbstLeaf]


@dataclass
class MatchPair:
    query: Keypoint
    reference: Keypoint
    hamming: int


@dataclass
class MatchVote:
    query_map: int
    reference_map: int
    pairs: List[MatchPair] = field(default_factory=list)


@dataclass(eq=False)
class MapRecord:
    """マルチセッション用に保存する参照マップのメタデータ"""

    map_index: int
    resolution: float
    origin_cell: Tuple[int, int]
    ground_transform: SE3
    scan_indices: List[int] = field(default_factory=list)
    scan_poses: List[SE3] = field(default_factory=list)


def choose_split_bit(bits: np.ndarray, used_bits: FrozenSet[int]) -> Optional[int]:
    """未使用ビットのうち分割が最も均等になるもの（同点は小さい番号）"""
    ones = np.unpackbits(bits, axis=1).sum(axis=0).astype(np.int64)
    count = bits.shape[0]
    imbalance = np.abs(2 * ones - count)
    if used_bits:
        imbalance[list(used_bits)] = count + 1
    # 全要素が同じ値のビットでは分割できない
    imbalance[(ones == 0) | (ones == count)] = count + 1
    best = int(np.argmin(imbalance))
    if imbalance[best] > count:
        return None
    return best


class HbstTree:
    """ハミング距離埋め込み二分探索木。単一葉への降下で近傍を探す"""

    def __init__(self, leaf_capacity: int = LEAF_CAPACITY):
        self.leaf_capacity = leaf_capacity
        self.root: HbstNode = HbstLeaf(depth=0, used_bits=frozenset())
        self.size = 0

    def _descend(self, bits: np.ndarray) -> HbstLeaf:
        node = self.root
        while isinstance(node, HbstInternal):
            bit = (int(bits[node.split_bit >> 3]) >> (7 - (node.split_bit & 7))) & 1
            node = node.right if bit else node.left
        return node

    def add(self, descriptor: BinaryDescriptor):
        leaf = self._descend(descriptor.bits)
        leaf.append(descriptor)
        self.size += 1
        size = len(leaf.descriptors)
        if size > self.leaf_capacity and size >= leaf.retry_at:
            self._split(leaf)

    def _split(self, leaf: HbstLeaf):
        if len(leaf.used_bits) >= DESCRIPTOR_BITS:
            leaf.overflow = True
            leaf.retry_at = 2 * len(leaf.descriptors)
            return
        bits, _ = leaf.matrix()
        split_bit = choose_split_bit(bits, leaf.used_bits)
        if split_bit is None:
            if not leaf.overflow:
                logger.warning("HBST leaf cannot be split, growing beyond capacity", extra={
                    "depth": leaf.depth,
                    "size": len(leaf.descriptors),
                })
            leaf.overflow = True
            leaf.retry_at = 2 * len(leaf.descriptors)
            return

        used = leaf.used_bits | {split_bit}
        left = HbstLeaf(depth=leaf.depth + 1, used_bits=used)
        right = HbstLeaf(depth=leaf.depth + 1, used_bits=used)
        for descriptor in leaf.descriptors:
            if descriptor.bit(split_bit):
                right.append(descriptor)
            else:
                left.append(descriptor)
        self._replace(leaf, HbstInternal(depth=leaf.depth, split_bit=split_bit, left=left, right=right))

        for child in (left, right):
            if len(child.descriptors) > self.leaf_capacity:
                self._split(child)

    def _replace(self, old: HbstLeaf, new: HbstInternal):
        parent = old.parent
        if parent is None:
            self.root = new
        elif parent.left is old:
            parent.left = new
        else:
            parent.right = new

    def leaf_for(self, bits: np.ndarray) -> HbstLeaf:
        return self._descend(bits)

    def nodes(self) -> Iterator[HbstNode]:
        """前順走査"""
        stack: List[HbstNode] = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if isinstance(node, HbstInternal):
                stack.append(node.right)
                stack.append(node.left)

    def internal_nodes(self) -> Iterator[HbstInternal]:
        return (node for node in self.nodes() if isinstance(node, HbstInternal))

    def leaves(self) -> Iterator[HbstLeaf]:
        return (node for node in self.nodes() if isinstance(node, HbstLeaf))

    def depth(self) -> int:
        return max(leaf.depth for leaf in self.leaves())


class DescriptorDatabase:
    def __init__(self, leaf_capacity: int = LEAF_CAPACITY):
        self.tree = HbstTree(leaf_capacity)
        self.maps: Dict[int, MapRecord] = {}
        self._inserted: set = set()

    def __len__(self) -> int:
        return self.tree.size

    @property
    def map_indices(self) -> List[int]:
        return sorted(self._inserted)

    def insert(self, descriptors: Sequence[BinaryDescriptor], record: Optional[MapRecord] = None):
        if record is not None:
            if record.map_index in self.maps:
                raise DuplicateMapError(f"map {record.map_index} already in database")
            self.maps[record.map_index] = record
        if not descriptors:
            return

        map_indices = {d.map_index for d in descriptors}
        if len(map_indices) != 1:
            raise ValueError(f"descriptors of one insertion must share a map index, got {sorted(map_indices)}")
        map_index = map_indices.pop()
        if map_index in self._inserted:
            raise DuplicateMapError(f"map {map_index} already in database")
        self._inserted.add(map_index)

        for descriptor in descriptors:
            self.tree.add(descriptor)

        logger.debug("Descriptors inserted", extra={
            "map_index": map_index,
            "count": len(descriptors),
            "database_size": self.tree.size,
        })

    def query(
        self,
        descriptors: Sequence[BinaryDescriptor],
        tau_match: int = DEFAULT_MATCH_THRESHOLD,
        exclude_recent: Optional[int] = DEFAULT_EXCLUDE_RECENT,
    ) -> List[MatchVote]:
        """
        各クエリ記述子を1つの葉まで降ろし、葉の中で最も近い記述子を候補にする

        exclude_recent が None のときは近傍マップの抑制をしない（別セッションのデータベース向け）。
        """
        if self.tree.size == 0 or not descriptors:
            return []

        votes: Dict[int, MatchVote] = {}
        for descriptor in descriptors:
            leaf = self.tree.leaf_for(descriptor.bits)
            if not leaf.descriptors:
                continue
            stored, map_indices = leaf.matrix()
            distances = hamming_to_many(descriptor.bits, stored).astype(np.int64)
            if exclude_recent is not None:
                suppressed = np.abs(map_indices - descriptor.map_index) <= exclude_recent
                distances[suppressed] = DESCRIPTOR_BITS + 1
            best = int(np.argmin(distances))
            if distances[best] > tau_match:
                continue

            match = leaf.descriptors[best]
            vote = votes.get(match.map_index)
            if vote is None:
                vote = votes[match.map_index] = MatchVote(
                    query_map=descriptor.map_index,
                    reference_map=match.map_index,
                )
            vote.pairs.append(MatchPair(query=descriptor.keypoint, reference=match.keypoint, hamming=int(distances[best])))

        return [votes[key] for key in sorted(votes)]
