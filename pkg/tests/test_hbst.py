import numpy as np
import pytest

from bev_closure.database import hbst
from bev_closure.database.hbst import (
    LEAF_CAPACITY,
    DescriptorDatabase,
    HbstInternal,
    HbstTree,
    MapRecord,
    choose_split_bit,
)
from bev_closure.errors import DuplicateMapError
from bev_closure.geometry.transforms import SE3
from bev_closure.imaging.features import DESCRIPTOR_BITS, DESCRIPTOR_BYTES, BinaryDescriptor, Keypoint


def make_descriptors(bits: np.ndarray, map_index: int, offset: int = 0):
    return [
        BinaryDescriptor(bits=row, keypoint=Keypoint(float(offset + k), 0.0, 0.0, 1.0), map_index=map_index)
        for k, row in enumerate(bits)
    ]


def random_bits(rng, count: int) -> np.ndarray:
    return rng.integers(0, 256, size=(count, DESCRIPTOR_BYTES), dtype=np.uint8)


def flip_bits(rng, bits: np.ndarray, count: int) -> np.ndarray:
    flags = np.unpackbits(bits)
    positions = rng.choice(DESCRIPTOR_BITS, size=count, replace=False)
    flags[positions] ^= 1
    return np.packbits(flags)


def brute_force(query: np.ndarray, stored: np.ndarray) -> np.ndarray:
    return np.unpackbits(np.bitwise_xor(stored, query[None, :]), axis=1).sum(axis=1)


def pair_by_query(votes):
    """クエリのキーポイント u を番号として (参照マップ, ペア) を引く"""
    return {int(pair.query.u): (vote.reference_map, pair) for vote in votes for pair in vote.pairs}


def test_hundred_descriptors_stay_in_one_leaf(rng):
    db = DescriptorDatabase()
    db.insert(make_descriptors(random_bits(rng, LEAF_CAPACITY), 0))
    assert len(list(db.tree.leaves())) == 1
    assert len(db) == 100


def test_split_on_most_balanced_bit():
    bits = np.zeros((101, DESCRIPTOR_BYTES), dtype=np.uint8)
    bits[50:, 0] = 0b00000001  # ビット7
    db = DescriptorDatabase()
    db.insert(make_descriptors(bits, 0))

    assert isinstance(db.tree.root, HbstInternal)
    assert db.tree.root.split_bit == 7
    assert len(db.tree.root.left.descriptors) == 50
    assert len(db.tree.root.right.descriptors) == 51


def test_split_ties_go_to_lowest_bit():
    bits = np.zeros((4, DESCRIPTOR_BYTES), dtype=np.uint8)
    bits[:2, 3] = 0xFF
    bits[:2, 1] = 0x01
    assert choose_split_bit(bits, frozenset()) == 15
    assert choose_split_bit(bits, frozenset({15})) == 24


def test_constant_leaf_overflows():
    bits = np.tile(np.arange(DESCRIPTOR_BYTES, dtype=np.uint8), (150, 1))
    tree = HbstTree()
    for descriptor in make_descriptors(bits, 0):
        tree.add(descriptor)
    (leaf,) = list(tree.leaves())
    assert leaf.overflow
    assert len(leaf.descriptors) == 150


def test_overflow_leaf_retries_split_only_after_doubling(monkeypatch):
    stacked = []
    original = hbst.stack_bits

    def counting(descriptors):
        stacked.append(len(descriptors))
        return original(descriptors)

    monkeypatch.setattr(hbst, "stack_bits", counting)
    constant = np.tile(np.arange(DESCRIPTOR_BYTES, dtype=np.uint8), (1000, 1))
    tree = HbstTree()
    for descriptor in make_descriptors(constant, 0):
        tree.add(descriptor)
    assert stacked == [101, 202, 404, 808]

    # 異なる記述子が増えれば倍になった時点で分割される
    varied = constant[:616].copy()
    varied[:, 0] ^= 0x80
    for descriptor in make_descriptors(varied, 1):
        tree.add(descriptor)
    assert isinstance(tree.root, HbstInternal)
    assert tree.root.split_bit == 0


def test_leaves_know_their_parent(rng):
    db = DescriptorDatabase()
    for m in range(5):
        db.insert(make_descriptors(random_bits(rng, 300), m))
    for leaf in db.tree.leaves():
        assert leaf in (leaf.parent.left, leaf.parent.right)


def test_empty_insert_leaves_tree_unchanged():
    db = DescriptorDatabase()
    db.insert([])
    assert len(db) == 0
    assert db.map_indices == []
    assert db.query(make_descriptors(np.zeros((1, DESCRIPTOR_BYTES), dtype=np.uint8), 5)) == []


def test_duplicate_map_rejected(rng):
    db = DescriptorDatabase()
    db.insert(make_descriptors(random_bits(rng, 3), 0))
    with pytest.raises(DuplicateMapError):
        db.insert(make_descriptors(random_bits(rng, 3), 0))


def test_duplicate_record_rejected():
    db = DescriptorDatabase()
    record = MapRecord(map_index=2, resolution=0.5, origin_cell=(0, 0), ground_transform=SE3.identity())
    db.insert([], record)
    with pytest.raises(DuplicateMapError):
        db.insert([], record)
    assert 2 in db.maps


def test_mixed_map_indices_rejected(rng):
    descs = make_descriptors(random_bits(rng, 2), 0) + make_descriptors(random_bits(rng, 2), 1)
    with pytest.raises(ValueError):
        DescriptorDatabase().insert(descs)


def test_exact_match_and_threshold(rng):
    stored = random_bits(rng, 1)
    db = DescriptorDatabase()
    db.insert(make_descriptors(stored, 0))

    (vote,) = db.query(make_descriptors(stored.copy(), 5))
    assert vote.reference_map == 0 and vote.query_map == 5
    assert vote.pairs[0].hamming == 0

    at_50 = flip_bits(rng, stored[0], 50)[None, :]
    at_51 = flip_bits(rng, stored[0], 51)[None, :]
    assert db.query(make_descriptors(at_50, 5), tau_match=50)[0].pairs[0].hamming == 50
    assert db.query(make_descriptors(at_51, 5), tau_match=50) == []


def test_recent_maps_are_suppressed(rng):
    stored = random_bits(rng, 1)
    db = DescriptorDatabase()
    db.insert(make_descriptors(stored, 3))

    assert db.query(make_descriptors(stored.copy(), 4), exclude_recent=1) == []
    assert db.query(make_descriptors(stored.copy(), 3), exclude_recent=0) == []
    assert len(db.query(make_descriptors(stored.copy(), 5), exclude_recent=1)) == 1
    assert len(db.query(make_descriptors(stored.copy(), 4), exclude_recent=None)) == 1


def test_suppressed_maps_fall_back_to_older_ones(rng):
    stored = random_bits(rng, 2)
    db = DescriptorDatabase()
    db.insert(make_descriptors(stored[:1], 0))
    db.insert(make_descriptors(stored[:1].copy(), 9))
    (vote,) = db.query(make_descriptors(stored[:1].copy(), 10), exclude_recent=1)
    assert vote.reference_map == 0


def test_votes_grouped_and_sorted_by_reference_map(rng):
    db = DescriptorDatabase()
    stored = {m: random_bits(rng, 5) for m in (4, 1, 7)}
    for m, bits in stored.items():
        db.insert(make_descriptors(bits, m))
    queries = np.vstack([stored[7][:2], stored[1][:3]])
    votes = db.query(make_descriptors(queries, 20))
    assert [v.reference_map for v in votes] == [1, 7]
    assert [len(v.pairs) for v in votes] == [3, 2]


def test_single_leaf_equals_brute_force(rng):
    db = DescriptorDatabase()
    stored = random_bits(rng, 100)
    for m in range(5):
        db.insert(make_descriptors(stored[20 * m:20 * (m + 1)], m, offset=20 * m))
    assert len(list(db.tree.leaves())) == 1

    queries = random_bits(rng, 10000)
    found = pair_by_query(db.query(make_descriptors(queries, 100), tau_match=DESCRIPTOR_BITS))
    assert len(found) == len(queries)
    for k, query in enumerate(queries):
        distances = brute_force(query, stored)
        reference_map, pair = found[k]
        assert pair.hamming == min(distances)
        assert distances[int(pair.reference.u)] == pair.hamming
        assert reference_map == int(pair.reference.u) // 20


def test_tree_structure_invariants(rng):
    db = DescriptorDatabase()
    for m in range(20):
        db.insert(make_descriptors(random_bits(rng, 250), m))

    def walk(node, path):
        if isinstance(node, HbstInternal):
            assert node.split_bit not in path
            walk(node.left, path | {node.split_bit})
            walk(node.right, path | {node.split_bit})
        else:
            assert node.used_bits == path
            assert node.overflow or len(node.descriptors) <= LEAF_CAPACITY

    walk(db.tree.root, frozenset())
    assert db.tree.depth() <= DESCRIPTOR_BITS
    assert sum(len(leaf.descriptors) for leaf in db.tree.leaves()) == len(db) == 5000
    for leaf in db.tree.leaves():
        for descriptor in leaf.descriptors:
            assert db.tree.leaf_for(descriptor.bits) is leaf


def test_approximate_recall_against_brute_force(rng):
    stored = random_bits(rng, 10000)
    db = DescriptorDatabase()
    for m in range(10):
        db.insert(make_descriptors(stored[1000 * m:1000 * (m + 1)], m, offset=1000 * m))

    sources = rng.choice(len(stored), size=300, replace=False)
    queries = np.stack([flip_bits(rng, stored[s], int(rng.integers(0, 26))) for s in sources])
    found = pair_by_query(db.query(make_descriptors(queries, 100), tau_match=DESCRIPTOR_BITS))

    hits = eligible = 0
    for k, query in enumerate(queries):
        minimum = int(brute_force(query, stored).min())
        if k in found:
            assert found[k][1].hamming >= minimum
        if minimum <= 25:
            eligible += 1
            hits += int(k in found and found[k][1].hamming == minimum)
    # 単一葉への降下の再現率。経路上のビットが反転すると取りこぼす
    # 実測 0.68 から 2% 下を下限に固定
    assert eligible == len(queries)
    assert hits / eligible >= 0.66
