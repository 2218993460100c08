"""Merkle tree: prefix roots, inclusion proofs, and leaf binding.

The reference root used here is an independent level-by-level builder (odd
nodes promote unchanged), exercised against the tree's recursive
implementation for every size up to a few hundred leaves.
"""

import hashlib
import random

import pytest

from lskv.merkle import LeafComponents, MerkleTree, fold_proof, proof_from_obj, proof_to_obj
from lskv.types import InvalidArgument


def h(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def reference_root(leaves):
    """Slow level-wise computation: pair up, promote the odd one out."""
    level = list(leaves)
    while len(level) > 1:
        nxt = [h(level[i] + level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def leaves_for(n, seed=0):
    rng = random.Random(seed)
    return [rng.randbytes(32) for _ in range(n)]


def test_single_leaf_root_is_leaf():
    tree = MerkleTree()
    leaf = h(b"only")
    tree.append(leaf)
    assert tree.root() == leaf
    assert tree.proof(0) == []


def test_two_leaf_root_is_pair_hash():
    l1, l2 = h(b"1"), h(b"2")
    tree = MerkleTree()
    tree.append(l1)
    tree.append(l2)
    assert tree.root() == h(l1 + l2)


def test_four_leaf_proofs_have_two_steps():
    tree = MerkleTree()
    for leaf in leaves_for(4):
        tree.append(leaf)
    for i in range(4):
        assert len(tree.proof(i)) == 2


@pytest.mark.parametrize("n", list(range(1, 40)) + [64, 100, 257])
def test_roots_match_reference(n):
    leaves = leaves_for(n, seed=n)
    tree = MerkleTree()
    for leaf in leaves:
        tree.append(leaf)
    assert tree.root() == reference_root(leaves)


def test_every_leaf_proof_folds_to_root_257():
    leaves = leaves_for(257, seed=9)
    tree = MerkleTree()
    for leaf in leaves:
        tree.append(leaf)
    root = tree.root()
    for i, leaf in enumerate(leaves):
        assert fold_proof(leaf, tree.proof(i)) == root


def test_prefix_roots_and_proofs():
    leaves = leaves_for(90, seed=3)
    tree = MerkleTree()
    for leaf in leaves:
        tree.append(leaf)
    for n in (1, 2, 3, 31, 64, 77, 90):
        assert tree.root(n) == reference_root(leaves[:n])
        for i in (0, n // 2, n - 1):
            assert fold_proof(leaves[i], tree.proof(i, n)) == tree.root(n)


def test_truncate_invalidates_suffix():
    leaves = leaves_for(20, seed=4)
    tree = MerkleTree()
    for leaf in leaves:
        tree.append(leaf)
    tree.truncate(11)
    assert tree.size == 11
    assert tree.root() == reference_root(leaves[:11])
    replacement = leaves_for(5, seed=5)
    for leaf in replacement:
        tree.append(leaf)
    assert tree.root() == reference_root(leaves[:11] + replacement)


def test_root_bounds():
    tree = MerkleTree()
    with pytest.raises(InvalidArgument):
        tree.root()
    tree.append(h(b"x"))
    with pytest.raises(InvalidArgument):
        tree.root(2)
    with pytest.raises(InvalidArgument):
        tree.proof(1, 1)


def test_proof_obj_round_trip():
    tree = MerkleTree()
    for leaf in leaves_for(9, seed=6):
        tree.append(leaf)
    proof = tree.proof(4)
    obj = proof_to_obj(proof)
    assert all(len(step) == 1 and set(step) <= {"left", "right"} for step in obj)
    assert proof_from_obj(obj) == proof


def test_leaf_component_binding():
    """Any single-field mutation changes the leaf digest."""
    rng = random.Random(11)
    base = LeafComponents(rng.randbytes(32), "ce:1.1:abcd", rng.randbytes(32))
    seen = {base.leaf_digest()}
    for _ in range(1000):
        field = rng.randrange(3)
        if field == 0:
            mutated = LeafComponents(rng.randbytes(32), base.commit_evidence, base.claims_digest)
        elif field == 1:
            mutated = LeafComponents(
                base.write_set_digest, f"ce:1.1:{rng.randrange(1 << 60):x}", base.claims_digest
            )
        else:
            mutated = LeafComponents(base.write_set_digest, base.commit_evidence, rng.randbytes(32))
        digest = mutated.leaf_digest()
        assert digest != base.leaf_digest()
        assert digest not in seen
        seen.add(digest)


def test_leaf_components_obj_round_trip():
    comp = LeafComponents(h(b"w"), "ce:2.9:00ff", h(b"c"))
    assert LeafComponents.from_obj(comp.to_obj()) == comp
