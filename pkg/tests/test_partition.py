"""Modular-shift transversal partitions of masked index sets."""

import itertools

import pytest

from mwdml.arrays import ArrayError, Shape, lattice_size, nonzero_masks
from mwdml.partition import build_transversal_partition, verify_partition, write_partition_csv

# hand-computed groups for N=(3,2), e=(1,1): 3 groups of size n=min(3,2)=2
GROUPS_3X2 = (
    ((1, 1), (2, 2)),
    ((2, 1), (3, 2)),
    ((3, 1), (1, 2)),
)


def test_three_by_two_full_mask():
    p = build_transversal_partition((3, 2), (1, 1))
    assert p.groups == GROUPS_3X2
    assert verify_partition(p).ok


def test_singleton_mask_single_group():
    p = build_transversal_partition((3, 2), (1, 0))
    assert p.groups == (((1, 0), (2, 0), (3, 0)),)
    assert verify_partition(p).ok


def test_masked_out_coordinates_are_zero():
    p = build_transversal_partition((4, 3, 5), (1, 0, 1))
    assert len(p.groups) == 5  # |I_e| / n_e = 20 / 4
    assert all(len(g) == 4 for g in p.groups)
    assert all(cell[1] == 0 for g in p.groups for cell in g)
    assert verify_partition(p).ok


def test_group_members_share_no_support_coordinate():
    # the property that makes group members i.i.d.
    shape = Shape((5, 3, 4))
    for e in nonzero_masks(3):
        p = build_transversal_partition(shape, e)
        for grp in p.groups:
            for a, b in itertools.combinations(grp, 2):
                for k, bit in enumerate(e):
                    if bit:
                        assert a[k] != b[k]


def test_counts_match_lattice_size():
    shape = Shape((4, 2, 3))
    for e in nonzero_masks(3):
        p = build_transversal_partition(shape, e)
        n_e = min(shape.dims[k] for k, b in enumerate(e) if b)
        assert len(p.groups) * n_e == lattice_size(shape, e)


def test_dimension_one_edge_case():
    p = build_transversal_partition((1, 4), (1, 1))
    assert len(p.groups) == 4
    assert all(len(g) == 1 for g in p.groups)
    assert verify_partition(p).ok


def test_verifier_catches_corruption():
    p = build_transversal_partition((3, 2), (1, 1))
    bad = p.__class__(p.shape, p.mask, (p.groups[0], p.groups[0], p.groups[2]))
    rep = verify_partition(bad)
    assert not rep.covers
    assert not rep.disjoint
    assert not rep.ok


def test_invalid_inputs():
    with pytest.raises(ArrayError):
        build_transversal_partition((3, 2), (0, 0))
    with pytest.raises(ArrayError):
        build_transversal_partition((3, 2), (1, 0, 1))


def test_partition_csv(tmp_path):
    p = build_transversal_partition((3, 2), (1, 1))
    path = tmp_path / "partition.csv"
    write_partition_csv(p, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "group_id,i_1,i_2"
    assert lines[1] == "1,1,1"
    assert lines[2] == "1,2,2"
    assert len(lines) == 7
