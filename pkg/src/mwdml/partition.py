"""Transversal partition of a masked index set.

For a nonzero mask e, the index set I_{N,e} = {i & e : i in [N]} can be split
into |I_{N,e}| / n_e groups of size n_e = min_{k in supp(e)} N_k such that any
two members of a group differ in *every* coordinate of supp(e).  Cells within
a group are therefore i.i.d. under the latent-factor representation, which is
what reduces multiway maximal inequalities to i.i.d. ones.

The construction works on supp(e) coordinates sorted by non-increasing size
(N_1 >= ... >= N_m): group labels g range over [N_1] x ... x [N_{m-1}],
members are t in [N_m], and coordinate j of member t in group g is

    phi_j(t, g) = ((t + g_j - 2) mod N_j) + 1   for j < m,   phi_m(t) = t.

``verify_partition`` re-checks every invariant from scratch, independent of
how the partition was built.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product

from mwdml.arrays import ArrayError, Mask, Shape, lattice_size, mask_support

Cell = tuple[int, ...]


@dataclass(frozen=True)
class TransversalPartition:
    """Groups of masked indices (full-length tuples, zeros off supp(e))."""

    shape: Shape
    mask: Mask
    groups: tuple[tuple[Cell, ...], ...]


@dataclass(frozen=True)
class PartitionReport:
    covers: bool
    disjoint: bool
    transversal: bool
    group_size_ok: bool

    @property
    def ok(self) -> bool:
        return self.covers and self.disjoint and self.transversal and self.group_size_ok


def build_transversal_partition(shape: Shape | tuple[int, ...], e: Mask) -> TransversalPartition:
    """Construct the modular-shift partition of I_{N,e}."""
    shape = Shape.coerce(shape)
    e = tuple(int(b) for b in e)
    if len(e) != shape.K:
        raise ArrayError(f"mask length {len(e)} != shape arity {shape.K}")
    ks = mask_support(e)
    if not ks:
        raise ArrayError("mask must be nonzero")
    # proof convention: coordinates ordered by non-increasing size
    order = sorted(range(len(ks)), key=lambda j: (-shape.dims[ks[j]], ks[j]))
    sorted_ks = [ks[j] for j in order]
    sizes = [shape.dims[k] for k in sorted_ks]
    m = len(sizes)
    n_grp = sizes[-1]

    groups = []
    for g in product(*(range(1, sizes[j] + 1) for j in range(m - 1))):
        members = []
        for t in range(1, n_grp + 1):
            coords = [0] * shape.K
            for j in range(m - 1):
                coords[sorted_ks[j]] = ((t + g[j] - 2) % sizes[j]) + 1
            coords[sorted_ks[m - 1]] = t
            members.append(tuple(coords))
        groups.append(tuple(members))
    return TransversalPartition(shape, e, tuple(groups))


def verify_partition(p: TransversalPartition) -> PartitionReport:
    """Exhaustively re-check cover, disjointness, size, and transversality."""
    ks = mask_support(p.mask)
    target = set()
    for combo in product(*(range(1, p.shape.dims[k] + 1) for k in ks)):
        coords = [0] * p.shape.K
        for k, v in zip(ks, combo):
            coords[k] = v
        target.add(tuple(coords))

    members = [cell for grp in p.groups for cell in grp]
    seen = set(members)
    covers = seen == target
    disjoint = len(members) == len(seen)

    n_expected = min(p.shape.dims[k] for k in ks) if ks else 0
    group_size_ok = all(len(grp) == n_expected for grp in p.groups)
    group_size_ok = group_size_ok and len(p.groups) * n_expected == lattice_size(p.shape, p.mask)

    transversal = True
    for grp in p.groups:
        for k in ks:
            vals = [cell[k] for cell in grp]
            if len(set(vals)) != len(vals):
                transversal = False
                break
        if not transversal:
            break
    return PartitionReport(covers, disjoint, transversal, group_size_ok)


def write_partition_csv(p: TransversalPartition, path) -> None:
    """Rows (group_id, i_1, ..., i_K); masked-out coordinates are 0."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group_id"] + [f"i_{k + 1}" for k in range(p.shape.K)])
        for gid, grp in enumerate(p.groups, start=1):
            for cell in grp:
                writer.writerow([gid] + list(cell))
