import pytest
from hypothesis import given, settings, strategies as st

from transcoh.addr import line_of, pt_indices
from transcoh.pagetable import (
    PTE_A, PTE_D, MissingMapping, PageTables, PhysMem, Pte, TableFault, TranslationFault,
)
from transcoh.tstruct import TranslationStructures, TstructConfig


def tables(fast=64, slow=4096):
    pt = PageTables(PhysMem(fast, slow))
    pt.create_vm(0)
    return pt


def test_guest_and_nested_mapping_example():
    pt = tables()
    pt.map_guest(0, 3, 8)
    pt.map_nested(0, 8, 5)
    assert pt.translate_guest(0, 3) == 8
    assert pt.translate_nested(0, 8) == 5
    assert pt.translate(0, 3) == 5
    old, line = pt.remap_nested(0, 8, 512)
    assert old == 5
    assert line == line_of(pt.nested_leaf_spa(0, 8))
    assert pt.walk_2d(0, 3).final_spp == 512


def test_identical_mapping_reports_nothing():
    pt = tables()
    assert pt.map_guest(0, 3, 8)
    assert pt.map_guest(0, 3, 8) == []
    assert pt.map_nested(0, 8, 5)
    assert pt.map_nested(0, 8, 5) == []


def test_shared_intermediate_chain():
    pt = tables()
    pt.map_guest(0, 0x200, 1)
    before = len(pt.mem.table_pages)
    pt.map_guest(0, 0x201, 2)            # same idx4..idx2
    assert len(pt.mem.table_pages) == before
    pt.map_guest(0, 0x400, 3)            # new idx2: one guest leaf table and its nested backing
    assert len(pt.mem.table_pages) == before + 1


def test_eight_nested_leaves_share_a_line():
    pt = tables()
    reported = []
    for gpp in range(16, 24):
        reported += pt.map_nested(0, gpp, 100 + gpp)
    leaf_lines = {line_of(pt.nested_leaf_spa(0, g)) for g in range(16, 24)}
    assert len(leaf_lines) == 1
    assert leaf_lines <= set(reported)
    line = leaf_lines.pop()
    for g in range(16, 24):
        assert pt.remap_nested(0, g, 300 + g)[1] == line


def test_remap_clears_access_and_dirty():
    pt = tables()
    pt.map_guest(0, 3, 8)
    pt.map_nested(0, 8, 5)
    pt.walk_2d(0, 3, is_store=True)
    spa = pt.nested_leaf_spa(0, 8)
    assert pt.mem.entries[spa] & (PTE_A | PTE_D) == PTE_A | PTE_D
    pt.remap_nested(0, 8, 9)
    assert pt.mem.entries[spa] & (PTE_A | PTE_D) == 0
    with pytest.raises(MissingMapping):
        pt.remap_nested(0, 77, 9)


def test_cold_walk_has_24_refs_in_grid_order():
    pt = tables()
    pt.map_guest(0, 3, 8)
    pt.map_nested(0, 8, 5)
    res = pt.walk_2d(0, 3)
    roles = [r for _, r in res.refs]
    nested = ["nL4", "nL3", "nL2", "nL1"]
    expect = []
    for g in ("gL4", "gL3", "gL2", "gL1"):
        expect += nested + [g]
    expect += nested
    assert roles == expect and len(roles) == 24
    assert res.final_spp == 5
    # every fill's co-tag source is one of the references
    spas = {spa for spa, _ in res.refs}
    assert all(f.src_spa in spas for f in res.fills)
    assert all(pt.mem.entries[spa] & PTE_A for spa in spas)


def test_native_walk_has_4_refs():
    pt = tables()
    pt.map_nested(0, 3, 5)
    res = pt.walk_native(0, 3)
    assert [r for _, r in res.refs] == ["nL4", "nL3", "nL2", "nL1"]
    assert res.final_spp == 5


def expected_refs(mmu_level, ntlb_hits):
    """Grid oracle: guest entries read below the MMU-cache hit, plus 4 per nested walk missing the nTLB."""
    guest_levels = 4 if mmu_level is None else mmu_level - 1
    # one nested lookup per guest table not supplied by the MMU cache, plus the data page
    lookups = guest_levels - (0 if mmu_level is None else 1) + 1
    return guest_levels + 4 * (lookups - ntlb_hits)


def warm(pt, gvp):
    ts = TranslationStructures(TstructConfig())
    res = pt.walk_2d(0, gvp, ts)
    for f in res.fills:
        ts.fill(f.kind, f.vm, f.page, f.payload, f.src_spa, f.level)
    return ts


def test_walk_elision_with_warm_structures():
    pt = tables()
    pt.map_guest(0, 3, 8)
    pt.map_nested(0, 8, 5)
    ts = warm(pt, 3)
    # full MMU-cache hit (gL1 table known) and nTLB hit for the data page: only the gL1 entry
    res = pt.walk_2d(0, 3, ts)
    assert len(res.refs) == expected_refs(2, 1) == 1
    # nTLB only: 4 guest references, no nested ones
    ts.mmu.flush()
    res = pt.walk_2d(0, 3, ts)
    assert len(res.refs) == 4 == expected_refs(None, 5)
    # a neighbour under the same gL1 table: MMU hit, nTLB miss for its data page
    pt.map_guest(0, 4, 9)
    pt.map_nested(0, 9, 6)
    ts = warm(pt, 3)
    res = pt.walk_2d(0, 4, ts)
    assert len(res.refs) == expected_refs(2, 0) == 5 < 24
    assert res.final_spp == 6


def test_translation_fault_names_the_level():
    pt = tables()
    with pytest.raises(TranslationFault) as e:
        pt.walk_2d(0, 1 << 30)
    assert e.value.role == "gL4"
    pt.map_guest(0, 3, 8)                 # guest leaf exists, nested leaf for gpp 8 does not
    with pytest.raises(TranslationFault) as e:
        pt.walk_2d(0, 3)
    assert e.value.role.startswith("n")


def test_read_write_pte():
    pt = tables()
    spa = pt.nested_leaf_spa(0, pt.guest_root[0])
    pte = Pte(target=7, present=True)
    assert pt.mem.write_pte(spa, pte) == line_of(spa)
    assert pt.mem.read_pte(spa) == pte
    assert pt.mem.write_pte(spa, pte) == line_of(spa)      # identical bytes still reported
    with pytest.raises(TableFault):
        pt.mem.read_pte(0)
    with pytest.raises(TableFault):
        pt.mem.read_pte(spa + 4)


def test_dump_format():
    pt = tables()
    pt.map_guest(0, 3, 8)
    pt.map_nested(0, 8, 5)
    lines = pt.dump(0).splitlines()
    assert "nL1 0.0.0.8 -> 0x5 P--" in lines
    assert "gL1 0.0.0.3 -> 0x8 P--" in lines


ops = st.lists(st.tuples(st.sampled_from(["g", "n", "r"]), st.integers(0, 2047), st.integers(0, 63)),
               max_size=40)


@settings(max_examples=60, deadline=None)
@given(ops)
def test_modified_lines_complete_and_radix_consistent(seq):
    pt = tables()
    for kind, page, target in seq:
        before = pt.snapshot()
        if kind == "g":
            lines = pt.map_guest(0, page, target)
        elif kind == "n":
            lines = pt.map_nested(0, page, 64 + target)
        else:
            try:
                lines = [pt.remap_nested(0, page, 64 + target)[1]]
            except MissingMapping:
                lines = []
        after = pt.snapshot()
        changed = {line_of(a) for a in set(before) | set(after) if before.get(a) != after.get(a)}
        assert changed <= set(lines)
    for (vm, gvp) in list(pt._gleaf):
        try:
            expect = pt.translate_nested(0, pt.translate_guest(0, gvp))
        except TranslationFault:
            continue
        res = pt.walk_2d(0, gvp)
        assert res.final_spp == expect
        assert all(pt.mem.entries[spa] & PTE_A for spa, _ in res.refs)
        assert pt_indices(gvp)[3] == (pt.guest_leaf_spa(0, gvp) >> 3) & 511
