"""Address arithmetic shared by every other module.

4 KiB pages, 64-byte lines, 8-byte page-table entries, 512-ary radix levels.
Page numbers and byte addresses are plain ints.
"""
from typing import List, NewType

Gvp = NewType("Gvp", int)
Gpp = NewType("Gpp", int)
Spp = NewType("Spp", int)
Spa = NewType("Spa", int)
LineAddr = NewType("LineAddr", int)

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
LINE_SHIFT = 6
LINE_SIZE = 1 << LINE_SHIFT
PTE_SIZE = 8
PTES_PER_LINE = LINE_SIZE // PTE_SIZE
LINES_PER_PAGE = PAGE_SIZE // LINE_SIZE
LEVEL_BITS = 9
ENTRIES_PER_TABLE = 1 << LEVEL_BITS
LEVEL_MASK = ENTRIES_PER_TABLE - 1
PFN_BITS = 52

COTAG_WIDTHS = (8, 16, 24)
# co-tag bits that only select an entry inside a 64-byte line
COTAG_ENTRY_BITS = LINE_SHIFT - 3


class MisalignedAddress(ValueError):
    pass


def pt_indices(vpn: int) -> List[int]:
    """Split a page number into its [idx4, idx3, idx2, idx1] radix indices."""
    return [(vpn >> 27) & LEVEL_MASK, (vpn >> 18) & LEVEL_MASK,
            (vpn >> 9) & LEVEL_MASK, vpn & LEVEL_MASK]


def cotag_of(spa: int, width: int) -> int:
    """Co-tag for the page-table entry stored at ``spa``: bits [width+2:3]."""
    if width not in COTAG_WIDTHS:
        raise ValueError(f"co-tag width must be one of {COTAG_WIDTHS}, got {width}")
    if spa & (PTE_SIZE - 1):
        raise MisalignedAddress(f"page-table entry address {spa:#x} is not 8-byte aligned")
    return (spa >> 3) & ((1 << width) - 1)


def cotag_line_key(cotag: int) -> int:
    """The part of a co-tag compared by an invalidation (line granularity)."""
    return cotag >> COTAG_ENTRY_BITS


def line_of(spa: int) -> int:
    return spa >> LINE_SHIFT


def page_of(spa: int) -> int:
    return spa >> PAGE_SHIFT


def pte_spa(table_spp: int, index: int) -> int:
    return (table_spp << PAGE_SHIFT) | (index << 3)
