"""System-service-number resolution over ntdll-like images.

Three routes: direct read of an intact stub prologue, neighbor derivation at
fixed stride when the prologue is overwritten, and position indexing of the
Zw exports sorted by address. Also locates the syscall instruction that
follows a stub and hashes function names.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import NoCleanNeighbor, NoZwExports, OutOfRange, WrongLayout
from .image import Layout, PeImage, enumerate_exports

# mov r10, rcx ; mov eax, imm -- with the immediate's high word zero
CLEAN_PROLOGUE_HEAD = b"\x4c\x8b\xd1\xb8"
SYSCALL_OPCODE = b"\x0f\x05"

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SsnSearchParams:
    """Knobs for neighbor derivation and syscall-instruction scanning."""

    max_neighbours: int = 500
    stride_bytes: int = 32
    syscall_scan_limit: int = 512

    def __post_init__(self) -> None:
        if self.stride_bytes <= 0:
            raise ValueError("stride_bytes must be positive")
        if self.syscall_scan_limit < 2:
            raise ValueError("syscall_scan_limit must cover at least one opcode pair")
        if self.max_neighbours < 0:
            raise ValueError("max_neighbours must be non-negative")


def read_clean_ssn(prologue: bytes) -> Optional[int]:
    """Return the service number encoded in an intact stub prologue.

    Matches 4C 8B D1 B8 ?? ?? 00 00 over the first eight bytes; anything else
    (hooked, truncated) yields None. Bytes past the eighth are ignored.
    """
    if len(prologue) < 8:
        return None
    if prologue[:4] == CLEAN_PROLOGUE_HEAD and prologue[6] == 0 and prologue[7] == 0:
        return (prologue[5] << 8) | prologue[4]
    return None


def _require_loaded(image: PeImage) -> None:
    if image.layout is not Layout.LOADED:
        raise WrongLayout("stub reads require a loaded-layout image")


def _clean_ssn_at(image: PeImage, va: int) -> Optional[int]:
    off = va - image.image_base
    if off < 0 or off + 8 > image.extent:
        return None
    return read_clean_ssn(image.data[off : off + 8])


def derive_ssn_neighbors(ntdll: PeImage, entry_va: int, params: SsnSearchParams) -> int:
    """Resolve a stub's service number, falling back to stride neighbors.

    An intact prologue is read directly. Otherwise stubs at entry_va +/- k
    strides are probed outward; a clean stub k positions below (higher
    address) carries this stub's number plus k, one above carries it minus k,
    so the result is the neighbor's number adjusted by the whole distance k.
    """
    _require_loaded(ntdll)
    if not ntdll.image_base <= entry_va < ntdll.image_base + ntdll.extent:
        raise OutOfRange(f"entry va {entry_va:#x} outside the mapped extent")

    direct = _clean_ssn_at(ntdll, entry_va)
    if direct is not None:
        return direct

    for idx in range(1, params.max_neighbours + 1):
        down = _clean_ssn_at(ntdll, entry_va + idx * params.stride_bytes)
        if down is not None:
            return down - idx
        up = _clean_ssn_at(ntdll, entry_va - idx * params.stride_bytes)
        if up is not None:
            return up + idx
    raise NoCleanNeighbor(
        f"no intact stub within {params.max_neighbours} strides of {entry_va:#x}"
    )


def find_syscall_instruction(
    ntdll: PeImage, start_va: int, params: SsnSearchParams
) -> Optional[int]:
    """Return the lowest va >= start_va holding the syscall opcode pair.

    Scans at most syscall_scan_limit bytes and never past the image extent;
    absence is a value, not an error.
    """
    _require_loaded(ntdll)
    if not ntdll.image_base <= start_va < ntdll.image_base + ntdll.extent:
        raise OutOfRange(f"start va {start_va:#x} outside the mapped extent")
    off = start_va - ntdll.image_base
    window = ntdll.data[off : off + min(params.syscall_scan_limit, ntdll.extent - off)]
    idx = window.find(SYSCALL_OPCODE)
    if idx < 0:
        return None
    return start_va + idx


def derive_ssn_by_sort(ntdll: PeImage) -> dict[str, int]:
    """Assign service numbers by position of the Zw exports sorted by address."""
    zw = [
        (entry.rva, entry.name)
        for entry in enumerate_exports(ntdll)
        if entry.name is not None
        and entry.name.startswith("Zw")
        and entry.forwarded_to is None
    ]
    if not zw:
        raise NoZwExports("image exports no Zw-prefixed functions")
    zw.sort()
    return {name: index for index, (_, name) in enumerate(zw)}


def hash_name(name: str) -> int:
    """Rotate-right-13 additive hash over the raw name bytes, 64-bit."""
    if not name:
        raise ValueError("name must be non-empty")
    h = 0
    for c in name.encode("utf-8"):
        h = (((h >> 13) | (h << 51)) + c) & _MASK64
    return h
