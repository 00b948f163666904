"""Bounded per-function syscall table: build, slot assignment, serialization.

Each record carries the service number, the stub's address, the address of
the syscall instruction that follows it, the interception-slot address it
will be dispatched through, and a hash of the function name (the name itself
is not stored). The serialized layout is load-bearing: downstream dispatch
arithmetic reads records at a fixed 0x28 stride with the syscall address at
in-record offset 0x10.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import Iterable, Optional

from .errors import (
    MalformedBlob,
    MissingBaseFunction,
    SyscallNotFound,
    TableFull,
    WrongLayout,
)
from .image import Layout, PeImage, enumerate_exports
from .ssn import (
    SsnSearchParams,
    derive_ssn_neighbors,
    find_syscall_instruction,
    hash_name,
    read_clean_ssn,
)

MAX_ENTRIES = 512
LIST_ENTRY_SIZE = 0x28
STUB_ENTRY_SIZE = 0x14
_HEADER_SIZE = 8
_BASE_INDEX_COUNT = 6
_TRAILER_SIZE = 8 * _BASE_INDEX_COUNT

# Always included, in the order their table indices are published.
BASE_FUNCTIONS = (
    "ZwOpenProcess",
    "ZwProtectVirtualMemory",
    "ZwReadVirtualMemory",
    "ZwWriteVirtualMemory",
    "ZwAllocateVirtualMemory",
    "ZwDelayExecution",
)


@dataclass(frozen=True)
class SyscallInfo:
    ssn: int
    address: int
    syscall_ret: int
    stub_slot: int
    name_hash: int


@dataclass(frozen=True)
class SyscallList:
    entries: tuple[SyscallInfo, ...]
    base_indices: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.entries) > MAX_ENTRIES:
            raise TableFull(f"{len(self.entries)} entries exceed capacity {MAX_ENTRIES}")
        if len(self.base_indices) != _BASE_INDEX_COUNT:
            raise ValueError(f"expected {_BASE_INDEX_COUNT} base indices")

    @property
    def count(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class RewriteConfig:
    """Dispatch-side constants: table location, record sizes, stub slot base."""

    stub_base: int
    table_va: int = 0
    list_entry_size: int = LIST_ENTRY_SIZE
    stub_entry_size: int = STUB_ENTRY_SIZE

    def __post_init__(self) -> None:
        if self.list_entry_size != LIST_ENTRY_SIZE:
            raise ValueError(f"list entry size is fixed at {LIST_ENTRY_SIZE:#x}")
        if self.stub_entry_size != STUB_ENTRY_SIZE:
            raise ValueError(f"stub entry size is fixed at {STUB_ENTRY_SIZE:#x}")


def _is_native_name(name: Optional[str]) -> bool:
    return name is not None and (name.startswith("Nt") or name.startswith("Zw"))


def _sibling_spelling(name: str) -> Optional[str]:
    if name.startswith("Zw"):
        return "Nt" + name[2:]
    if name.startswith("Nt"):
        return "Zw" + name[2:]
    return None


class NativeExportIndex:
    """Nt/Zw exports grouped by address, keyed by the Zw-preferred spelling."""

    def __init__(self, ntdll: PeImage) -> None:
        self.name_to_rva: dict[str, int] = {}
        names_by_rva: dict[int, list[str]] = {}
        for entry in enumerate_exports(ntdll):
            if not _is_native_name(entry.name) or entry.forwarded_to is not None:
                continue
            self.name_to_rva[entry.name] = entry.rva
            names_by_rva.setdefault(entry.rva, []).append(entry.name)
        self.canonical_by_rva: dict[int, str] = {}
        for rva, names in names_by_rva.items():
            zw = sorted(n for n in names if n.startswith("Zw"))
            self.canonical_by_rva[rva] = zw[0] if zw else sorted(names)[0]

    def resolve(self, name: str) -> Optional[int]:
        rva = self.name_to_rva.get(name)
        if rva is None:
            sibling = _sibling_spelling(name)
            if sibling is not None:
                rva = self.name_to_rva.get(sibling)
        return rva


def make_entry(
    ntdll: PeImage,
    rva: int,
    canonical_name: str,
    params: SsnSearchParams,
    stub_slot: int = 0,
) -> SyscallInfo:
    """Resolve one export into a table record (number, syscall site, hash)."""
    va = ntdll.image_base + rva
    ssn = derive_ssn_neighbors(ntdll, va, params)
    syscall_ret = find_syscall_instruction(ntdll, va, params)
    if syscall_ret is None or syscall_ret == va:
        raise SyscallNotFound(f"no syscall instruction after {canonical_name} at {va:#x}")
    return SyscallInfo(
        ssn=ssn,
        address=va,
        syscall_ret=syscall_ret,
        stub_slot=stub_slot,
        name_hash=hash_name(canonical_name),
    )


def build_syscall_list(
    ntdll: PeImage,
    params: SsnSearchParams,
    extra_names: Iterable[str] = (),
) -> SyscallList:
    """Build the table over an ntdll image.

    Includes the six base functions unconditionally (either spelling must
    resolve), every requested extra name, and every Nt/Zw export whose
    prologue deviates from the intact template. Nt/Zw spellings of one
    address collapse to a single entry keyed by the Zw name, and entries are
    ordered as the export name table orders them: lexicographically.
    """
    if ntdll.layout is not Layout.LOADED:
        raise WrongLayout("table construction requires a loaded-layout image")
    index = NativeExportIndex(ntdll)

    included: dict[int, str] = {}

    def include(rva: int) -> None:
        included[rva] = index.canonical_by_rva[rva]

    base_rvas: dict[str, int] = {}
    for name in BASE_FUNCTIONS:
        rva = index.resolve(name)
        if rva is None:
            raise MissingBaseFunction(f"{name} absent from exports")
        base_rvas[name] = rva
        include(rva)
    for name in extra_names:
        rva = index.resolve(name)
        if rva is None:
            raise MissingBaseFunction(f"requested function {name} absent from exports")
        include(rva)

    for name, rva in index.name_to_rva.items():
        if rva in included:
            continue
        prologue = ntdll.data[rva : rva + 8]
        if read_clean_ssn(prologue) is None:
            include(rva)

    if len(included) > MAX_ENTRIES:
        raise TableFull(f"{len(included)} candidate functions exceed capacity {MAX_ENTRIES}")

    ordered = sorted(included.items(), key=lambda item: item[1])
    entries = tuple(
        make_entry(ntdll, rva, canonical, params) for rva, canonical in ordered
    )
    rva_to_index = {rva: i for i, (rva, _) in enumerate(ordered)}
    base_indices = tuple(rva_to_index[base_rvas[name]] for name in BASE_FUNCTIONS)
    return SyscallList(entries=entries, base_indices=base_indices)


def assign_stub_slots(table: SyscallList, config: RewriteConfig) -> SyscallList:
    """Point every entry at its interception slot: base + index * entry size.

    The slot index is the sole link between a slot and its record.
    """
    entries = tuple(
        dataclasses.replace(e, stub_slot=config.stub_base + i * config.stub_entry_size)
        for i, e in enumerate(table.entries)
    )
    return SyscallList(entries=entries, base_indices=table.base_indices)


def serialize_list(table: SyscallList) -> bytes:
    """Little-endian blob: count, then 0x28-byte records, then six base indices."""
    out = bytearray(struct.pack("<Q", table.count))
    for e in table.entries:
        out += struct.pack(
            "<QQQQQ", e.ssn, e.address, e.syscall_ret, e.stub_slot, e.name_hash
        )
    out += struct.pack("<6Q", *table.base_indices)
    return bytes(out)


def deserialize_list(blob: bytes) -> SyscallList:
    """Exact inverse of serialize_list; any length mismatch is malformed."""
    if len(blob) < _HEADER_SIZE + _TRAILER_SIZE:
        raise MalformedBlob(f"blob of {len(blob)} bytes is shorter than the fixed frame")
    count = struct.unpack_from("<Q", blob, 0)[0]
    if count > MAX_ENTRIES:
        raise MalformedBlob(f"count {count} exceeds capacity {MAX_ENTRIES}")
    expected = _HEADER_SIZE + LIST_ENTRY_SIZE * count + _TRAILER_SIZE
    if len(blob) != expected:
        raise MalformedBlob(f"blob is {len(blob)} bytes, count {count} implies {expected}")
    entries = []
    for i in range(count):
        ssn, address, syscall_ret, stub_slot, name_hash = struct.unpack_from(
            "<QQQQQ", blob, _HEADER_SIZE + LIST_ENTRY_SIZE * i
        )
        entries.append(SyscallInfo(ssn, address, syscall_ret, stub_slot, name_hash))
    base_indices = struct.unpack_from("<6Q", blob, _HEADER_SIZE + LIST_ENTRY_SIZE * count)
    return SyscallList(entries=tuple(entries), base_indices=tuple(base_indices))


def debug_dump(table: SyscallList, ntdll: PeImage) -> list[dict]:
    """Readable rows (index, name, ssn, address, hash) for inspection only.

    Names are recovered from the image's exports by address since records do
    not store them.
    """
    index = NativeExportIndex(ntdll)
    rows = []
    for i, e in enumerate(table.entries):
        rva = e.address - ntdll.image_base
        name = index.canonical_by_rva.get(rva, f"{e.address:#018x}")
        rows.append(
            {
                "index": i,
                "name": name,
                "ssn": e.ssn,
                "address": f"0x{e.address:016x}",
                "hash": f"0x{e.name_hash:016x}",
            }
        )
    return rows
