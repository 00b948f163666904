"""Symbolic model of a loaded process and of the IAT-rewrite flow.

Plans slot edits for target modules, applies them to produce a new process
value, and resolves calls through the rewritten slots the way the dispatch
stubs would: slot value -> stub index -> table record -> syscall site. No
instruction is ever executed and no live process is touched.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .errors import (
    CorruptSlot,
    MissingNtdll,
    StaleEdit,
    TargetNotLoaded,
    UnknownImport,
)
from .image import PeImage, enumerate_imports, rva_to_offset, with_patched_bytes
from .ssn import SsnSearchParams
from .table import (
    LIST_ENTRY_SIZE,
    NativeExportIndex,
    RewriteConfig,
    SyscallList,
    make_entry,
    serialize_list,
)


def normalize_module_name(name: str) -> str:
    """Case-insensitive module identity, extension and path stripped."""
    base = name.replace("\\", "/").rsplit("/", 1)[-1].lower()
    if base.endswith(".dll") or base.endswith(".exe"):
        base = base.rsplit(".", 1)[0]
    return base


@dataclass(frozen=True)
class ModuleEntry:
    name: str
    base: int
    image: PeImage


@dataclass(frozen=True)
class ProcessModel:
    """Ordered loaded modules plus the dispatch configuration. A value: apply
    operations return new models rather than mutating shared state."""

    modules: tuple[ModuleEntry, ...]
    ntdll_index: Optional[int]
    config: RewriteConfig

    def ntdll(self) -> ModuleEntry:
        if self.ntdll_index is None or not 0 <= self.ntdll_index < len(self.modules):
            raise MissingNtdll("process model carries no ntdll image")
        return self.modules[self.ntdll_index]

    def find(self, name: str) -> Optional[ModuleEntry]:
        wanted = normalize_module_name(name)
        for entry in self.modules:
            if normalize_module_name(entry.name) == wanted:
                return entry
        return None


@dataclass(frozen=True)
class IatEdit:
    module: str
    slot_iat_rva: int
    function: str
    old_value: int
    new_value: int
    entry_index: int


@dataclass(frozen=True)
class RewritePlan:
    """Planned slot edits plus the table they index (grown when forced)."""

    edits: tuple[IatEdit, ...]
    table: SyscallList


# --- call-trace steps ---


@dataclass(frozen=True)
class CallerModule:
    module: str


@dataclass(frozen=True)
class IatLookup:
    slot_va: int
    value: int


@dataclass(frozen=True)
class StubSlot:
    index: int


@dataclass(frozen=True)
class TableLookup:
    ssn: int
    syscall_ret: int


@dataclass(frozen=True)
class SyscallSite:
    va: int


@dataclass(frozen=True)
class DirectNtdll:
    va: int


@dataclass(frozen=True)
class ForeignTarget:
    va: int


TraceStep = Union[
    CallerModule, IatLookup, StubSlot, TableLookup, SyscallSite, DirectNtdll, ForeignTarget
]


@dataclass(frozen=True)
class CallTrace:
    steps: tuple[TraceStep, ...]


@dataclass(frozen=True)
class ChainVerdict:
    passed: bool
    reasons: tuple[str, ...]


def _is_native_name(name: object) -> bool:
    return isinstance(name, str) and (name.startswith("Nt") or name.startswith("Zw"))


def plan_rewrite(
    process: ProcessModel,
    table: SyscallList,
    targets: Sequence[tuple[str, bool]],
    params: Optional[SsnSearchParams] = None,
) -> RewritePlan:
    """Plan slot edits for the targets, in the given order.

    A slot is edited when its imported Nt/Zw name resolves to an ntdll export
    held in the table; with force set, unlisted functions are appended to the
    table first (their records resolved from the ntdll image) so preloaded
    modules are covered too. A target absent from the process is an error,
    never a silent skip.
    """
    ntdll = process.ntdll()
    params = params or SsnSearchParams()
    index = NativeExportIndex(ntdll.image)
    config = process.config

    entries = list(table.entries)
    address_to_index = {e.address: i for i, e in enumerate(entries)}

    edits: list[IatEdit] = []
    for target_name, force in targets:
        module = process.find(target_name)
        if module is None:
            raise TargetNotLoaded(f"target module {target_name!r} is not loaded")
        for imported in enumerate_imports(module.image):
            if normalize_module_name(imported.dll_name) != normalize_module_name(ntdll.name):
                continue
            for slot in imported.slots:
                if not _is_native_name(slot.imported_name):
                    continue
                rva = index.resolve(slot.imported_name)
                if rva is None:
                    continue
                va = ntdll.base + rva
                entry_index = address_to_index.get(va)
                if entry_index is None:
                    if not force:
                        continue
                    entry_index = len(entries)
                    stub_slot = config.stub_base + entry_index * config.stub_entry_size
                    entries.append(
                        make_entry(
                            ntdll.image,
                            rva,
                            index.canonical_by_rva[rva],
                            params,
                            stub_slot=stub_slot,
                        )
                    )
                    address_to_index[va] = entry_index
                new_value = config.stub_base + entry_index * config.stub_entry_size
                if slot.bound_value == new_value:
                    continue
                edits.append(
                    IatEdit(
                        module=module.name,
                        slot_iat_rva=slot.iat_rva,
                        function=slot.imported_name,
                        old_value=slot.bound_value,
                        new_value=new_value,
                        entry_index=entry_index,
                    )
                )
    grown = SyscallList(entries=tuple(entries), base_indices=table.base_indices)
    return RewritePlan(edits=tuple(edits), table=grown)


def apply_rewrite(process: ProcessModel, plan: RewritePlan) -> ProcessModel:
    """Write the planned slot values, returning a new process model.

    Every edit's old value must still match the live slot, which catches a
    double apply; all bytes outside the planned slots are untouched.
    """
    images = {i: entry.image for i, entry in enumerate(process.modules)}
    for edit in plan.edits:
        idx = next(
            (
                i
                for i, entry in enumerate(process.modules)
                if normalize_module_name(entry.name) == normalize_module_name(edit.module)
            ),
            None,
        )
        if idx is None:
            raise TargetNotLoaded(f"edit references unloaded module {edit.module!r}")
        image = images[idx]
        offset = rva_to_offset(image, edit.slot_iat_rva)
        current = struct.unpack_from("<Q", image.data, offset)[0]
        if current != edit.old_value:
            raise StaleEdit(
                f"slot {edit.module}!{edit.function} holds {current:#x}, "
                f"expected {edit.old_value:#x}"
            )
        images[idx] = with_patched_bytes(image, offset, struct.pack("<Q", edit.new_value))
    modules = tuple(
        dataclasses.replace(entry, image=images[i])
        for i, entry in enumerate(process.modules)
    )
    return dataclasses.replace(process, modules=modules)


def resolve_call(
    process: ProcessModel,
    caller_module: str,
    imported_fn: str,
    table: SyscallList,
) -> CallTrace:
    """Trace one call through the caller's import slot.

    A slot still holding an ntdll address is a direct call. A value inside
    the stub region is decoded to its entry index and the dispatch arithmetic
    is emulated against the serialized table bytes (record at index*0x28,
    syscall address at +0x10). Any other value is a foreign redirection.
    """
    caller = process.find(caller_module)
    if caller is None:
        raise UnknownImport(f"module {caller_module!r} is not loaded")
    slot = None
    for imported in enumerate_imports(caller.image):
        for candidate in imported.slots:
            if candidate.imported_name == imported_fn:
                slot = candidate
                break
        if slot is not None:
            break
    if slot is None:
        raise UnknownImport(f"{caller.name!r} does not import {imported_fn!r}")

    ntdll = process.ntdll()
    config = process.config
    value = slot.bound_value
    steps: list[TraceStep] = [
        CallerModule(caller.name),
        IatLookup(slot_va=caller.base + slot.iat_rva, value=value),
    ]

    if ntdll.base <= value < ntdll.base + ntdll.image.extent:
        steps.append(DirectNtdll(va=value))
        return CallTrace(steps=tuple(steps))

    stub_end = config.stub_base + table.count * config.stub_entry_size
    if config.stub_base <= value < stub_end:
        delta = value - config.stub_base
        if delta % config.stub_entry_size:
            raise CorruptSlot(f"slot value {value:#x} is not on a stub boundary")
        index = delta // config.stub_entry_size
        blob = serialize_list(table)
        record = 8 + index * LIST_ENTRY_SIZE
        ssn = struct.unpack_from("<Q", blob, record)[0]
        syscall_ret = struct.unpack_from("<Q", blob, record + 0x10)[0]
        steps += [
            StubSlot(index=index),
            TableLookup(ssn=ssn, syscall_ret=syscall_ret),
            SyscallSite(va=syscall_ret),
        ]
        return CallTrace(steps=tuple(steps))

    steps.append(ForeignTarget(va=value))
    return CallTrace(steps=tuple(steps))


def verify_chain(trace: CallTrace, process: ProcessModel) -> ChainVerdict:
    """Check the address-level transparency of a resolved call.

    The pre-kernel address must lie inside ntdll, and the call site recorded
    at lookup time must lie inside the caller, so at the address level the
    chain still reads caller -> ntdll.
    """
    ntdll = process.ntdll()
    reasons: list[str] = []

    caller_step = trace.steps[0]
    lookup = trace.steps[1]
    assert isinstance(caller_step, CallerModule) and isinstance(lookup, IatLookup)
    caller = process.find(caller_step.module)
    if caller is None:
        reasons.append("CallerUnloaded")
    elif not caller.base <= lookup.slot_va < caller.base + caller.image.extent:
        reasons.append("CallSiteMoved")

    def in_ntdll(va: int) -> bool:
        return ntdll.base <= va < ntdll.base + ntdll.image.extent

    final = trace.steps[-1]
    if isinstance(final, SyscallSite):
        if not in_ntdll(final.va):
            reasons.append("OutsideNtdll")
    elif isinstance(final, DirectNtdll):
        if not in_ntdll(final.va):
            reasons.append("OutsideNtdll")
    elif isinstance(final, ForeignTarget):
        reasons.append("OutsideNtdll")
    else:
        reasons.append("UnterminatedTrace")

    return ChainVerdict(passed=not reasons, reasons=tuple(reasons))


def trace_to_json(trace: CallTrace) -> list[dict]:
    """Stable JSON form of a trace: one record per step, in order."""
    out: list[dict] = []
    for step in trace.steps:
        if isinstance(step, CallerModule):
            out.append({"step": "caller_module", "module": step.module})
        elif isinstance(step, IatLookup):
            out.append(
                {
                    "step": "iat_lookup",
                    "slot_va": f"0x{step.slot_va:016x}",
                    "value": f"0x{step.value:016x}",
                }
            )
        elif isinstance(step, StubSlot):
            out.append({"step": "stub_slot", "index": step.index})
        elif isinstance(step, TableLookup):
            out.append(
                {
                    "step": "table_lookup",
                    "ssn": step.ssn,
                    "syscall_ret": f"0x{step.syscall_ret:016x}",
                }
            )
        elif isinstance(step, SyscallSite):
            out.append({"step": "syscall_site", "va": f"0x{step.va:016x}"})
        elif isinstance(step, DirectNtdll):
            out.append({"step": "direct_ntdll", "va": f"0x{step.va:016x}"})
        elif isinstance(step, ForeignTarget):
            out.append({"step": "foreign_target", "va": f"0x{step.va:016x}"})
    return out
