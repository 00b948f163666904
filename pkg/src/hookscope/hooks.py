"""Hook detection: inline prologue checks and IAT cross-checks, plus reports.

The inline scan walks the Nt/Zw exports of a loaded ntdll image and flags
every prologue that deviates from the intact stub template, decoding the
relative-jump form to its target. The IAT scan compares each loaded module's
bound slot values against the true export addresses.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Mapping

from .errors import WrongLayout
from .image import Layout, PeImage, enumerate_exports, enumerate_imports
from .simulate import normalize_module_name
from .ssn import read_clean_ssn

if TYPE_CHECKING:
    from .simulate import ProcessModel

log = logging.getLogger(__name__)


class HookKind(Enum):
    INLINE_PROLOGUE = "InlinePrologue"
    IAT_MISMATCH = "IatMismatch"


class HookDetail(Enum):
    JMP_REL32 = "JmpRel32"
    OTHER_PROLOGUE = "OtherPrologue"
    SLOT_REDIRECTED = "SlotRedirected"


@dataclass(frozen=True)
class HookFinding:
    kind: HookKind
    module: str
    function: str
    expected_va: int
    observed_va: int
    detail: HookDetail


@dataclass(frozen=True)
class ScanReport:
    ntdll_findings: tuple[HookFinding, ...]
    per_module: Mapping[str, tuple[HookFinding, ...]]
    mapped_function_count: int


def _native_named_exports(image: PeImage) -> list[tuple[str, int]]:
    out = []
    for entry in enumerate_exports(image):
        if entry.name is None or entry.forwarded_to is not None:
            continue
        if entry.name.startswith("Nt") or entry.name.startswith("Zw"):
            out.append((entry.name, entry.rva))
    return out


def decode_jmp_rel32(entry_va: int, prologue: bytes) -> int:
    """Target of an E9 rel32 jump at entry_va: next-instruction va plus the
    sign-extended displacement."""
    rel = struct.unpack_from("<i", prologue, 1)[0]
    return (entry_va + 5 + rel) & 0xFFFFFFFFFFFFFFFF


def scan_inline_hooks(ntdll: PeImage) -> list[HookFinding]:
    """Flag every Nt/Zw export whose first bytes deviate from the template.

    An E9 first byte is decoded to its jump target; any other deviation is
    reported without a target. Findings are sorted by function name.
    """
    if ntdll.layout is not Layout.LOADED:
        raise WrongLayout("prologue scan requires a loaded-layout image")
    findings: list[HookFinding] = []
    for name, rva in _native_named_exports(ntdll):
        if rva + 8 > ntdll.extent:
            log.warning("export %s points outside the mapped extent; skipped", name)
            continue
        entry_va = ntdll.image_base + rva
        prologue = ntdll.data[rva : rva + 8]
        if read_clean_ssn(prologue) is not None:
            continue
        if prologue[0] == 0xE9:
            detail = HookDetail.JMP_REL32
            observed = decode_jmp_rel32(entry_va, prologue)
        else:
            detail = HookDetail.OTHER_PROLOGUE
            observed = entry_va
        findings.append(
            HookFinding(
                kind=HookKind.INLINE_PROLOGUE,
                module="ntdll",
                function=name,
                expected_va=entry_va,
                observed_va=observed,
                detail=detail,
            )
        )
    findings.sort(key=lambda f: f.function)
    return findings


def mapped_function_count(ntdll: PeImage) -> int:
    """Number of Nt/Zw exports an inline scan examines."""
    return len(_native_named_exports(ntdll))


def _sibling_spelling(name: str) -> str | None:
    if name.startswith("Zw"):
        return "Nt" + name[2:]
    if name.startswith("Nt"):
        return "Zw" + name[2:]
    return None


def scan_iat_hooks(process: "ProcessModel") -> dict[str, list[HookFinding]]:
    """Compare each module's ntdll-bound slots against the true export VAs.

    Returns one entry per module that references ntdll (empty list when all
    its slots are faithful), keyed and ordered by module name.
    """
    ntdll = process.ntdll()
    exports: dict[str, int] = {}
    for name, rva in _native_named_exports(ntdll.image):
        exports[name] = ntdll.base + rva

    def expected_va(name: str) -> int | None:
        va = exports.get(name)
        if va is None:
            sibling = _sibling_spelling(name)
            if sibling is not None:
                va = exports.get(sibling)
        return va

    results: dict[str, list[HookFinding]] = {}
    for i, module in enumerate(process.modules):
        if i == process.ntdll_index:
            continue
        references_ntdll = False
        findings: list[HookFinding] = []
        for imported in enumerate_imports(module.image):
            if normalize_module_name(imported.dll_name) != normalize_module_name(ntdll.name):
                continue
            references_ntdll = True
            for slot in imported.slots:
                name = slot.imported_name
                if not isinstance(name, str):
                    continue
                if not (name.startswith("Nt") or name.startswith("Zw")):
                    continue
                expected = expected_va(name)
                if expected is None:
                    log.warning(
                        "%s imports %s from ntdll but ntdll does not export it",
                        module.name,
                        name,
                    )
                    continue
                if slot.bound_value != expected:
                    findings.append(
                        HookFinding(
                            kind=HookKind.IAT_MISMATCH,
                            module=module.name,
                            function=name,
                            expected_va=expected,
                            observed_va=slot.bound_value,
                            detail=HookDetail.SLOT_REDIRECTED,
                        )
                    )
        if references_ntdll:
            findings.sort(key=lambda f: f.function)
            results[module.name] = findings
    return dict(sorted(results.items()))


def _hex(value: int) -> str:
    return f"0x{value:016x}"


def finding_to_json(finding: HookFinding) -> dict:
    return {
        "kind": finding.kind.value,
        "module": finding.module,
        "function": finding.function,
        "expected_va": _hex(finding.expected_va),
        "observed_va": _hex(finding.observed_va),
        "detail": finding.detail.value,
    }


def _finding_from_json(record: dict) -> HookFinding:
    return HookFinding(
        kind=HookKind(record["kind"]),
        module=record["module"],
        function=record["function"],
        expected_va=int(record["expected_va"], 16),
        observed_va=int(record["observed_va"], 16),
        detail=HookDetail(record["detail"]),
    )


class ReportFormat(Enum):
    TEXT = "text"
    JSON = "json"


def render_report(report: ScanReport, format: ReportFormat) -> bytes:
    """Render a scan report; text mode mirrors the familiar listing shape."""
    if format is ReportFormat.JSON:
        doc = {
            "ntdll": [finding_to_json(f) for f in report.ntdll_findings],
            "modules": {
                name: [finding_to_json(f) for f in findings]
                for name, findings in report.per_module.items()
            },
            "mapped": report.mapped_function_count,
        }
        return (json.dumps(doc, indent=2) + "\n").encode()

    lines = ["[+] Listing ntdll Nt/Zw functions", "-----"]
    for f in report.ntdll_findings:
        lines.append(f"{f.function} is hooked")
    lines.append(f"Mapped {report.mapped_function_count} functions")
    lines.append("")
    lines.append("[+] Listing hooked modules")
    lines.append("-----")
    for name, findings in report.per_module.items():
        lines.append(f"Checking ntdll.dll at {name} IAT")
        for f in findings:
            lines.append(
                f"|-- {name} IAT to ntdll.dll of function {f.function} "
                f"is hooked to {_hex(f.observed_va)}"
            )
        lines.append(f"+-- {len(findings)} hooked functions.")
        lines.append("")
    return ("\n".join(lines).rstrip("\n") + "\n").encode()


def parse_report(data: bytes) -> ScanReport:
    """Inverse of the JSON rendering, for round-trip checks."""
    doc = json.loads(data)
    return ScanReport(
        ntdll_findings=tuple(_finding_from_json(r) for r in doc["ntdll"]),
        per_module={
            name: tuple(_finding_from_json(r) for r in records)
            for name, records in doc["modules"].items()
        },
        mapped_function_count=doc["mapped"],
    )


def build_report(
    ntdll: PeImage | None = None,
    process: "ProcessModel | None" = None,
) -> ScanReport:
    """Compose a report from an inline scan, an IAT scan, or both."""
    if process is not None and ntdll is None:
        ntdll = process.ntdll().image
    if ntdll is None:
        raise ValueError("need an ntdll image or a process model")
    return ScanReport(
        ntdll_findings=tuple(scan_inline_hooks(ntdll)),
        per_module=(
            {name: tuple(f) for name, f in scan_iat_hooks(process).items()}
            if process is not None
            else {}
        ),
        mapped_function_count=mapped_function_count(ntdll),
    )
