"""Command-line front end: scan, ssn, table, simulate.

Every command is file-in/file-out; there is deliberately no way to attach to,
read, or modify a running process. Exit codes are the only pass/fail channel:
0 clean/pass, 1 findings or a failed verdict, 2 error.
"""

from __future__ import annotations

import json
from pathlib import Path

import click

from .errors import HookscopeError
from .hooks import ReportFormat, build_report, render_report
from .image import Layout, enumerate_imports, parse_image
from .procspec import load_process_spec
from .simulate import (
    DirectNtdll,
    ForeignTarget,
    StubSlot,
    SyscallSite,
    TableLookup,
    apply_rewrite,
    normalize_module_name,
    plan_rewrite,
    resolve_call,
    trace_to_json,
    verify_chain,
)
from .ssn import (
    SsnSearchParams,
    derive_ssn_by_sort,
    derive_ssn_neighbors,
    read_clean_ssn,
)
from .table import (
    NativeExportIndex,
    assign_stub_slots,
    build_syscall_list,
    debug_dump,
    deserialize_list,
    serialize_list,
)

EXIT_CLEAN = 0
EXIT_FINDINGS = 1
EXIT_ERROR = 2


def _parse_base(value: str | None) -> int:
    if value is None:
        return 0
    try:
        return int(value, 16)
    except ValueError:
        raise click.UsageError(f"--base {value!r} is not a hex address")


def _load_image(path: str, layout: str, base: str | None):
    kind = Layout.FILE if layout == "file" else Layout.LOADED
    if kind is Layout.LOADED and base is None:
        raise click.UsageError("loaded-layout input requires --base")
    data = Path(path).read_bytes()
    return parse_image(data, kind, _parse_base(base))


def _params(stride: int, max_neighbours: int, scan_limit: int) -> SsnSearchParams:
    return SsnSearchParams(
        max_neighbours=max_neighbours,
        stride_bytes=stride,
        syscall_scan_limit=scan_limit,
    )


def _fail(exc: Exception) -> "click.exceptions.Exit":
    click.echo(f"error: {exc}", err=True)
    return click.exceptions.Exit(EXIT_ERROR)


layout_option = click.option(
    "--layout", type=click.Choice(["file", "loaded"]), default="loaded", show_default=True
)
base_option = click.option("--base", default=None, help="Image base address (hex).")
format_option = click.option(
    "--format", "fmt", type=click.Choice(["text", "json"]), default="text", show_default=True
)
stride_option = click.option("--stride", type=int, default=32, show_default=True)
neighbours_option = click.option("--max-neighbours", type=int, default=500, show_default=True)
scan_limit_option = click.option("--scan-limit", type=int, default=512, show_default=True)


@click.group()
@click.version_option()
def main() -> None:
    """Static PE hook scanner, syscall-number resolver, and rewrite simulator."""


def _looks_like_spec(path: Path) -> bool:
    try:
        head = path.open("rb").read(2)
    except OSError:
        return False
    return head[:1] in (b"{", b" ", b"\n", b"\t")


@main.command()
@click.argument("input", type=click.Path(exists=True, dir_okay=False))
@layout_option
@base_option
@format_option
def scan(input: str, layout: str, base: str | None, fmt: str) -> None:
    """Scan for inline hooks (PE image) or inline + IAT hooks (process spec)."""
    path = Path(input)
    try:
        if _looks_like_spec(path):
            process = load_process_spec(path)
            report = build_report(process=process)
            if fmt == "text":
                click.echo("[+] Listing loaded modules")
                click.echo("-----")
                for entry in process.modules:
                    click.echo(f"{entry.name} is loaded at 0x{entry.base:016x}.")
                click.echo("")
        else:
            image = _load_image(input, layout, base)
            report = build_report(ntdll=image)
    except HookscopeError as exc:
        raise _fail(exc)
    click.echo(render_report(report, ReportFormat(fmt)).decode(), nl=False)
    findings = bool(report.ntdll_findings) or any(report.per_module.values())
    if findings:
        raise click.exceptions.Exit(EXIT_FINDINGS)


@main.command()
@click.argument("ntdll", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--method",
    type=click.Choice(["prologue", "sort", "halos"]),
    required=True,
    help="Resolution route: direct prologue read, address-sorted Zw index, or neighbor derivation.",
)
@layout_option
@base_option
@format_option
@stride_option
@neighbours_option
@scan_limit_option
def ssn(
    ntdll: str,
    method: str,
    layout: str,
    base: str | None,
    fmt: str,
    stride: int,
    max_neighbours: int,
    scan_limit: int,
) -> None:
    """Resolve service numbers for the Nt/Zw exports of an ntdll-like image."""
    try:
        image = _load_image(ntdll, layout, base)
        params = _params(stride, max_neighbours, scan_limit)
        derived: list[str] = []
        if method == "sort":
            mapping = derive_ssn_by_sort(image)
        else:
            index = NativeExportIndex(image)
            mapping = {}
            for rva, name in sorted(index.canonical_by_rva.items(), key=lambda kv: kv[1]):
                prologue = image.data[rva : rva + 8]
                direct = read_clean_ssn(prologue)
                if method == "prologue":
                    if direct is not None:
                        mapping[name] = direct
                    continue
                mapping[name] = derive_ssn_neighbors(image, image.image_base + rva, params)
                if direct is None:
                    derived.append(name)
    except HookscopeError as exc:
        raise _fail(exc)

    if fmt == "json":
        click.echo(json.dumps({"method": method, "ssns": mapping, "derived": derived}, indent=2))
    else:
        for name in sorted(mapping):
            suffix = " (derived)" if name in derived else ""
            click.echo(f"{name} {mapping[name]}{suffix}")


@main.command()
@click.argument("ntdll", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Blob output path.")
@click.option("--json-out", type=click.Path(dir_okay=False), default=None)
@click.option("--extra", multiple=True, help="Additional function names to include.")
@base_option
@format_option
@stride_option
@neighbours_option
@scan_limit_option
def table(
    ntdll: str,
    out: str,
    json_out: str | None,
    extra: tuple[str, ...],
    base: str | None,
    fmt: str,
    stride: int,
    max_neighbours: int,
    scan_limit: int,
) -> None:
    """Build the syscall table over an ntdll image; write blob + JSON dump."""
    try:
        image = _load_image(ntdll, "loaded", base)
        params = _params(stride, max_neighbours, scan_limit)
        built = build_syscall_list(image, params, extra_names=extra)
        blob = serialize_list(built)
        Path(out).write_bytes(blob)
        rows = debug_dump(built, image)
        dump = {
            "count": built.count,
            "entries": rows,
            "base_indices": list(built.base_indices),
        }
        json_path = Path(json_out) if json_out else Path(out).with_suffix(".json")
        json_path.write_text(json.dumps(dump, indent=2) + "\n")
    except HookscopeError as exc:
        raise _fail(exc)
    if fmt == "json":
        click.echo(json.dumps(dump, indent=2))
    else:
        for row in rows:
            click.echo(f"e[{row['index']}] {row['name']} {row['ssn']} {row['address']}")
        click.echo(f"[+] Mapped {built.count} functions")
        click.echo(f"[*] Blob: {out} ({len(blob)} bytes)")


@main.command()
@click.argument("process_spec", type=click.Path(exists=True, dir_okay=False))
@click.option("--table", "table_blob", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--target", "targets", multiple=True, help="Module to rewrite (ordered).")
@click.option("--force", "forced", multiple=True, help="Target with table growth enabled.")
@format_option
@stride_option
@neighbours_option
@scan_limit_option
def simulate(
    process_spec: str,
    table_blob: str | None,
    targets: tuple[str, ...],
    forced: tuple[str, ...],
    fmt: str,
    stride: int,
    max_neighbours: int,
    scan_limit: int,
) -> None:
    """Plan and apply the IAT rewrite, then resolve every Nt/Zw import."""
    try:
        process = load_process_spec(process_spec)
        params = _params(stride, max_neighbours, scan_limit)
        if table_blob is not None:
            built = deserialize_list(Path(table_blob).read_bytes())
        else:
            built = build_syscall_list(process.ntdll().image, params)
        built = assign_stub_slots(built, process.config)

        ordered = [(name, name in forced) for name in targets]
        for name in forced:
            if name not in targets:
                ordered.append((name, True))

        plan = plan_rewrite(process, built, ordered, params)
        rewritten = apply_rewrite(process, plan)

        results = []
        all_passed = True
        ntdll_norm = normalize_module_name(rewritten.ntdll().name)
        for target_name, _ in ordered:
            module = rewritten.find(target_name)
            assert module is not None
            for imported in enumerate_imports(module.image):
                if normalize_module_name(imported.dll_name) != ntdll_norm:
                    continue
                for slot in imported.slots:
                    name = slot.imported_name
                    if not isinstance(name, str):
                        continue
                    if not (name.startswith("Nt") or name.startswith("Zw")):
                        continue
                    trace = resolve_call(rewritten, module.name, name, plan.table)
                    verdict = verify_chain(trace, rewritten)
                    all_passed = all_passed and verdict.passed
                    results.append((module.name, name, trace, verdict))
    except HookscopeError as exc:
        raise _fail(exc)

    if fmt == "json":
        doc = {
            "traces": [
                {
                    "module": module,
                    "function": function,
                    "steps": trace_to_json(trace),
                    "verdict": {"passed": verdict.passed, "reasons": list(verdict.reasons)},
                }
                for module, function, trace, verdict in results
            ],
            "all_passed": all_passed,
        }
        click.echo(json.dumps(doc, indent=2))
    else:
        for module, function, trace, verdict in results:
            parts = [f"{module}!{function}"]
            for step in trace.steps[1:]:
                if isinstance(step, StubSlot):
                    parts.append(f"Fnc{step.index:04X}")
                elif isinstance(step, TableLookup):
                    parts.append(f"ssn {step.ssn}")
                elif isinstance(step, SyscallSite):
                    parts.append(f"syscall 0x{step.va:016x}")
                elif isinstance(step, DirectNtdll):
                    parts.append(f"ntdll 0x{step.va:016x}")
                elif isinstance(step, ForeignTarget):
                    parts.append(f"foreign 0x{step.va:016x}")
            status = "ok" if verdict.passed else "FAIL " + ",".join(verdict.reasons)
            click.echo(" -> ".join(parts) + f" [{status}]")
        click.echo(f"[+] Resolved {len(results)} calls")
    if not all_passed:
        raise click.exceptions.Exit(EXIT_FINDINGS)


if __name__ == "__main__":
    main()
