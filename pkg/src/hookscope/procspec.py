"""Process-spec files: a JSON description of a loaded process.

Schema:
    {
      "modules": [
        {"name": str, "base": "0x...", "path": str}            # raw dump file
        or {"name": str, "base": "0x...", "inline_fixture": {...}}
      ],
      "ntdll": str,          # name of the module that plays ntdll
      "config": {"stub_base": "0x...", "table_va": "0x..."},
      "seed": int            # optional; HOOKSCOPE_SEED used when absent
    }

Inline fixtures make a spec fully self-contained:
    ntdll form:  {"type": "ntdll", "functions": [["ZwFoo", 7], ...],
                  "hooks": {"ZwFoo": {"kind": "jmp_rel32", "target_delta": "0x..."}
                            or {"kind": "garbage"}},
                  "stride": 32, "base_rva": "0x1000", "syscall_offset": "0x12",
                  "alias_both_prefixes": false}
    module form: {"type": "module", "imports": [["ntdll.dll", "NtFoo"], ...],
                  "tamper": {"NtFoo": "0x..."}}
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Any, Mapping, Union

from .errors import SpecInvalid, UnresolvedImport
from .fixtures import (
    GarbageHook,
    Hook,
    JmpRel32Hook,
    ModuleSpec,
    NtdllSpec,
    build_process_model,
    build_synthetic_module,
    build_synthetic_ntdll,
)
from .image import Layout, PeImage, enumerate_exports, parse_image
from .simulate import ProcessModel, normalize_module_name
from .table import RewriteConfig

SEED_ENV_VAR = "HOOKSCOPE_SEED"


def _to_int(value: Union[int, str], what: str) -> int:
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            pass
    raise SpecInvalid(f"{what} must be an integer or a hex string, got {value!r}")


def _hook_from_json(doc: Mapping[str, Any]) -> Hook:
    kind = doc.get("kind")
    if kind == "jmp_rel32":
        return JmpRel32Hook(target_delta=_to_int(doc.get("target_delta", 0), "target_delta"))
    if kind == "garbage":
        return GarbageHook()
    raise SpecInvalid(f"unknown hook kind {kind!r}")


def ntdll_spec_from_json(doc: Mapping[str, Any]) -> NtdllSpec:
    functions = tuple(
        (name, _to_int(ssn, f"SSN of {name}")) for name, ssn in doc.get("functions", [])
    )
    hooks = {name: _hook_from_json(h) for name, h in doc.get("hooks", {}).items()}
    return NtdllSpec(
        functions=functions,
        hooks=hooks,
        stride=_to_int(doc.get("stride", 32), "stride"),
        base_rva=_to_int(doc.get("base_rva", 0x1000), "base_rva"),
        syscall_offset=_to_int(doc.get("syscall_offset", 0x12), "syscall_offset"),
        alias_both_prefixes=bool(doc.get("alias_both_prefixes", False)),
    )


def module_spec_from_json(name: str, doc: Mapping[str, Any]) -> ModuleSpec:
    imports = tuple((dll, fn) for dll, fn in doc.get("imports", []))
    tamper = {
        fn: _to_int(value, f"tamper value of {fn}") for fn, value in doc.get("tamper", {}).items()
    }
    return ModuleSpec(name=name, imports=imports, tamper=tamper)


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR, "0")
    try:
        return int(raw, 0)
    except ValueError:
        raise SpecInvalid(f"{SEED_ENV_VAR}={raw!r} is not an integer")


def _sibling_spelling(name: str) -> str | None:
    if name.startswith("Zw"):
        return "Nt" + name[2:]
    if name.startswith("Nt"):
        return "Zw" + name[2:]
    return None


def load_process_spec(path: Union[str, Path], seed: int | None = None) -> ProcessModel:
    """Materialize a process model from a spec file.

    Module images come from raw dump files (path form) or are generated on
    the spot (inline_fixture form); imports of generated modules are resolved
    against the spec's ntdll exports.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise SpecInvalid(f"cannot read process spec {path}: {exc}") from exc
    if not isinstance(doc, dict) or "modules" not in doc or "ntdll" not in doc:
        raise SpecInvalid("process spec needs 'modules' and 'ntdll' keys")

    if seed is None:
        seed = _to_int(doc["seed"], "seed") if "seed" in doc else default_seed()

    config_doc = doc.get("config", {})
    config = RewriteConfig(
        stub_base=_to_int(config_doc.get("stub_base", 0), "stub_base"),
        table_va=_to_int(config_doc.get("table_va", 0), "table_va"),
    )

    ntdll_name = doc["ntdll"]
    module_docs = doc["modules"]
    ntdll_doc = None
    for m in module_docs:
        if normalize_module_name(m.get("name", "")) == normalize_module_name(ntdll_name):
            ntdll_doc = m
            break
    if ntdll_doc is None:
        raise SpecInvalid(f"ntdll module {ntdll_name!r} not among the spec modules")

    def materialize(m: Mapping[str, Any], resolver=None) -> PeImage:
        base = _to_int(m.get("base", 0), f"base of {m.get('name')}")
        if "path" in m:
            dump = Path(m["path"])
            if not dump.is_absolute():
                dump = path.parent / dump
            try:
                raw = dump.read_bytes()
            except OSError as exc:
                raise SpecInvalid(f"cannot read module dump {dump}: {exc}") from exc
            return parse_image(raw, Layout.LOADED, base)
        if "inline_fixture" in m:
            fixture = m["inline_fixture"]
            ftype = fixture.get("type")
            if ftype == "ntdll":
                return build_synthetic_ntdll(
                    ntdll_spec_from_json(fixture), image_base=base, seed=seed
                )
            if ftype == "module":
                if resolver is None:
                    raise SpecInvalid("module fixtures need the ntdll to resolve against")
                return build_synthetic_module(
                    module_spec_from_json(m["name"], fixture), resolver, image_base=base
                )
            raise SpecInvalid(f"unknown inline fixture type {ftype!r}")
        raise SpecInvalid(f"module {m.get('name')!r} has neither 'path' nor 'inline_fixture'")

    ntdll_image = materialize(ntdll_doc)

    exports: dict[str, int] = {}
    for entry in enumerate_exports(ntdll_image):
        if entry.name is not None and entry.forwarded_to is None:
            exports[entry.name] = ntdll_image.image_base + entry.rva

    def resolve(dll: str, fn: Union[str, int]) -> int:
        if normalize_module_name(dll) != normalize_module_name(ntdll_name):
            raise UnresolvedImport(
                f"only imports from {ntdll_name!r} can be resolved, got {dll!r}"
            )
        if isinstance(fn, str):
            va = exports.get(fn)
            if va is None:
                sibling = _sibling_spelling(fn)
                if sibling is not None:
                    va = exports.get(sibling)
            if va is not None:
                return va
        raise UnresolvedImport(f"{ntdll_name} does not export {fn!r}")

    modules: list[tuple[str, PeImage]] = []
    bases: list[int] = []
    for m in module_docs:
        if m is ntdll_doc:
            continue
        name = m.get("name")
        if not name:
            raise SpecInvalid("every module needs a name")
        if "inline_fixture" in m and m["inline_fixture"].get("type") == "module":
            spec = module_spec_from_json(name, m["inline_fixture"])
            resolver = {(dll, fn): resolve(dll, fn) for dll, fn in spec.imports}
            image = build_synthetic_module(
                spec, resolver, image_base=_to_int(m.get("base", 0), f"base of {name}")
            )
        else:
            image = materialize(m)
        modules.append((name, image))
        bases.append(image.image_base)

    model = build_process_model(ntdll_image, modules, bases, config)
    if normalize_module_name(ntdll_name) != "ntdll":
        entries = list(model.modules)
        entries[0] = dataclasses.replace(entries[0], name=ntdll_doc["name"])
        model = ProcessModel(modules=tuple(entries), ntdll_index=0, config=config)
    return model
