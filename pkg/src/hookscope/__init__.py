"""Static analysis of 64-bit PE images: export/import views, hook scanning,
syscall-number resolution, and a symbolic IAT-rewrite simulator.

Operates exclusively on files and synthetic in-memory image models; nothing
here attaches to, reads, or modifies a running process.
"""

from .errors import HookscopeError
from .hooks import (
    HookDetail,
    HookFinding,
    HookKind,
    ReportFormat,
    ScanReport,
    build_report,
    render_report,
    scan_iat_hooks,
    scan_inline_hooks,
)
from .image import (
    DataDirectory,
    ExportEntry,
    IatSlot,
    ImportModule,
    Layout,
    PeImage,
    SectionView,
    enumerate_exports,
    enumerate_imports,
    parse_image,
    read_bytes_at_va,
    rva_to_offset,
)
from .simulate import (
    CallTrace,
    ChainVerdict,
    ModuleEntry,
    ProcessModel,
    RewritePlan,
    apply_rewrite,
    plan_rewrite,
    resolve_call,
    verify_chain,
)
from .ssn import (
    SsnSearchParams,
    derive_ssn_by_sort,
    derive_ssn_neighbors,
    find_syscall_instruction,
    hash_name,
    read_clean_ssn,
)
from .table import (
    BASE_FUNCTIONS,
    RewriteConfig,
    SyscallInfo,
    SyscallList,
    assign_stub_slots,
    build_syscall_list,
    deserialize_list,
    serialize_list,
)

__version__ = "0.1.0"

__all__ = [
    "HookscopeError",
    "HookDetail",
    "HookFinding",
    "HookKind",
    "ReportFormat",
    "ScanReport",
    "build_report",
    "render_report",
    "scan_iat_hooks",
    "scan_inline_hooks",
    "DataDirectory",
    "ExportEntry",
    "IatSlot",
    "ImportModule",
    "Layout",
    "PeImage",
    "SectionView",
    "enumerate_exports",
    "enumerate_imports",
    "parse_image",
    "read_bytes_at_va",
    "rva_to_offset",
    "CallTrace",
    "ChainVerdict",
    "ModuleEntry",
    "ProcessModel",
    "RewritePlan",
    "apply_rewrite",
    "plan_rewrite",
    "resolve_call",
    "verify_chain",
    "SsnSearchParams",
    "derive_ssn_by_sort",
    "derive_ssn_neighbors",
    "find_syscall_instruction",
    "hash_name",
    "read_clean_ssn",
    "BASE_FUNCTIONS",
    "RewriteConfig",
    "SyscallInfo",
    "SyscallList",
    "assign_stub_slots",
    "build_syscall_list",
    "deserialize_list",
    "serialize_list",
    "__version__",
]
