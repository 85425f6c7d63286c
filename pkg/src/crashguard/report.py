"""AddressSanitizer report parsing and bug classification.

Turns the raw text of an ASan error report into a structured
:class:`SanitizerReport`: bug category, access info, crash stack,
auxiliary (freed-by / allocated-by) stacks and the region note line.
Parsing is pure regex scanning; the original text is always preserved
verbatim in ``raw_text``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .errors import MalformedReport, NoUserFrame


class BugKind(Enum):
    """The four templated categories plus a catch-all."""

    HEAP_BUFFER_OVERFLOW = "heap-buffer-overflow"
    GLOBAL_BUFFER_OVERFLOW = "global-buffer-overflow"
    STACK_BUFFER_OVERFLOW = "stack-buffer-overflow"
    HEAP_USE_AFTER_FREE = "heap-use-after-free"
    OTHER = "other"


_SPATIAL_KINDS = frozenset(
    {
        BugKind.HEAP_BUFFER_OVERFLOW,
        BugKind.GLOBAL_BUFFER_OVERFLOW,
        BugKind.STACK_BUFFER_OVERFLOW,
    }
)

_KNOWN_KINDS = {k.value: k for k in BugKind if k is not BugKind.OTHER}


@dataclass(frozen=True)
class BugCategory:
    """Bug classification; ``label`` keeps the verbatim header keyword."""

    kind: BugKind
    label: str

    @property
    def is_spatial(self) -> bool:
        return self.kind in _SPATIAL_KINDS

    @property
    def is_temporal(self) -> bool:
        return self.kind is BugKind.HEAP_USE_AFTER_FREE

    @property
    def is_supported(self) -> bool:
        return self.kind is not BugKind.OTHER

    @classmethod
    def from_token(cls, token: str) -> "BugCategory":
        kind = _KNOWN_KINDS.get(token)
        if kind is None:
            return cls(BugKind.OTHER, token)
        return cls(kind, token)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "label": self.label}


class AccessKind(Enum):
    READ = "read"
    WRITE = "write"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class AccessInfo:
    kind: AccessKind = AccessKind.UNKNOWN
    size_bytes: Optional[int] = None
    address: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "size_bytes": self.size_bytes,
            "address": self.address,
        }


class RegionKind(Enum):
    ARRAY = "array"
    STRUCT = "struct"
    HEAP = "heap"
    STACK = "stack"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class RegionNote:
    """The report line describing the over/under-flowed or freed region."""

    raw: str
    kind: RegionKind

    def to_dict(self) -> dict:
        return {"raw": self.raw, "kind": self.kind.value}


@dataclass(frozen=True)
class StackFrame:
    index: int
    function: str
    file_path: str
    line: Optional[int] = None
    column: Optional[int] = None
    is_library: bool = False

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "function": self.function,
            "file_path": self.file_path,
            "line": self.line,
            "column": self.column,
            "is_library": self.is_library,
        }


@dataclass
class SanitizerReport:
    category: BugCategory
    access: AccessInfo
    crash_stack: list[StackFrame]
    aux_stacks: dict[str, list[StackFrame]] = field(default_factory=dict)
    region: Optional[RegionNote] = None
    raw_text: str = ""

    def to_dict(self) -> dict:
        return {
            "category": self.category.to_dict(),
            "access": self.access.to_dict(),
            "crash_stack": [f.to_dict() for f in self.crash_stack],
            "aux_stacks": {
                name: [f.to_dict() for f in frames]
                for name, frames in self.aux_stacks.items()
            },
            "region": self.region.to_dict() if self.region else None,
            "raw_text": self.raw_text,
        }


# Frames whose file path contains one of these substrings are treated as
# library code and skipped during crash-site resolution. "libsanitizer" is
# the GCC runtime counterpart of LLVM's "compiler-rt" paths.
DEFAULT_LIBRARY_MARKERS: tuple[str, ...] = (
    "compiler-rt",
    "libsanitizer",
    "/usr/include",
    "libc",
)

_HEADER_RE = re.compile(r"AddressSanitizer:\s+(\S+)")
_ACCESS_RE = re.compile(r"^\s*(READ|WRITE) of size (\d+)", re.MULTILINE)
_ADDRESS_RE = re.compile(r"on address (0x[0-9a-fA-F]+)")
_FRAME_RE = re.compile(r"^\s*#(\d+)\s+0x[0-9a-fA-F]+\s+(.*)$")
_LOCATION_RE = re.compile(r"^(.*?):(\d+)(?::(\d+))?$")
_REGION_RE = re.compile(r"is located\b|located in stack of")


def classify_bug(header_line: str) -> BugCategory:
    """Map the keyword after ``AddressSanitizer:`` to a bug category.

    Total for any line containing the prefix; unrecognized keywords come
    back as ``Other`` with the verbatim token as label.
    """
    m = _HEADER_RE.search(header_line)
    if m is None:
        raise MalformedReport(f"no AddressSanitizer header in {header_line!r}")
    token = m.group(1)
    if token == "attempting":
        # "attempting double-free on ..." style headers
        rest = header_line[m.end() :].split()
        if rest:
            token = rest[0]
    return BugCategory.from_token(token)


def _split_frame_body(body: str) -> tuple[str, Optional[str]]:
    """Split the text after ``#N 0xADDR`` into (function, location)."""
    if body.startswith("in "):
        body = body[3:]
    body = body.strip()
    if " " in body:
        function, location = body.rsplit(None, 1)
        if "/" in location or ":" in location or location.startswith("("):
            return function, location
    return body, None


def _parse_frame(line: str, expected_index: int, markers: tuple[str, ...]) -> Optional[StackFrame]:
    m = _FRAME_RE.match(line)
    if m is None:
        return None
    index = int(m.group(1))
    if index != expected_index:
        return None
    function, location = _split_frame_body(m.group(2))
    file_path = ""
    lineno: Optional[int] = None
    column: Optional[int] = None
    if location is not None:
        loc = _LOCATION_RE.match(location)
        if loc:
            file_path = loc.group(1)
            lineno = int(loc.group(2))
            if loc.group(3):
                column = int(loc.group(3))
        else:
            # module+offset form, e.g. "(/usr/bin/prog+0x1234)"
            file_path = location.strip("()")
    is_library = any(marker in file_path for marker in markers)
    return StackFrame(
        index=index,
        function=function,
        file_path=file_path,
        line=lineno,
        column=column,
        is_library=is_library,
    )


def _classify_region(raw: str) -> RegionKind:
    if "global variable" in raw:
        return RegionKind.ARRAY
    if "located in stack of" in raw:
        return RegionKind.STACK
    if re.search(r"\d+-byte region", raw):
        return RegionKind.HEAP
    return RegionKind.UNKNOWN


def parse_report(
    raw: str, library_markers: tuple[str, ...] = DEFAULT_LIBRARY_MARKERS
) -> SanitizerReport:
    """Parse raw sanitizer output into a :class:`SanitizerReport`.

    The category comes from the first ``AddressSanitizer: <kind>`` line
    (SUMMARY lines are ignored), the crash stack from the first numbered
    frame sequence after it, and "freed by" / "allocated by" stacks are
    captured when their section headers are present.

    Raises:
        MalformedReport: no header line, or no parseable crash frames.
    """
    lines = raw.splitlines()
    header_idx = None
    for i, line in enumerate(lines):
        if line.lstrip().startswith("SUMMARY:"):
            continue
        if "AddressSanitizer:" in line and _HEADER_RE.search(line):
            header_idx = i
            break
    if header_idx is None:
        raise MalformedReport("no 'AddressSanitizer:' header line found")

    category = classify_bug(lines[header_idx])

    crash_stack: list[StackFrame] = []
    aux_stacks: dict[str, list[StackFrame]] = {}
    region: Optional[RegionNote] = None

    # section: which frame list new frames are appended to.  None means
    # frames are ignored (e.g. the frame descriptor after a stack-region
    # note, or a second report in the same capture).
    section: Optional[list[StackFrame]] = crash_stack
    for line in lines[header_idx + 1 :]:
        stripped = line.strip()
        if stripped.startswith("SUMMARY:"):
            break
        if stripped.endswith("here:"):
            if "freed by thread" in stripped:
                section = aux_stacks.setdefault("freed by", [])
                continue
            if "allocated by thread" in stripped:
                section = aux_stacks.setdefault("allocated by", [])
                continue
            section = None
            continue
        if region is None and _REGION_RE.search(stripped):
            region = RegionNote(raw=stripped, kind=_classify_region(stripped))
            section = None
            continue
        if section is not None:
            frame = _parse_frame(line, len(section), library_markers)
            if frame is not None:
                section.append(frame)
                continue
            if crash_stack and section is crash_stack and stripped and not _FRAME_RE.match(line):
                # crash stack ended; stop appending until a new section opens
                section = None

    if not crash_stack:
        raise MalformedReport("no parseable stack frames after the header")

    access_kind = AccessKind.UNKNOWN
    size_bytes = None
    m = _ACCESS_RE.search(raw)
    if m:
        access_kind = AccessKind.READ if m.group(1) == "READ" else AccessKind.WRITE
        size_bytes = int(m.group(2))
    addr = _ADDRESS_RE.search(lines[header_idx])
    access = AccessInfo(
        kind=access_kind,
        size_bytes=size_bytes,
        address=addr.group(1) if addr else None,
    )

    return SanitizerReport(
        category=category,
        access=access,
        crash_stack=crash_stack,
        aux_stacks=aux_stacks,
        region=region,
        raw_text=raw,
    )


def resolve_crash_frame(report: SanitizerReport) -> StackFrame:
    """Return the lowest-index user-code frame with a line number.

    Raises:
        NoUserFrame: every frame is library code or lacks a line number.
    """
    for frame in report.crash_stack:
        if not frame.is_library and frame.line is not None:
            return frame
    raise NoUserFrame(
        "no user-code frame with a line number in the crash stack"
    )
