"""Source-window extraction around the resolved crash frame.

The extractor is byte/line oriented and content-agnostic: windows are read
with surrogate-escaping so that re-encoding reproduces the on-disk bytes
exactly, whatever the file encoding is.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import LineOutOfRange, SourceFileMissing
from .report import StackFrame


@dataclass(frozen=True)
class GeneratedPolicy:
    """Path-based detection of build-system-generated code.

    A crash file counts as generated when any of its path components is in
    ``components`` or any of ``substrings`` occurs in the path. Policy is
    data, not code: projects with unusual build layouts extend the lists.
    """

    components: tuple[str, ...] = ("build", "builddir", "cmake-build")
    substrings: tuple[str, ...] = ()


DEFAULT_GENERATED_POLICY = GeneratedPolicy()


@dataclass
class CodeContext:
    """A contiguous window of source lines around the crash line."""

    file_path: str
    resolved_path: Path
    crash_line: int
    crash_column: Optional[int]
    window_start: int
    lines: list[tuple[int, str]] = field(default_factory=list)
    is_generated: bool = False
    # optional non-contiguous prefix: the nearest enclosing function header
    function_header: Optional[tuple[int, str]] = None

    @property
    def crash_line_text(self) -> str:
        for number, text in self.lines:
            if number == self.crash_line:
                return text
        return ""

    def to_dict(self) -> dict:
        return {
            "file_path": self.file_path,
            "resolved_path": str(self.resolved_path),
            "crash_line": self.crash_line,
            "crash_column": self.crash_column,
            "window_start": self.window_start,
            "lines": [[n, t] for n, t in self.lines],
            "is_generated": self.is_generated,
            "function_header": list(self.function_header) if self.function_header else None,
        }


def resolve_source_path(file_path: str, source_root: Path) -> Path:
    """Locate a report path under ``source_root``.

    Sanitizer reports carry paths from the build environment (often an
    absolute container path like ``/src/project/dir/file.c``). Resolution
    tries the path as-is, then rebases progressively shorter suffixes of it
    onto the source root.
    """
    p = Path(file_path)
    if p.is_absolute() and p.is_file():
        return p
    candidate = source_root / file_path.lstrip("/")
    if candidate.is_file():
        return candidate
    parts = p.parts[1:] if p.is_absolute() else p.parts
    for skip in range(1, len(parts)):
        candidate = source_root.joinpath(*parts[skip:])
        if candidate.is_file():
            return candidate
    raise SourceFileMissing(f"{file_path} not found under {source_root}")


def detect_generated(
    frame: StackFrame,
    source_root: Path,
    policy: GeneratedPolicy = DEFAULT_GENERATED_POLICY,
) -> bool:
    """True iff the crash file path matches the generated-code policy."""
    parts = Path(frame.file_path).parts
    if any(part in policy.components for part in parts):
        return True
    return any(s in frame.file_path for s in policy.substrings)


_FUNCTION_HEADER_RE = re.compile(r"^[A-Za-z_][\w\s\*]*\b[A-Za-z_]\w*\s*\(")
_FUNCTION_SEARCH_SPAN = 200


def _find_function_header(lines: list[str], before: int) -> Optional[tuple[int, str]]:
    """Nearest preceding line that looks like a function definition.

    Heuristic: an identifier at column zero followed by a parameter list,
    with an opening brace on the same or one of the next two lines.
    """
    lo = max(0, before - _FUNCTION_SEARCH_SPAN)
    for i in range(before - 1, lo - 1, -1):
        line = lines[i]
        if not _FUNCTION_HEADER_RE.match(line) or line.rstrip().endswith(";"):
            continue
        lookahead = [line] + lines[i + 1 : i + 3]
        if any(candidate.rstrip().endswith("{") or candidate.strip() == "{" for candidate in lookahead):
            return (i + 1, line)
    return None


def extract_context(
    frame: StackFrame,
    source_root: Path,
    radius: int = 2,
    policy: GeneratedPolicy = DEFAULT_GENERATED_POLICY,
    include_function_header: bool = False,
) -> CodeContext:
    """Read the window ``[crash_line - radius, crash_line + radius]``.

    The window is clipped to file bounds and matches the on-disk content
    exactly (no trimming, no tab conversion).

    Raises:
        SourceFileMissing: crash file absent under the source root.
        LineOutOfRange: file is shorter than the crash line.
    """
    if frame.line is None:
        raise LineOutOfRange(f"frame {frame.index} has no line number")
    path = resolve_source_path(frame.file_path, source_root)
    text = path.read_bytes().decode("utf-8", errors="surrogateescape")
    lines = text.split("\n")
    if frame.line > len(lines):
        raise LineOutOfRange(
            f"{path} has {len(lines)} lines, crash line is {frame.line}"
        )
    start = max(1, frame.line - radius)
    end = min(len(lines), frame.line + radius)
    window = [(n, lines[n - 1]) for n in range(start, end + 1)]
    header = None
    if include_function_header:
        header = _find_function_header(lines, start - 1)
    return CodeContext(
        file_path=frame.file_path,
        resolved_path=path,
        crash_line=frame.line,
        crash_column=frame.column,
        window_start=start,
        lines=window,
        is_generated=detect_generated(frame, source_root, policy),
        function_header=header,
    )
