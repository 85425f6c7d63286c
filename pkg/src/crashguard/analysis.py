"""Crash-site analysis: prompt construction, backend queries, validation.

One repair attempt issues at most one backend query. The backend is
pluggable: a remote chat-completion endpoint, or an offline heuristic that
derives the key variables straight from the crash line so the whole
pipeline can run hermetically.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import requests

from .context import CodeContext
from .errors import (
    BackendRefused,
    BackendUnavailable,
    RejectedResponse,
    RejectReason,
)
from .report import BugCategory, BugKind, SanitizerReport

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Prompt template
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KeySet:
    """JSON keys the backend must answer with, per bug category.

    Only the global-buffer key set is fully dictated by the guard-template
    design; the heap/stack/temporal sets extend the same naming scheme.
    """

    buffer_key: Optional[str]
    size_key: Optional[str]
    ptr_key: str
    buffer_noun: str
    size_hint: str


KEY_SETS: dict[BugKind, KeySet] = {
    BugKind.GLOBAL_BUFFER_OVERFLOW: KeySet(
        buffer_key="g_buffer",
        size_key="g_buffer_size",
        ptr_key="g_ptr",
        buffer_noun="global buffer",
        size_hint="sizeof($g_buffer)",
    ),
    BugKind.STACK_BUFFER_OVERFLOW: KeySet(
        buffer_key="s_buffer",
        size_key="s_buffer_size",
        ptr_key="s_ptr",
        buffer_noun="stack buffer",
        size_hint="sizeof($s_buffer)",
    ),
    BugKind.HEAP_BUFFER_OVERFLOW: KeySet(
        buffer_key="h_buffer",
        size_key="h_buffer_size",
        ptr_key="h_ptr",
        buffer_noun="heap buffer",
        size_hint="malloc_usable_size($h_buffer)",
    ),
    BugKind.HEAP_USE_AFTER_FREE: KeySet(
        buffer_key=None,
        size_key=None,
        ptr_key="uaf_ptr",
        buffer_noun="freed buffer",
        size_hint="",
    ),
}

SYSTEM_PREAMBLE = """\
You are a software developer maintaining a large project.
You are working on an issue submitted to your project.
The issue contains a description marked between <issue> and </issue>.
Another developer has already collected the code context related to the issue for you.
Your task is to identify the key variables of the issue by answering the questions below.
"""

OUTPUT_FORMAT_CONSTRAINT = "Output in ```json ``` format."
NO_INTEGER_CONSTRAINT = "DO NOT use any integer literal in the answer."


def _describe_keys(category: BugCategory, keys: Optional[KeySet]) -> str:
    label = category.label
    if keys is None:
        return (
            f"The bug is a {label}. No guard template exists for this category;\n"
            "report the single pointer or buffer expression involved as \"ptr\".\n"
        )
    if keys.buffer_key is None:
        return (
            f"The bug is a {label} and should be described in the following:\n"
            f"  - {keys.ptr_key}: the pointer that was freed and is used again "
            "at the crash location, format is (void *)\n"
        )
    return (
        f"The bug is a {label} and should be described in the following:\n"
        f"  - {keys.buffer_key}: the {keys.buffer_noun} the program is trying "
        "to access, format is (void *)\n"
        f"  - {keys.size_key}: the end of the {keys.buffer_noun}, presented as "
        f"{keys.size_hint}\n"
        f"  - {keys.ptr_key}: the address of the element visited when the "
        "program crashes, format is (void *)\n"
    )


def _reminder_block(keys: Optional[KeySet]) -> str:
    lines = ["REMEMBER:", f"- {OUTPUT_FORMAT_CONSTRAINT}"]
    if keys is not None and keys.buffer_key is not None:
        lines.append(
            f"- for {keys.ptr_key}, ONLY USE VARIABLES THAT EXIST IN "
            "<context> ... </context>"
        )
        lines.append(
            f"- for {keys.buffer_key}, USE VARIABLES EITHER IN "
            "<context> ... </context> or <log> ... </log>"
        )
        lines.append(
            f"- for {keys.buffer_key}, whether <log_type> indicates a struct "
            f"or an array, represent it as (void *) (${keys.buffer_key})"
        )
    elif keys is not None:
        lines.append(
            f"- for {keys.ptr_key}, ONLY USE VARIABLES THAT EXIST IN "
            "<context> ... </context>"
        )
    lines.append(f"- {NO_INTEGER_CONSTRAINT}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class IssueBlock:
    type: str
    crash_location: str
    log_type: str
    log: str
    context: str

    def render(self) -> str:
        return (
            "<issue>\n"
            f"    <type>{self.type}</type>\n"
            f"    <crash_location>{self.crash_location}</crash_location>\n"
            f"    <log_type>{self.log_type}</log_type>\n"
            f"    <log>{self.log}</log>\n"
            "    <context>\n"
            f"{self.context}"
            "    </context>\n"
            "</issue>\n"
        )


@dataclass(frozen=True)
class AnalysisPrompt:
    system_preamble: str
    issue_block: IssueBlock
    few_shot: Optional[tuple[str, str]]
    rendered: str
    # structured inputs carried along for offline analysis and validation
    category: BugCategory = field(default=BugCategory(BugKind.OTHER, "other"))
    crash_line_text: str = ""


def build_prompt(
    report: SanitizerReport,
    ctx: CodeContext,
    few_shot: Optional[tuple[str, str]] = None,
) -> AnalysisPrompt:
    """Render the analysis prompt for a resolved crash site.

    Rendering is deterministic: the same (report, ctx) pair always yields
    byte-identical text.
    """
    keys = KEY_SETS.get(report.category.kind)
    location = f" line {ctx.crash_line}"
    if ctx.crash_column is not None:
        location += f", column {ctx.crash_column}"
    region = report.region
    issue = IssueBlock(
        type=report.category.label,
        crash_location=location,
        log_type=region.kind.value if region else "unknown",
        log=region.raw if region else "",
        context=_render_context(ctx),
    )
    parts = [SYSTEM_PREAMBLE, "\n", _describe_keys(report.category, keys), "\n"]
    parts.append(_reminder_block(keys))
    if few_shot is not None:
        example_issue, example_output = few_shot
        parts.append(
            "\nFor example, given the following input:\n"
            f"{example_issue}\n"
            "You are supposed to return:\n"
            f"{example_output}\n"
        )
    parts.append("\nHere are your inputs:\n")
    parts.append(issue.render())
    return AnalysisPrompt(
        system_preamble=SYSTEM_PREAMBLE,
        issue_block=issue,
        few_shot=few_shot,
        rendered="".join(parts),
        category=report.category,
        crash_line_text=ctx.crash_line_text,
    )


def _render_context(ctx: CodeContext) -> str:
    out = []
    if ctx.function_header is not None:
        number, text = ctx.function_header
        out.append(f"    {number}: {text}\n")
        if number + 1 < ctx.window_start:
            out.append("    // ...\n")
    for number, text in ctx.lines:
        out.append(f"    {number}: {text}\n")
    return "".join(out)


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------

class BackendKind(Enum):
    REMOTE_CHAT = "remote"
    OFFLINE_HEURISTIC = "offline"


@dataclass
class BackendConfig:
    kind: BackendKind = BackendKind.OFFLINE_HEURISTIC
    endpoint: Optional[str] = None
    model_name: str = "offline-heuristic"
    temperature: float = 0.0
    max_output_tokens: int = 256
    api_key_env: str = "CRASHGUARD_API_KEY"
    timeout: float = 60.0
    retries: int = 2
    record_dir: Optional[Path] = None

    def validate(self) -> None:
        if self.kind is BackendKind.REMOTE_CHAT:
            if not self.endpoint:
                raise ValueError("remote backend requires an endpoint URL")
            if not self.api_key_env:
                raise ValueError("remote backend requires an api_key_env name")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "wall_time": self.wall_time,
        }


def query_backend(
    prompt: AnalysisPrompt, cfg: BackendConfig, attempt_id: str = "attempt"
) -> tuple[str, TokenUsage]:
    """Issue the single analysis query for this attempt.

    Remote backends get one chat-completion POST (single user message),
    retried at most ``cfg.retries`` times on transport errors. The offline
    heuristic computes an answer locally and reports zero token usage.
    """
    cfg.validate()
    if cfg.kind is BackendKind.OFFLINE_HEURISTIC:
        started = time.perf_counter()
        response = _heuristic_response(prompt)
        return response, TokenUsage(0, 0, time.perf_counter() - started)
    return _query_remote(prompt, cfg, attempt_id)


def _query_remote(
    prompt: AnalysisPrompt, cfg: BackendConfig, attempt_id: str
) -> tuple[str, TokenUsage]:
    body = {
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": prompt.rendered}],
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_output_tokens,
    }
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(cfg.api_key_env, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    started = time.perf_counter()
    last_error: Optional[Exception] = None
    for attempt in range(cfg.retries + 1):
        try:
            resp = requests.post(
                cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout
            )
            break
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_error = exc
            log.warning("backend transport error (try %d): %s", attempt + 1, exc)
    else:
        raise BackendUnavailable(str(last_error))
    wall = time.perf_counter() - started

    if resp.status_code < 200 or resp.status_code >= 300:
        raise BackendRefused(f"HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        payload = resp.json()
        content = payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendRefused(f"unparseable completion payload: {exc}")
    usage = payload.get("usage", {})
    token_usage = TokenUsage(
        input_tokens=int(usage.get("prompt_tokens", 0) or 0),
        output_tokens=int(usage.get("completion_tokens", 0) or 0),
        wall_time=wall,
    )
    if cfg.record_dir is not None:
        cfg.record_dir.mkdir(parents=True, exist_ok=True)
        record = {"request": body, "response": payload, "wall_time": wall}
        (cfg.record_dir / f"{attempt_id}.json").write_text(
            json.dumps(record, indent=2)
        )
    return content, token_usage


# --------------------------------------------------------------------------
# Offline heuristic
# --------------------------------------------------------------------------

_BASE_PATH = r"[A-Za-z_]\w*(?:(?:->|\.)[A-Za-z_]\w*)*"
_SUBSCRIPT_RE = re.compile(rf"({_BASE_PATH})\s*\[([^\[\]]*)\]")
_DEREF_RE = re.compile(rf"\*\s*({_BASE_PATH})")
_ARROW_RE = re.compile(rf"({_BASE_PATH})\s*->")


def _innermost_access(line: str) -> Optional[tuple[str, str]]:
    """Return (base, full access expression) of the innermost subscript
    or dereference on the crash line, or None."""
    matches = list(_SUBSCRIPT_RE.finditer(line))
    if matches:
        m = matches[-1] if len(matches) > 1 else matches[0]
        # innermost: the subscript whose index part contains no '['
        for cand in matches:
            if "[" not in cand.group(2):
                m = cand
                break
        base = cand_base = m.group(1)
        return cand_base, f"&{base}[{m.group(2).strip()}]"
    m = _DEREF_RE.search(line)
    if m:
        return m.group(1), m.group(1)
    m = _ARROW_RE.search(line)
    if m:
        return m.group(1), m.group(1)
    return None


def _heuristic_response(prompt: AnalysisPrompt) -> str:
    """LLM-free baseline: derive key variables from the crash line itself."""
    keys = KEY_SETS.get(prompt.category.kind)
    answer: dict[str, str] = {}
    access = _innermost_access(prompt.crash_line_text)
    if keys is not None and access is not None:
        base, access_expr = access
        if keys.buffer_key is None:
            answer[keys.ptr_key] = base
        else:
            if prompt.category.kind is BugKind.HEAP_BUFFER_OVERFLOW:
                size_expr = f"malloc_usable_size({base})"
            else:
                size_expr = f"sizeof({base})"
            answer[keys.buffer_key] = base
            answer[keys.size_key] = size_expr
            answer[keys.ptr_key] = access_expr
    return "```json\n" + json.dumps(answer, indent=2) + "\n```\n"


# --------------------------------------------------------------------------
# Response validation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyVariables:
    """Validated expressions that instantiate a guard template."""

    category: BugCategory
    buffer_expr: Optional[str] = None
    size_expr: Optional[str] = None
    access_expr: Optional[str] = None
    freed_ptr_expr: Optional[str] = None

    def validate(self) -> None:
        if self.category.is_spatial:
            if not (self.buffer_expr and self.size_expr and self.access_expr):
                raise ValueError("spatial categories need buffer, size and access")
            if self.freed_ptr_expr is not None:
                raise ValueError("spatial categories must not carry a freed pointer")
        elif self.category.is_temporal:
            if not self.freed_ptr_expr:
                raise ValueError("temporal category needs the freed pointer")
            if any((self.buffer_expr, self.size_expr, self.access_expr)):
                raise ValueError("temporal category carries only the freed pointer")
        for expr in (self.buffer_expr, self.size_expr, self.access_expr, self.freed_ptr_expr):
            if expr is not None and _has_integer_literal(expr):
                raise ValueError(f"integer literal in {expr!r}")

    def to_dict(self) -> dict:
        return {
            "category": self.category.to_dict(),
            "buffer_expr": self.buffer_expr,
            "size_expr": self.size_expr,
            "access_expr": self.access_expr,
            "freed_ptr_expr": self.freed_ptr_expr,
        }


_FENCED_JSON_RE = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL)
_TOKEN_RE = re.compile(r"[A-Za-z_]\w*|\d[\w.]*")
_IDENT_RE = re.compile(r"[A-Za-z_]\w*")

# C keywords, common type names and the guard helpers are exempt from the
# context-membership requirement; everything else must come from the window.
EXEMPT_IDENTIFIERS = frozenset(
    {
        "sizeof", "malloc_usable_size", "strlen",
        "void", "char", "short", "int", "long", "float", "double",
        "signed", "unsigned", "const", "volatile", "struct", "union", "enum",
        "size_t", "ssize_t", "ptrdiff_t", "intptr_t", "uintptr_t",
        "int8_t", "int16_t", "int32_t", "int64_t",
        "uint8_t", "uint16_t", "uint32_t", "uint64_t",
    }
)


def _has_integer_literal(expr: str) -> bool:
    return any(tok[0].isdigit() for tok in _TOKEN_RE.findall(expr))


def _identifiers(text: str) -> set[str]:
    return set(_IDENT_RE.findall(text))


def context_identifiers(ctx: CodeContext) -> set[str]:
    idents = set()
    for _, text in ctx.lines:
        idents |= _identifiers(text)
    if ctx.function_header is not None:
        idents |= _identifiers(ctx.function_header[1])
    return idents


def _check_membership(expr: str, allowed: set[str], what: str) -> None:
    unknown = _identifiers(expr) - allowed - EXEMPT_IDENTIFIERS
    if unknown:
        raise RejectedResponse(
            RejectReason.UNKNOWN_IDENTIFIER,
            f"{what} uses identifiers not in context: {sorted(unknown)}",
        )


def _require(obj: dict, key: str) -> str:
    value = obj.get(key)
    if value is None or (isinstance(value, str) and not value.strip()):
        raise RejectedResponse(RejectReason.MISSING_KEY, key)
    if not isinstance(value, str):
        value = json.dumps(value)
    return value.strip()


def parse_variables(
    raw_response: str, category: BugCategory, ctx: CodeContext
) -> KeyVariables:
    """Extract and validate key variables from a backend response.

    The first fenced JSON object is taken; its category-specific keys are
    mapped into :class:`KeyVariables`. Rejections carry a
    :class:`RejectReason`: NO_JSON, MISSING_KEY, INTEGER_LITERAL or
    UNKNOWN_IDENTIFIER.
    """
    m = _FENCED_JSON_RE.search(raw_response)
    if m is None:
        raise RejectedResponse(RejectReason.NO_JSON, "no fenced JSON block")
    try:
        obj = json.loads(m.group(1))
    except ValueError as exc:
        raise RejectedResponse(RejectReason.NO_JSON, f"unparseable JSON: {exc}")
    if not isinstance(obj, dict):
        raise RejectedResponse(RejectReason.NO_JSON, "top-level JSON is not an object")

    keys = KEY_SETS.get(category.kind)
    if keys is None:
        raise RejectedResponse(
            RejectReason.MISSING_KEY, f"no key set for category {category.label}"
        )

    ctx_idents = context_identifiers(ctx)

    if keys.buffer_key is None:
        freed = _require(obj, keys.ptr_key)
        _reject_integers(freed)
        _check_membership(freed, ctx_idents, keys.ptr_key)
        variables = KeyVariables(category=category, freed_ptr_expr=freed)
    else:
        buffer_expr = _require(obj, keys.buffer_key)
        size_expr = _require(obj, keys.size_key)
        access_expr = _require(obj, keys.ptr_key)
        for expr in (buffer_expr, size_expr, access_expr):
            _reject_integers(expr)
        _check_membership(access_expr, ctx_idents, keys.ptr_key)
        region_idents = (
            _identifiers(ctx.lines and "" or "")  # placeholder, replaced below
        )
        variables = KeyVariables(
            category=category,
            buffer_expr=buffer_expr,
            size_expr=size_expr,
            access_expr=access_expr,
        )
        _check_membership(
            buffer_expr, ctx_idents | _region_identifiers(ctx), keys.buffer_key
        )
    variables.validate()
    return variables


def _reject_integers(expr: str) -> None:
    if _has_integer_literal(expr):
        raise RejectedResponse(RejectReason.INTEGER_LITERAL, expr)


def _region_identifiers(ctx: CodeContext) -> set[str]:
    # region-note identifiers are attached by the caller via ctx; the
    # extractor does not keep the report, so the harness stitches them in
    return getattr(ctx, "region_identifiers", set())
