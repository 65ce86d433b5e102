"""Fenced key/value block parser for model responses.

Models are instructed to end their output with a block of this exact shape::

    ---BEGIN RESULT---
    label: KEEP
    notes: <<<
    any text, any number of lines
    >>>
    ---END RESULT---

Single-line fields are ``name: value``. A value of ``<<<`` opens a
multi-line field closed by a line that is exactly ``>>>``. This grammar was
chosen over free-form JSON because a truncated or chatty response still
yields recoverable blocks: the parser extracts the *last* structurally
well-formed block and only then validates it against the caller's schema.

The parser is total: arbitrary bytes never raise anything but
:class:`StructuredParseError`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

BEGIN_LINE = "---BEGIN RESULT---"
END_LINE = "---END RESULT---"
MULTILINE_OPEN = "<<<"
MULTILINE_CLOSE = ">>>"

_FIELD_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*):(.*)$")


class StructuredParseError(ValueError):
    """Carries the raw model text for audit alongside the failure reason."""

    def __init__(self, reason: str, raw_text: str):
        super().__init__(reason)
        self.reason = reason
        self.raw_text = raw_text


@dataclass(frozen=True)
class FieldSpec:
    name: str
    required: bool = True
    choices: Optional[Tuple[str, ...]] = None


@dataclass(frozen=True)
class StructuredDoc:
    fields: Mapping[str, str]

    def __getitem__(self, name: str) -> str:
        return self.fields[name]

    def get(self, name: str, default: Optional[str] = None) -> Optional[str]:
        return self.fields.get(name, default)

    def __contains__(self, name: str) -> bool:
        return name in self.fields


def _parse_block(lines: Sequence[str], start: int):
    """Parse one block whose BEGIN line is at ``start``.

    Returns (fields, index_after_end) or (None, _) when malformed.
    """
    fields: Dict[str, str] = {}
    i = start + 1
    while i < len(lines):
        line = lines[i]
        if line == END_LINE:
            return fields, i + 1
        match = _FIELD_RE.match(line)
        if match is None:
            return None, i
        name = match.group(1)
        value = match.group(2)
        if value.startswith(" "):
            value = value[1:]
        if name in fields:
            return None, i  # duplicate field is ambiguous
        if value == MULTILINE_OPEN:
            i += 1
            body = []
            while i < len(lines) and lines[i] != MULTILINE_CLOSE:
                body.append(lines[i])
                i += 1
            if i >= len(lines):
                return None, i  # unterminated multi-line value
            fields[name] = "\n".join(body)
        else:
            fields[name] = value
        i += 1
    return None, i  # unterminated block


def parse_structured(text: str, schema: Sequence[FieldSpec]) -> StructuredDoc:
    """Extract and validate the last well-formed block in ``text``.

    Raises :class:`StructuredParseError` when no block parses, a required
    field is missing, or a value falls outside its declared domain. Fields
    not named by the schema are preserved.
    """
    if not isinstance(text, str):
        text = str(text)
    lines = text.split("\n")
    # Trailing carriage returns appear when providers emit CRLF.
    lines = [line[:-1] if line.endswith("\r") else line for line in lines]
    # Linear scan: a well-formed block is consumed whole, so marker-looking
    # lines inside its multi-line values never start a spurious inner block.
    chosen: Optional[Dict[str, str]] = None
    i = 0
    while i < len(lines):
        if lines[i] == BEGIN_LINE:
            parsed, after = _parse_block(lines, i)
            if parsed is not None:
                chosen = parsed
                i = after
                continue
        i += 1
    if chosen is None:
        raise StructuredParseError("no parseable block", text)
    for spec in schema:
        if spec.name not in chosen:
            if spec.required:
                raise StructuredParseError(f"missing required field {spec.name!r}", text)
            continue
        if spec.choices is not None and chosen[spec.name] not in spec.choices:
            raise StructuredParseError(
                f"field {spec.name!r} value {chosen[spec.name]!r} outside "
                f"{list(spec.choices)}",
                text,
            )
    return StructuredDoc(fields=chosen)


def format_block(fields: Mapping[str, str]) -> str:
    """Render fields as a canonical block (inverse of the parser)."""
    out = [BEGIN_LINE]
    for name, value in fields.items():
        value = str(value)
        if "\n" in value or value == MULTILINE_OPEN:
            out.append(f"{name}: {MULTILINE_OPEN}")
            out.append(value)
            out.append(MULTILINE_CLOSE)
        else:
            out.append(f"{name}: {value}")
    out.append(END_LINE)
    return "\n".join(out)


def format_section(title: str, body: str) -> str:
    """Delimited input section used when composing prompts for providers."""
    return f"{title}:\n{MULTILINE_OPEN}\n{body}\n{MULTILINE_CLOSE}"


def extract_section(prompt_text: str, title: str) -> Optional[str]:
    """Read back a section written by :func:`format_section` (mock backends)."""
    pattern = re.compile(
        rf"^{re.escape(title)}:\n{re.escape(MULTILINE_OPEN)}\n(.*?)\n{re.escape(MULTILINE_CLOSE)}$",
        re.DOTALL | re.MULTILINE,
    )
    match = pattern.search(prompt_text)
    return match.group(1) if match else None
