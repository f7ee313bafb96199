"""Prompt rendering and output grammars for the five agent prompts.

The parsers here sit between opaque model text and the engine. They are total:
malformed text degrades to an empty result plus diagnostics, never an
exception.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Optional, Union

from .domain import SENTINEL_INDEX, Diagnostic, DomainError, Lemma, LemmaLibrary, Problem


class PromptKind(str, Enum):
    LEMMA_SEARCH = "lemma_search"
    LEMMA_SUMMARIZE = "lemma_summarize"
    LEMMA_VERIFY = "lemma_verify"
    FINAL_VERIFY = "final_verify"
    SELF_IMPROVE = "self_improve"


class MissingSlot(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"template slot {{{self.name}}} has no value"


GAVE_UP_TEXT = "I have not found a complete solution"


# ---------------------------------------------------------------- templates


@dataclass(frozen=True)
class Template:
    kind: PromptKind
    text: str
    slots: tuple
    brace_escapes: bool = False

    def fill(self, values: dict) -> str:
        for name in self.slots:
            if name not in values:
                raise MissingSlot(name)
        alts = "|".join(re.escape(s) for s in self.slots)
        pattern = r"\{(" + alts + r")\}"
        if self.brace_escapes:
            pattern += r"|\{\{|\}\}"

        def sub(m):
            if m.group(1) is not None:
                return str(values[m.group(1)])
            return m.group(0)[0]

        return re.sub(pattern, sub, self.text)


@dataclass(frozen=True)
class TemplateSet:
    version: str
    templates: dict

    def __getitem__(self, kind) -> Template:
        return self.templates[PromptKind(kind)]


@lru_cache(maxsize=None)
def load_templates(name: str = "v1") -> TemplateSet:
    """Load a template set: a bundled version name or a directory with a manifest.json."""
    path = Path(name)
    if path.is_dir():
        root = path
    else:
        root = resources.files("lemmaflow") / "templates" / name
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    templates = {}
    for kind in PromptKind:
        entry = manifest["templates"][kind.value]
        text = (root / entry["file"]).read_text(encoding="utf-8")
        templates[kind] = Template(kind, text, tuple(entry["slots"]), entry.get("brace_escapes", False))
    return TemplateSet(manifest.get("version", str(name)), templates)


def render_lemma(lemma: Lemma) -> str:
    key = lemma.key
    head = f"**Lemma {key} (Lemma {key}):**"
    if lemma.name:
        head += f"({lemma.name}) {lemma.statement}"
    else:
        head += f" {lemma.statement}"
    lines = ["<lemma>", head, f"**Proof {key}:**"]
    for i, step in enumerate(lemma.proof_steps, start=1):
        lines.append(f"* **Step {i}:** {step}")
    lines.append("</lemma>")
    return "\n".join(lines)


def library_render(lib) -> str:
    """Canonical text of a library: one ``<lemma>`` block per entry."""
    entries = lib.entries if isinstance(lib, LemmaLibrary) else tuple(lib)
    if not entries:
        return ""
    return "\n".join(render_lemma(e) for e in entries) + "\n"


def render_prompt(
    kind,
    problem: Problem,
    lib: Optional[LemmaLibrary] = None,
    extras: Optional[dict] = None,
    templates: Union[TemplateSet, str] = "v1",
) -> str:
    if isinstance(templates, str):
        templates = load_templates(templates)
    kind = PromptKind(kind)
    lib = lib if lib is not None else LemmaLibrary()
    rendered = library_render(lib)
    values = {
        "Problem": problem.statement,
        "Question": problem.statement,
        "question": problem.statement,
        "reference": problem.reference_answer or "N/A",
        "ProvidedLemmas": rendered,
    }
    if kind is PromptKind.LEMMA_SEARCH:
        values["ProvidedLemmas"] = "\n### Provided Lemmas ###\n" + rendered if rendered else ""
    values.update(extras or {})
    return templates[kind].fill(values)


# ---------------------------------------------------------------- scanning


class Boxed(NamedTuple):
    start: int
    end: int
    content: str


_BOXED_OPEN_RE = re.compile(r"\\boxed\s*\{")


def find_boxed(text: str, diagnostics: Optional[list] = None) -> list:
    """Every ``\\boxed{...}`` environment, matched by brace depth so nested math survives."""
    out = []
    pos = 0
    while True:
        m = _BOXED_OPEN_RE.search(text, pos)
        if m is None:
            return out
        depth = 1
        i = m.end()
        while i < len(text) and depth:
            c = text[i]
            if c == "\\" and i + 1 < len(text) and text[i + 1] in "{}":
                i += 2
                continue
            if c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
            i += 1
        if depth:
            if diagnostics is not None:
                diagnostics.append(
                    Diagnostic("unterminated_box", "\\boxed{ never closed", (m.start(), len(text)))
                )
            out.append(Boxed(m.start(), len(text), text[m.end():]))
            return out
        out.append(Boxed(m.start(), i, text[m.end(): i - 1]))
        pos = i


_BOLD_OPEN = r"(?:\*\*|\\textbf\{)"
_BOLD_CLOSE = r"(?:\*\*|\})"
_HEADER_RE = re.compile(
    r"^\s*" + _BOLD_OPEN + r"\s*lemma\s+(-?\d+)(-fixed)?\s*(?:\(([^()\n]*)\))?\s*"
    r"(?::\s*" + _BOLD_CLOSE + r"(?:\s*:)?|" + _BOLD_CLOSE + r"(?:\s*:)?)",
    re.IGNORECASE,
)
_PROOF_RE = re.compile(
    r"^\s*" + _BOLD_OPEN + r"\s*proof\s+(-?\d+)(-fixed)?[^*}\n]*?(?::\s*" + _BOLD_CLOSE
    + r"|" + _BOLD_CLOSE + r")\s*:?",
    re.IGNORECASE,
)
_STEP_RE = re.compile(
    r"^\s*(?:[*\-]|\\item)\s*" + _BOLD_OPEN + r"?\s*step\s+(\d+)\s*:?\s*" + _BOLD_CLOSE
    + r"?\s*:?(.*)$",
    re.IGNORECASE,
)
_SEPARATOR_RE = re.compile(r"^\s*-{3,}\s*$")


def _to_text(text) -> str:
    if isinstance(text, (bytes, bytearray)):
        return bytes(text).decode("utf-8", errors="replace")
    return text or ""


@dataclass
class _Draft:
    index: int
    fixed: bool
    name: Optional[str]
    statement: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    proof_seen: bool = False
    span: tuple = (0, 0)


def _split_name(rest: str):
    """``(Dilworth's Theorem) statement`` -> name, statement (name only when glued to the header)."""
    if not rest.startswith("("):
        return None, rest
    depth = 0
    for i, c in enumerate(rest):
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
            if depth == 0:
                return rest[1:i].strip() or None, rest[i + 1:]
    return None, rest


def _parse_lemma_lines(lines: list, diagnostics: list, require_proof: bool = True) -> list:
    """Lemmas from ``(offset, line)`` pairs; a header line starts a new lemma."""
    drafts = []
    cur = None
    for offset, line in lines:
        span = (offset, offset + len(line))
        h = _HEADER_RE.match(line)
        if h:
            paren = h.group(3)
            name = None
            if paren and not re.fullmatch(r"\s*lemma\s+-?\d+(-fixed)?\s*", paren, re.IGNORECASE):
                name = paren.strip()
            glued_name, rest = _split_name(line[h.end():])
            cur = _Draft(int(h.group(1)), bool(h.group(2)), name or glued_name, span=span)
            cur.statement.append(rest)
            drafts.append(cur)
            continue
        if cur is None:
            continue
        if _SEPARATOR_RE.match(line):
            cur = None
            continue
        if _PROOF_RE.match(line):
            cur.proof_seen = True
            continue
        s = _STEP_RE.match(line)
        if s:
            cur.proof_seen = True
            cur.steps.append([s.group(2)])
        elif cur.steps:
            cur.steps[-1].append(line)
        elif not cur.proof_seen:
            cur.statement.append(line)
        cur.span = (cur.span[0], span[1])

    lemmas = []
    for d in drafts:
        if d.index == SENTINEL_INDEX:
            continue
        statement = "\n".join(d.statement).strip()
        steps = tuple("\n".join(s).strip() for s in d.steps)
        if not statement:
            diagnostics.append(Diagnostic("missing_statement", f"Lemma {d.index} has no statement", d.span))
            continue
        if require_proof and not steps:
            diagnostics.append(Diagnostic("missing_proof", f"Lemma {d.index} has no proof steps", d.span))
            continue
        try:
            lemmas.append(
                Lemma(index=d.index, statement=statement, proof_steps=steps, fixed_suffix=d.fixed, name=d.name)
            )
        except DomainError as exc:
            diagnostics.append(Diagnostic("invalid_lemma", str(exc), d.span))
    return lemmas


def _lines_with_offsets(text: str, base: int = 0) -> list:
    out = []
    pos = 0
    for line in text.split("\n"):
        out.append((base + pos, line.rstrip("\r")))
        pos += len(line) + 1
    return out


# ---------------------------------------------------------------- search output


class SearchVerdict(str, Enum):
    COMPLETE = "complete"
    PARTIAL = "partial"
    NONE = "none"


@dataclass(frozen=True)
class SearchOutput:
    proven: tuple = ()
    unproven_statements: tuple = ()
    verdict: SearchVerdict = SearchVerdict.NONE
    answer: Optional[str] = None
    diagnostics: tuple = ()


_NOT_COMPLETE_RE = re.compile(r"not\s+(?:yet\s+)?found\s+a\s+complete\s+solution", re.IGNORECASE)
_COMPLETE_RE = re.compile(r"found\s+a\s+complete\s+solution", re.IGNORECASE)
_ANSWER_IS_RE = re.compile(r"the\s+(?:final\s+)?answer\s+is\s*:?\s*(.+?)(?:\.\s|\.?$)", re.IGNORECASE | re.MULTILINE)
_WITHOUT_PROOF_RE = re.compile(r"withoutproof", re.IGNORECASE)


def parse_search_output(text) -> SearchOutput:
    text = _to_text(text)
    diags: list = []
    boxes = find_boxed(text, diags)

    unproven_box = next((b for b in boxes if _WITHOUT_PROOF_RE.search(b.content)), None)
    lemma_boxes = [
        b for b in boxes
        if b is not unproven_box and any(_HEADER_RE.match(l) for _, l in _lines_with_offsets(b.content))
    ]

    proven = []
    if lemma_boxes:
        box = lemma_boxes[0]
        proven = _parse_lemma_lines(_lines_with_offsets(box.content, box.start), diags)
        if not proven:
            diags.append(Diagnostic("empty_lemma_box", "lemma box held no well-formed lemma", (box.start, box.end)))

    unproven = []
    if unproven_box is not None:
        body = _lines_with_offsets(unproven_box.content, unproven_box.start)
        headers = [_HEADER_RE.match(l) for _, l in body]
        if not any(h and int(h.group(1)) == SENTINEL_INDEX for h in headers):
            for lem in _parse_lemma_lines(body, diags, require_proof=False):
                unproven.append(lem.statement)

    if _NOT_COMPLETE_RE.search(text):
        verdict, answer = SearchVerdict.PARTIAL, None
    else:
        answer_boxes = [b for b in boxes if b is not unproven_box and b not in lemma_boxes]
        answer = answer_boxes[-1].content.strip() if answer_boxes else None
        if answer is None:
            m = _ANSWER_IS_RE.search(text)
            answer = m.group(1).strip() if m else None
        if _COMPLETE_RE.search(text) or answer is not None:
            verdict = SearchVerdict.COMPLETE
        elif proven:
            verdict = SearchVerdict.PARTIAL
        else:
            verdict = SearchVerdict.NONE
    if not text.strip():
        diags.append(Diagnostic("empty_output", "reasoner returned no text"))
    return SearchOutput(tuple(proven), tuple(unproven), verdict, answer, tuple(diags))


# ---------------------------------------------------------------- summarizer output


class SummaryParse(NamedTuple):
    lemmas: list
    diagnostics: list


_TAG_RE = re.compile(r"</?lemma>", re.IGNORECASE)


def _blocks(text: str, diags: list) -> list:
    """Split summarizer text into ``<lemma>`` blocks, repairing line-discipline slips."""
    logical = []
    for offset, line in _lines_with_offsets(text):
        stripped = line.strip().lower()
        if _TAG_RE.search(line) and stripped not in ("<lemma>", "</lemma>"):
            diags.append(Diagnostic("repaired_tag", "lemma tag shares a line with content", (offset, offset + len(line))))
            pos = 0
            for m in _TAG_RE.finditer(line):
                if line[pos:m.start()].strip():
                    logical.append((offset + pos, line[pos:m.start()]))
                logical.append((offset + m.start(), m.group(0).lower()))
                pos = m.end()
            if line[pos:].strip():
                logical.append((offset + pos, line[pos:]))
        else:
            logical.append((offset, line))

    blocks = []
    cur = None
    for offset, line in logical:
        tag = line.strip().lower()
        if tag == "<lemma>":
            if cur is not None:
                if any(l.strip() for _, l in cur):
                    diags.append(Diagnostic("unterminated_block", "block closed by the next <lemma>", (cur[0][0] if cur else offset, offset)))
                    blocks.append(cur)
                else:
                    diags.append(Diagnostic("nested_tag", "empty block before a nested <lemma>", (offset, offset)))
            cur = []
        elif tag == "</lemma>":
            if cur is None:
                diags.append(Diagnostic("stray_close", "</lemma> without an opening tag", (offset, offset + len(line))))
            else:
                blocks.append(cur)
                cur = None
        elif cur is not None:
            cur.append((offset, line))
    if cur is not None:
        diags.append(Diagnostic("unterminated_block", "final block never closed", (cur[0][0] if cur else len(text), len(text))))
        blocks.append(cur)
    return blocks


def parse_summarizer_output(text, lib: Optional[LemmaLibrary] = None) -> SummaryParse:
    text = _to_text(text)
    lib = lib if lib is not None else LemmaLibrary()
    diags: list = []
    lemmas = []
    for block in _blocks(text, diags):
        found = _parse_lemma_lines(block, diags)
        if len(found) > 1:
            diags.append(Diagnostic("repaired_block", f"{len(found)} lemmas shared one block", (block[0][0], block[-1][0])))
        lemmas.extend(found)

    expected = lib.next_index
    seen = set(lib.raw_indices)
    for lem in lemmas:
        if lem.fixed_suffix:
            if lem.index not in seen:
                diags.append(Diagnostic("unknown_fixed", f"Lemma {lem.key} corrects an unknown lemma"))
            continue
        if lem.index != expected:
            diags.append(
                Diagnostic("renumbered", f"Lemma {lem.index} numbered where {expected} was expected")
            )
        expected = max(expected, lem.index) + 1
        seen.add(lem.index)
    return SummaryParse(lemmas, diags)


# ---------------------------------------------------------------- verdicts


class VerdictKind(str, Enum):
    STEP_ERROR = "step_error"
    LEMMA_ERROR = "lemma_error"
    ALL_CORRECT = "all_correct"
    FORMAT_ERROR = "format_error"


@dataclass(frozen=True)
class VerifierVerdict:
    kind: VerdictKind
    index: Optional[int] = None
    description: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", VerdictKind(self.kind))
        if self.kind is VerdictKind.STEP_ERROR and (self.index is None or self.index < 0):
            raise ValueError("step_error needs an index >= 0")
        if self.kind is VerdictKind.LEMMA_ERROR and (self.index is None or self.index < 1):
            raise ValueError("lemma_error needs an index >= 1")

    @classmethod
    def all_correct(cls):
        return cls(VerdictKind.ALL_CORRECT, SENTINEL_INDEX)

    @classmethod
    def step_error(cls, k: int):
        return cls(VerdictKind.STEP_ERROR, k)

    @classmethod
    def lemma_error(cls, k: int):
        return cls(VerdictKind.LEMMA_ERROR, k)

    @classmethod
    def format_error(cls, description: str):
        return cls(VerdictKind.FORMAT_ERROR, None, description)

    @property
    def passed(self) -> bool:
        return self.kind is VerdictKind.ALL_CORRECT


_VERDICT_BOX_RE = re.compile(
    r"\\{1,2}box(?:ed)?\s*\{\s*\{?\s*(STEP|LEMMA)\s*(-?)\s*(\d+)\s*\}?\s*\}", re.IGNORECASE
)
_FORMAT_ERROR_RE = re.compile(r"FORMAT_ERROR")


def parse_verdict(text) -> VerifierVerdict:
    text = _to_text(text)
    boxes = list(_VERDICT_BOX_RE.finditer(text))
    fe = _FORMAT_ERROR_RE.search(text)
    if fe is not None and (not boxes or fe.start() < boxes[0].start()):
        description = text[fe.end():].lstrip(" :-\t\r\n").strip()
        return VerifierVerdict.format_error(description or "FORMAT_ERROR")
    if not boxes:
        return VerifierVerdict.format_error("missing verdict")
    m = boxes[-1]
    what = m.group(1).upper()
    k = int(m.group(3)) * (-1 if m.group(2) else 1)
    if k == SENTINEL_INDEX:
        return VerifierVerdict.all_correct()
    if what == "STEP" and k >= 0:
        return VerifierVerdict.step_error(k)
    if what == "LEMMA" and k >= 1:
        return VerifierVerdict.lemma_error(k)
    return VerifierVerdict.format_error(f"invalid verdict index {what}{k}")


def gave_up(text: str) -> bool:
    """True when an improver answered with the give-up sentence and nothing else useful."""
    core = re.sub(r"[\s\"'.`*]+", " ", text or "").strip().lower()
    return core == GAVE_UP_TEXT.lower()


# ---------------------------------------------------------------- final answers

_ANSWER_NOISE_RE = re.compile(r"\\left|\\right|\\[,!;: ]|\\displaystyle|[\s$]")


def extract_final_answer(text) -> Optional[str]:
    """Content of the last ``\\boxed{}`` in a solution, if any."""
    boxes = find_boxed(_to_text(text))
    return boxes[-1].content.strip() if boxes else None


def normalize_answer(answer: str) -> str:
    answer = _ANSWER_NOISE_RE.sub("", answer or "")
    answer = re.sub(r"\\[dt]frac", r"\\frac", answer)
    return answer.rstrip(".")


def answers_match(solution: str, reference: str) -> bool:
    """Exact match of the boxed final answer against the reference after light normalization."""
    got = extract_final_answer(solution)
    if got is None:
        return False
    a, b = normalize_answer(got), normalize_answer(reference)
    if a == b:
        return True
    try:
        return float(a) == float(b)
    except ValueError:
        return False
