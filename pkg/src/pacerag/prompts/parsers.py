"""Strict readers for every model output format.

Each parser either returns a value or raises a subclass of
:class:`ParseError`; arbitrary input never escapes as another exception.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable

from pacerag.cohort import CohortError, canonicalize_drug


class ParseError(ValueError):
    pass


class MissingBlock(ParseError):
    pass


class EmptyBlock(ParseError):
    pass


class NoJsonFound(ParseError):
    pass


class WrongShape(ParseError):
    pass


class MissingTag(ParseError):
    pass


class UnparseableJudgeOutput(ParseError):
    pass


ACTIONS = ("KEPT", "ADDED", "REMOVED")
SUMMARY_HEADERS = ("* Patient summary *", "* Key word *", "* Clinical Evidence *", "* Prescribe *")


@dataclass(frozen=True)
class ParsedDraft:
    lines: tuple[tuple[str, str], ...]

    @property
    def drugs(self) -> list[str]:
        return [d for d, _ in self.lines]


@dataclass(frozen=True)
class ParsedKeywords:
    keywords: tuple[str, ...]


@dataclass(frozen=True)
class ParsedTendency:
    dominant_pattern: str
    common_additions: tuple[str, ...]
    reasoning: str


@dataclass(frozen=True)
class ProposedAction:
    action: str
    drug: str
    reason: str = ""


@dataclass(frozen=True)
class ParsedRefinement:
    final_prescription: tuple[str, ...]
    audit_log: tuple[ProposedAction, ...]
    final_description: str = ""


@dataclass(frozen=True)
class JudgeVerdict:
    score: int
    explanation: str = ""
    summary: str = ""


# ---------------------------------------------------------------------------
# [START] ... [END]


def parse_start_end_block(text: str) -> ParsedDraft:
    text = text if isinstance(text, str) else ""
    start = text.find("[START]")
    if start < 0:
        raise MissingBlock("no [START] marker")
    end = text.find("[END]", start + len("[START]"))
    if end < 0:
        raise MissingBlock("no [END] marker after [START]")
    lines = []
    for raw in text[start + len("[START]"):end].splitlines():
        drug, _, reason = raw.partition("|")
        drug, reason = drug.strip(), reason.strip()
        if drug:
            lines.append((drug, reason))
    if not lines:
        raise EmptyBlock("[START]/[END] block has no drug lines")
    return ParsedDraft(tuple(lines))


def render_start_end_block(lines: Iterable[tuple[str, str]]) -> str:
    body = "\n".join(f"{d} | {r}" for d, r in lines)
    return f"[START]\n{body}\n[END]"


# ---------------------------------------------------------------------------
# JSON objects


_FENCE = re.compile(r"```[A-Za-z0-9_-]*")
_DECODER = json.JSONDecoder()


def iter_json_objects(text: str):
    """Yield every JSON object found by scanning ``{`` positions left to right."""
    text = _FENCE.sub("", text if isinstance(text, str) else "")
    pos = text.find("{")
    while pos >= 0:
        try:
            obj, end = _DECODER.raw_decode(text, pos)
        except (ValueError, RecursionError):
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            yield obj
            pos = text.find("{", end)
        else:
            pos = text.find("{", pos + 1)


def _first_with_key(text: str, key: str) -> dict:
    seen_any = False
    for obj in iter_json_objects(text):
        seen_any = True
        if key in obj:
            return obj
    if seen_any:
        raise WrongShape(f"no JSON object with key {key!r}")
    raise NoJsonFound("no JSON object in output")


def _string_list(value, what: str) -> list[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise WrongShape(f"{what} must be a list of strings")
    return value


def _string(value, what: str) -> str:
    if value is None:
        return ""
    if not isinstance(value, str):
        raise WrongShape(f"{what} must be a string")
    return value


def parse_keywords_json(text: str, cap: int = 2) -> ParsedKeywords:
    obj = _first_with_key(text, "keywords")
    words = [w.strip() for w in _string_list(obj["keywords"], "keywords")]
    return ParsedKeywords(tuple(w for w in words if w)[: max(cap, 0)])


def parse_tendency_json(text: str) -> ParsedTendency:
    obj = _first_with_key(text, "common_additions")
    additions = [a.strip() for a in _string_list(obj["common_additions"], "common_additions")]
    return ParsedTendency(
        _string(obj.get("dominant_pattern"), "dominant_pattern").strip(),
        tuple(a for a in additions if a),
        _string(obj.get("reasoning"), "reasoning").strip(),
    )


def parse_refinement_json(text: str) -> ParsedRefinement:
    obj = _first_with_key(text, "final_prescription")
    final = [d.strip() for d in _string_list(obj["final_prescription"], "final_prescription")]
    log = obj.get("audit_log", [])
    if not isinstance(log, list):
        raise WrongShape("audit_log must be a list")
    entries = []
    for item in log:
        if not isinstance(item, dict):
            raise WrongShape("audit_log entries must be objects")
        action = _string(item.get("action"), "action").strip().upper()
        if action not in ACTIONS:
            raise WrongShape(f"unknown audit action {item.get('action')!r}")
        drug = _string(item.get("drug"), "drug").strip()
        if not drug:
            raise WrongShape("audit_log entry without a drug")
        reason = item.get("reason", item.get("justification", ""))
        entries.append(ProposedAction(action, drug, reason if isinstance(reason, str) else ""))
    return ParsedRefinement(
        tuple(d for d in final if d),
        tuple(entries),
        _string(obj.get("final_description"), "final_description").strip(),
    )


# ---------------------------------------------------------------------------
# Tagged spans (MedReflect)


def parse_tag(text: str, tag: str) -> str:
    text = text if isinstance(text, str) else ""
    m = re.search(rf"<{re.escape(tag)}>\s*:?(.*?)</{re.escape(tag)}>", text, re.DOTALL)
    if not m:
        raise MissingTag(f"no <{tag}>...</{tag}> span")
    body = m.group(1).strip()
    if not body:
        raise MissingTag(f"<{tag}> span is empty")
    return body


def _merge_with_vocabulary(pieces: list[str], vocabulary: set[str]) -> list[str]:
    """Re-join comma-split pieces whose union is a known label, longest first."""
    out, i = [], 0
    while i < len(pieces):
        taken = 1
        for j in range(len(pieces), i + 1, -1):
            joined = ", ".join(p.strip() for p in pieces[i:j])
            try:
                if canonicalize_drug(joined) in vocabulary:
                    taken = j - i
                    break
            except CohortError:
                continue
        out.append(", ".join(p.strip() for p in pieces[i:i + taken]))
        i += taken
    return out


def parse_answer_list(text: str, vocabulary: Iterable[str] = ()) -> list[str]:
    """Read the drug list of an ``<Answer>`` span.

    A JSON array of strings is taken as is. Otherwise the text inside
    square brackets is split on ``;`` when present, else on ``,``; in the
    comma case pieces forming a known label (``vocabulary``, canonical
    form) are joined back, which keeps class names such as
    ``ACE inhibitors, plain`` whole.
    """
    body = parse_tag(text, "Answer")
    try:
        value = json.loads(body)
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return [v.strip() for v in value if v.strip()]
    except (ValueError, RecursionError):
        pass
    inner = body
    lb, rb = inner.find("["), inner.rfind("]")
    if lb >= 0 and rb > lb:
        inner = inner[lb + 1:rb]
    if ";" in inner:
        pieces = inner.split(";")
    else:
        pieces = _merge_with_vocabulary(inner.split(","), set(vocabulary))
    cleaned = [p.strip().strip("\"'").strip() for p in pieces]
    return [p for p in cleaned if p]


# ---------------------------------------------------------------------------
# Judge


_RELEVANCE = re.compile(r"Relevance\s*\(1-5\)\s*\**\s*:\s*\**\s*(-?\d+)", re.IGNORECASE)


def parse_judge(text: str) -> JudgeVerdict:
    text = text if isinstance(text, str) else ""
    m = _RELEVANCE.search(text)
    if not m:
        raise UnparseableJudgeOutput("no 'Relevance (1-5): N' line")
    score = int(m.group(1))
    if not 1 <= score <= 5:
        raise UnparseableJudgeOutput(f"relevance {score} outside 1..5")
    expl = re.search(r"Explanation\s*:\s*(.*?)(?:\n\s*Summary\s*:|$)", text, re.DOTALL | re.IGNORECASE)
    summ = re.search(r"Summary\s*:\s*(.*)", text, re.DOTALL | re.IGNORECASE)
    return JudgeVerdict(score, expl.group(1).strip() if expl else "", summ.group(1).strip() if summ else "")


# ---------------------------------------------------------------------------
# Summary structure and focus validation


def summary_sections(text: str) -> dict[str, str]:
    """Map each header to its body; raises WrongShape if one is missing or out of order."""
    text = text if isinstance(text, str) else ""
    positions = [text.find(h) for h in SUMMARY_HEADERS]
    if any(p < 0 for p in positions):
        raise WrongShape("summary lacks a required section header")
    if positions != sorted(positions):
        raise WrongShape("summary sections out of order")
    out = {}
    for i, h in enumerate(SUMMARY_HEADERS):
        start = positions[i] + len(h)
        end = positions[i + 1] if i + 1 < len(positions) else len(text)
        out[h] = text[start:end].strip()
    return out


def validate_focus_substrings(keywords: Iterable[str], source_text: str) -> list[str]:
    haystack = (source_text or "").casefold()
    kept: list[str] = []
    seen: set[str] = set()
    for kw in keywords:
        if not isinstance(kw, str) or not kw.strip():
            continue
        key = kw.casefold()
        if key in haystack and key not in seen:
            kept.append(kw)
            seen.add(key)
    return kept
