"""Template files and placeholder rendering.

A template file has a small front matter block followed by ``[system]`` and
``[user]`` sections::

    ---
    stage: focus
    flavor: soap
    placeholders: text, active_history
    ---
    [system]
    ...
    [user]
    ... {text} ... {active_history} ...

Only declared placeholders in the user section are substituted, in a
single pass, so literal JSON braces in the instructions are left alone.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping

from pacerag.llm import ChatMessage

TEMPLATE_DIR = Path(__file__).parent / "templates"
STAGES = (
    "initial", "focus", "tendency", "refine", "summary", "guideline", "treatrag",
    "medreflect_q", "medreflect_a", "medreflect_r", "judge",
)
FLAVORS = ("soap", "diagnosis")
EMPTY_SLOT = "None"

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


class TemplateError(Exception):
    pass


class MissingBinding(TemplateError, KeyError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    stage_id: str
    flavor: str
    placeholders: tuple[str, ...]
    system_text: str
    user_text: str
    checksum: str


def parse_template(raw: str, source: str = "<string>") -> PromptTemplate:
    lines = raw.splitlines()
    if not lines or lines[0].strip() != "---":
        raise TemplateError(f"{source}: missing front matter")
    try:
        end = lines.index("---", 1)
    except ValueError:
        raise TemplateError(f"{source}: unterminated front matter") from None
    meta: dict[str, str] = {}
    for line in lines[1:end]:
        key, sep, value = line.partition(":")
        if not sep:
            raise TemplateError(f"{source}: bad front matter line {line!r}")
        meta[key.strip()] = value.strip()
    body = lines[end + 1:]
    try:
        s_at, u_at = body.index("[system]"), body.index("[user]")
    except ValueError:
        raise TemplateError(f"{source}: needs [system] and [user] sections") from None
    if s_at > u_at:
        raise TemplateError(f"{source}: [system] must precede [user]")
    system_text = "\n".join(body[s_at + 1:u_at]).strip("\n")
    user_text = "\n".join(body[u_at + 1:]).strip("\n")
    declared = tuple(p.strip() for p in meta.get("placeholders", "").split(",") if p.strip())
    used = set(_PLACEHOLDER.findall(user_text)) & set(declared)
    if set(declared) - used:
        raise TemplateError(f"{source}: declared but unused placeholders {sorted(set(declared) - used)}")
    for key in ("stage", "flavor"):
        if key not in meta:
            raise TemplateError(f"{source}: front matter lacks {key!r}")
    return PromptTemplate(
        meta["stage"], meta["flavor"], declared, system_text, user_text,
        hashlib.sha256(raw.encode("utf-8")).hexdigest(),
    )


@lru_cache(maxsize=None)
def get_template(stage: str, flavor: str) -> PromptTemplate:
    if stage not in STAGES:
        raise TemplateError(f"unknown stage {stage!r}")
    if flavor not in FLAVORS:
        raise TemplateError(f"unknown flavor {flavor!r}")
    path = TEMPLATE_DIR / flavor / f"{stage}.tmpl"
    tmpl = parse_template(path.read_text(encoding="utf-8"), str(path))
    if (tmpl.stage_id, tmpl.flavor) != (stage, flavor):
        raise TemplateError(f"{path}: front matter says {tmpl.stage_id}/{tmpl.flavor}")
    return tmpl


def all_templates() -> list[PromptTemplate]:
    return [get_template(s, f) for f in FLAVORS for s in STAGES]


def render(template: PromptTemplate, bindings: Mapping[str, str]) -> list[ChatMessage]:
    missing = [p for p in template.placeholders if p not in bindings]
    if missing:
        raise MissingBinding(f"{template.flavor}/{template.stage_id}: unbound {missing}")
    declared = set(template.placeholders)

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in declared:
            return m.group(0)
        value = str(bindings[name])
        return value if value.strip() else EMPTY_SLOT

    user = _PLACEHOLDER.sub(sub, template.user_text)
    return [ChatMessage("system", template.system_text), ChatMessage("user", user)]
