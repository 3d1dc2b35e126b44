"""A deterministic stand-in for the language model.

The backend reads the rendered prompt the same way a model would (by its
section labels) and answers from a script table:

* ``rules``: explicit ``{"stage", "match", "response"}`` entries. ``match``
  is a regular expression searched in the last user message; ``${name}``
  in the response is replaced by the named group. The first matching rule
  wins and built-in behaviour is skipped.
* ``symptoms``: a lexicon ``{"phrase", "oracle", "guess"}``. ``guess`` is
  what a generalist prescriber would write for the phrase (it may miss the
  oracle drug or add a distractor); ``oracle`` is what the similar-patient
  records show.

The output is a pure function of (stage, messages, table, seed,
temperature). Temperature only enters through a generator seeded from the
hash of those inputs, which can reword reasons and, with probability
``noise * temperature``, slip a distractor into a drafted prescription.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from pacerag.cohort import canonicalize_drug, ordered_unique
from pacerag.llm import ChatMessage, CompletionResult, GenerationParams, ScriptMiss, messages_digest

SCRIPT_FORMAT = "pacerag-script-v1"

_REASONS = (
    "continue current regimen",
    "maintain established therapy",
    "keep stable dopaminergic control",
    "no change needed",
)
_ADD_REASONS = ("targets {p}", "for {p}", "address {p}", "treat new {p}")


@dataclass(frozen=True)
class ScriptRule:
    stage: str
    match: str
    response: str


@dataclass(frozen=True)
class LexiconEntry:
    phrase: str
    oracle: tuple[str, ...]
    guess: tuple[str, ...]


@dataclass
class ScriptTable:
    symptoms: list[LexiconEntry] = field(default_factory=list)
    rules: list[ScriptRule] = field(default_factory=list)
    default_drug: str = "Levodopa"
    distractors: list[str] = field(default_factory=list)
    noise: float = 0.0
    focus_cap: int = 2
    majority: float = 0.5

    def to_dict(self) -> dict:
        return {
            "format": SCRIPT_FORMAT,
            "symptoms": [{"phrase": s.phrase, "oracle": list(s.oracle), "guess": list(s.guess)} for s in self.symptoms],
            "rules": [{"stage": r.stage, "match": r.match, "response": r.response} for r in self.rules],
            "default_drug": self.default_drug,
            "distractors": list(self.distractors),
            "noise": self.noise,
            "focus_cap": self.focus_cap,
            "majority": self.majority,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptTable":
        if d.get("format", SCRIPT_FORMAT) != SCRIPT_FORMAT:
            raise ValueError(f"unsupported script table format {d.get('format')!r}")
        return cls(
            symptoms=[LexiconEntry(s["phrase"], tuple(s.get("oracle", ())), tuple(s.get("guess", ())))
                      for s in d.get("symptoms", [])],
            rules=[ScriptRule(r["stage"], r["match"], r["response"]) for r in d.get("rules", [])],
            default_drug=d.get("default_drug", "Levodopa"),
            distractors=list(d.get("distractors", [])),
            noise=float(d.get("noise", 0.0)),
            focus_cap=int(d.get("focus_cap", 2)),
            majority=float(d.get("majority", 0.5)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ScriptTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Prompt reading helpers


def _between(text: str, start: str, end: str | None) -> str:
    i = text.find(start)
    if i < 0:
        return ""
    i += len(start)
    if end is None:
        return text[i:]
    j = text.find(end, i)
    return text[i:] if j < 0 else text[i:j]


def _line_after(text: str, label: str) -> str:
    m = re.search(re.escape(label) + r"[ \t]*(.*)", text)
    return m.group(1).strip() if m else ""


def _drug_list(slot: str) -> list[str]:
    slot = slot.strip()
    if not slot or slot == "None":
        return []
    try:
        value = json.loads(slot)
    except ValueError:
        return [p.strip() for p in re.split(r"[,;]", slot) if p.strip()]
    if isinstance(value, list):
        return [str(v) for v in value]
    return []


def _json_after(text: str, label: str):
    i = text.find(label)
    if i < 0:
        return None
    rest = text[i + len(label):].lstrip()
    if rest.startswith("None"):
        return None
    try:
        value, _ = json.JSONDecoder().raw_decode(rest)
    except ValueError:
        return None
    return value


def _canon_all(labels) -> list[str]:
    out = []
    for label in labels:
        try:
            out.append(canonicalize_drug(label))
        except ValueError:
            continue
    return ordered_unique(out)


class ScriptedBackend:
    def __init__(self, table: ScriptTable):
        self.table = table
        self._rules = [(r, re.compile(r.match, re.DOTALL)) for r in table.rules]
        self._behaviours = {
            "initial": self._draft,
            "focus": self._focus,
            "tendency": self._tendency,
            "refine": self._refine,
            "summary": self._summary,
            "guideline": self._guideline,
            "treatrag": self._treatrag,
            "medreflect_q": self._medreflect_q,
            "medreflect_a": self._medreflect_a,
            "medreflect_r": self._medreflect_r,
            "judge": self._judge,
        }

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(ScriptTable.load(path))

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams,
                 stage: str = "") -> CompletionResult:
        users = [m.content for m in messages if m.role == "user"]
        if not users:
            raise ScriptMiss("no user message")
        for rule, rx in self._rules:
            if rule.stage == stage:
                m = rx.search(users[-1])
                if m:
                    groups = m.groupdict()
                    text = re.sub(r"\$\{(\w+)\}", lambda g: groups.get(g.group(1)) or "", rule.response)
                    return CompletionResult(text, 1, 0.0)
        behaviour = self._behaviours.get(stage)
        if behaviour is None:
            raise ScriptMiss(f"no script for stage {stage!r}")
        key = f"{params.seed}|{stage}|{params.temperature!r}|{messages_digest(messages)}"
        rng = random.Random(int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "big"))
        return CompletionResult(behaviour(users[0], params, rng), 1, 0.0)

    # -- lexicon ----------------------------------------------------------

    def _symptoms_in(self, text: str) -> list[LexiconEntry]:
        low = text.casefold()
        hits = [(low.find(s.phrase.casefold()), s) for s in self.table.symptoms]
        return [s for pos, s in sorted((h for h in hits if h[0] >= 0), key=lambda h: h[0])]

    def _maybe_distractor(self, params: GenerationParams, rng: random.Random) -> list[str]:
        if self.table.distractors and rng.random() < self.table.noise * params.temperature:
            return [rng.choice(self.table.distractors)]
        return []

    def _block(self, history: list[str], symptoms: list[LexiconEntry], extra: list[tuple[str, str]],
               params: GenerationParams, rng: random.Random) -> str:
        lines: list[tuple[str, str]] = [(d, rng.choice(_REASONS)) for d in history]
        for s in symptoms:
            why = rng.choice(_ADD_REASONS).format(p=s.phrase.lower())
            lines += [(d, why) for d in s.guess]
        lines += extra
        lines += [(d, "adjunct option") for d in self._maybe_distractor(params, rng)]
        if not lines:
            lines = [(self.table.default_drug, "conservative start")]
        seen, out = set(), []
        for d, r in lines:
            if canonicalize_drug(d) not in seen:
                seen.add(canonicalize_drug(d))
                out.append(f"{d} | {r}")
        return "[START]\n" + "\n".join(out) + "\n[END]"

    def _note_and_history(self, prompt: str) -> tuple[str, list[str]]:
        if "Clinical Note:" in prompt:
            end = "History Summary:" if "History Summary:" in prompt else "Most Recent Medications:"
            note = _between(prompt, "Clinical Note:", end)
            if end == "History Summary:":
                history = _between(prompt, "History Summary:\n", "\n\n")
            else:
                history = _line_after(prompt, "Most Recent Medications:")
        else:
            note = _line_after(prompt, "- Diagnoses:")
            history = _line_after(prompt, "- Most Recent Medications:")
        return note, _drug_list(history)

    # -- behaviours -------------------------------------------------------

    def _draft(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        note, history = self._note_and_history(prompt)
        return self._block(history, self._symptoms_in(note), [], params, rng)

    def _guideline(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        note, history = self._note_and_history(prompt)
        guidelines = _between(prompt, "Similar Guidelines:", "Task:")
        extra = []
        for cond, drug in re.findall(r"For ([^,.]+), use ([^.]+)\.", guidelines):
            if cond.strip().casefold() in note.casefold():
                extra.append((drug.strip(), "guideline recommendation"))
        return self._block(history, self._symptoms_in(note), extra, params, rng)

    def _treatrag(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        note, history = self._note_and_history(prompt)
        cases = _between(prompt, "Similar Cases (top retrieved):", "Task:")
        lists = [_drug_list(m) for m in re.findall(r"Prescription:[ \t]*(.*)", cases)]
        extra = []
        if lists:
            counts = Counter(d for lst in lists for d in _canon_all(lst))
            for drug, n in sorted(counts.items()):
                if n >= self.table.majority * len(lists):
                    extra.append((drug, "common in similar cases"))
        return self._block(history, self._symptoms_in(note), extra, params, rng)

    def _focus(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        if "Current Patient Input" in prompt:
            text = _between(prompt, "Current Patient Input (Subjective/Objective/Assessment):", "Active History:")
        else:
            text = _between(prompt, "Diagnoses list:", "Active History:")
        low = text.casefold()
        found = []
        for s in self._symptoms_in(text):
            i = low.find(s.phrase.casefold())
            found.append(text[i:i + len(s.phrase)])
        return json.dumps({"keywords": found[: self.table.focus_cap]})

    def _tendency(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        focus = _between(prompt, ">>> ", " <<<").strip()
        cases = _between(prompt, "Similar Patient Cases:", "Analyze explicitly what was ADDED.")
        added: Counter = Counter()
        blocks = re.split(r"\n(?=Case \d+ )", cases)
        for block in blocks:
            prev = _drug_list(_line_after(block, "Previous prescription:"))
            now = _drug_list(_line_after(block, "Prescribed at this visit:"))
            new = set(_canon_all(now)) - set(_canon_all(prev))
            added.update(new)
        if not added:
            return json.dumps({"dominant_pattern": "MAINTAIN", "common_additions": [],
                               "reasoning": f"No similar case shows a new drug for {focus}."})
        top = max(added.values())
        picks = sorted(d for d, n in added.items() if n == top)
        return json.dumps({"dominant_pattern": "ADD", "common_additions": picks,
                           "reasoning": f"{top} similar case(s) added {', '.join(picks)} for {focus}."})

    def _refine(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        history = _canon_all(_json_after(prompt, "ALWAYS KEEP THESE):") or [])
        draft = _canon_all(_json_after(prompt, "unless proven by RAG):") or [])
        tendencies = _json_after(prompt, "ordered by priority):") or []
        additions: list[str] = []
        for t in tendencies if isinstance(tendencies, list) else []:
            additions += _canon_all(t.get("common_additions", []) if isinstance(t, dict) else [])
        additions = ordered_unique(additions)
        final, log = list(history), [{"action": "KEPT", "drug": d} for d in history]
        for d in draft:
            if d in history:
                continue
            if d in additions:
                final.append(d)
                log.append({"action": "ADDED", "drug": d})
            else:
                log.append({"action": "REMOVED", "drug": d})
        if not final and additions:
            final.append(additions[0])
            log.append({"action": "ADDED", "drug": additions[0]})
        desc = "Active history kept; draft drugs checked against common_additions."
        return json.dumps({"final_prescription": final, "audit_log": log, "final_description": desc})

    def _summary(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        final = _canon_all(_json_after(prompt, "**Final Recommended Medications:**") or [])
        state = _line_after(prompt, "**Patient State:**")
        tendencies = _json_after(prompt, "**Clinical Evidence from Similar Cases:**") or []
        focuses = [t.get("focus", "") for t in tendencies if isinstance(t, dict)]
        log = _json_after(prompt, "**Clinical Validation Log:**") or []
        action = {e.get("drug"): e.get("action") for e in log if isinstance(e, dict)}
        evidence = "; ".join(
            f"for {t.get('focus')}: {', '.join(t.get('common_additions') or []) or 'no consistent addition'}"
            for t in tendencies if isinstance(t, dict)
        ) or "No focus required retrieval; similar cases support maintaining the current regimen."
        lines = [
            "* Patient summary *",
            (state[:300] or "Current visit reviewed.") + " Trajectory reviewed against recent visits.",
            "",
            "* Key word *",
            ", ".join(f for f in focuses if f) or "None",
            "",
            "* Clinical Evidence *",
            evidence,
            "",
            "* Prescribe *",
        ]
        for d in final:
            why = "added per similar-case evidence" if action.get(d) == "ADDED" else "continued from active history"
            lines.append(f"{d} : {why}.")
        return "\n".join(lines)

    def _medreflect_q(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        return ("<Reflective Question>Are all active history drugs kept, and is every new drug "
                "supported by a current symptom?</Reflective Question>")

    def _query(self, prompt: str) -> tuple[str, list[str]]:
        query = _between(prompt, "<Query>:", "</Query>")
        history = _drug_list(_line_after(query, "[Active History]:"))
        return query, history

    def _medreflect_a(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        query, history = self._query(prompt)
        keep = list(history)
        for s in self._symptoms_in(query.split("[Active History]:")[0]):
            keep += list(s.guess[:1])
        keep = _canon_all(keep) or [canonicalize_drug(self.table.default_drug)]
        return (f"<Reflective Answer>Keep the active history and only the first-line drug per symptom. "
                f"Final list: {json.dumps(keep)}</Reflective Answer>")

    def _medreflect_r(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        reflection = _between(prompt, "<Self-Reflection>:", "</Self-Reflection>")
        drugs = _json_after(reflection, "Final list:")
        if not isinstance(drugs, list):
            _, drugs = self._query(prompt)
        return f"<Answer>:[{', '.join(drugs)}]</Answer>"

    def _judge(self, prompt: str, params: GenerationParams, rng: random.Random) -> str:
        note = _between(prompt, "(patient_input):", "Previous Visit History")
        gold = set(_canon_all(_drug_list(_between(prompt, "list):", "Focus areas").strip())))
        focus = _between(prompt, "none were extracted):", "The extractor outputs").strip()
        present = self._symptoms_in(note)
        keywords = [k for k in _drug_list(focus)] if focus.startswith("[") else []
        if not keywords:
            score = 1 if present else 5
            why = "An acute symptom was present but not extracted." if present else "Stable case; no extraction was correct."
        else:
            lex = {s.phrase.casefold(): s for s in self.table.symptoms}
            aligned = [k for k in keywords
                       if k.casefold() in lex and set(_canon_all(lex[k.casefold()].oracle)) <= gold]
            score = 5 if len(aligned) == len(keywords) else (3 if aligned else 2)
            why = f"{len(aligned)} of {len(keywords)} keywords are addressed by the prescription."
        return f"Relevance (1-5): {score}\nExplanation: {why}\nSummary: Score {score}."


def build_script_table(config, noise: float = 0.1, focus_cap: int = 2) -> ScriptTable:
    """Script table for a :class:`pacerag.synth.SynthConfig`."""
    symptoms = [LexiconEntry(s.phrase, tuple(s.drugs), tuple(s.guesses or s.drugs)) for s in config.symptoms]
    pool = ordered_unique(d for r in config.regimens for d in r.base + r.optional)
    return ScriptTable(
        symptoms=symptoms,
        default_drug=config.regimens[0].base[0],
        distractors=pool,
        noise=noise,
        focus_cap=focus_cap,
    )
