"""Prompt templates for every stage and baseline, plus their output parsers."""

from pacerag.prompts.parsers import (
    ACTIONS,
    SUMMARY_HEADERS,
    EmptyBlock,
    JudgeVerdict,
    MissingBlock,
    MissingTag,
    NoJsonFound,
    ParsedDraft,
    ParsedKeywords,
    ParsedRefinement,
    ParsedTendency,
    ParseError,
    ProposedAction,
    UnparseableJudgeOutput,
    WrongShape,
    parse_answer_list,
    parse_judge,
    parse_keywords_json,
    parse_refinement_json,
    parse_start_end_block,
    parse_tag,
    parse_tendency_json,
    render_start_end_block,
    summary_sections,
    validate_focus_substrings,
)
from pacerag.prompts.registry import (
    EMPTY_SLOT,
    FLAVORS,
    STAGES,
    MissingBinding,
    PromptTemplate,
    TemplateError,
    all_templates,
    get_template,
    render,
)

__all__ = [
    "ACTIONS", "SUMMARY_HEADERS", "EMPTY_SLOT", "FLAVORS", "STAGES",
    "EmptyBlock", "JudgeVerdict", "MissingBinding", "MissingBlock", "MissingTag", "NoJsonFound",
    "ParsedDraft", "ParsedKeywords", "ParsedRefinement", "ParsedTendency", "ParseError",
    "PromptTemplate", "ProposedAction", "TemplateError", "UnparseableJudgeOutput", "WrongShape",
    "all_templates", "get_template", "parse_answer_list", "parse_judge", "parse_keywords_json",
    "parse_refinement_json", "parse_start_end_block", "parse_tag", "parse_tendency_json",
    "render", "render_start_end_block", "summary_sections", "validate_focus_substrings",
]
