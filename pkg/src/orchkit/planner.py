"""Cloud-phase orchestration: decompose a task into subtasks with draft
prompts and synthesis logic, generate synthetic validation cases, and
rewrite prompts that failed validation.

No operation in this module accepts a Document, so real document content
cannot reach the cloud channel by construction. Everything the planner
touches is the task description, the guideline, user preferences, and
synthetic material derived from them.

Meta-prompts are versioned template files (plain text, {name} placeholders);
their digests are recorded in plan provenance so a plan can be traced back
to the exact prompts that produced it.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    BudgetExceededError,
    CoverageIncompleteWarning,
    CoverageUnreachableWarning,
    DslError,
    MalformedCasesError,
    MalformedPlanError,
    OutputParseError,
    PhaseViolationError,
)
from .gateway import PHASE_CLOUD, Gateway
from .model import (
    FeatureSchema,
    FeatureSet,
    Plan,
    PromptSpec,
    Subtask,
    SubtaskRun,
    SyntheticCase,
    TaskSpec,
)
from .parsing import extract_json_object, format_block
from .ruledsl import parse_logic

_TEMPLATE_DIR = Path(__file__).parent / "templates"
_REPLY_NUDGE = "Reply now with the JSON object only."

DEFAULT_MAX_REPAIRS = 2


def render(template: str, values: Mapping[str, str]) -> str:
    """Fill {name} placeholders by literal replacement.

    Replacement (not str.format) keeps JSON braces inside templates inert.
    """
    out = template
    for key, value in values.items():
        out = out.replace("{" + key + "}", value)
    return out


@dataclass(frozen=True)
class TemplateSet:
    """The four meta-prompts the planner runs on the cloud channel."""

    decompose: str
    synthetic: str
    refine: str
    repair: str

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "TemplateSet":
        base = Path(directory) if directory else _TEMPLATE_DIR
        return cls(**{name: (base / f"{name}.txt").read_text(encoding="utf-8")
                      for name in ("decompose", "synthetic", "refine", "repair")})

    def digests(self) -> dict[str, str]:
        return {name: hashlib.sha256(getattr(self, name).encode("utf-8")).hexdigest()
                for name in ("decompose", "synthetic", "refine", "repair")}


def task_digest(task: TaskSpec) -> str:
    """Content hash of the task minus the guideline body."""
    prefs = task.preferences
    payload = json.dumps(
        {"task_description": task.task_description,
         "output_labels": [lbl.name for lbl in prefs.output_labels],
         "max_subtasks": prefs.max_subtasks,
         "synthetic_cases_per_subtask": prefs.synthetic_cases_per_subtask,
         "output_format_notes": prefs.output_format_notes,
         "include_entities": list(prefs.include_entities),
         "exclude_entities": list(prefs.exclude_entities)},
        sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def compose_system_prompt(task_description: str, draft_body: str,
                          schema: FeatureSchema) -> str:
    """Final subtask prompt: task header, model-written body (which carries
    the guideline excerpts), and the schema-derived format contract."""
    return (f"# Objective\n{task_description.strip()}\n\n"
            f"{draft_body.strip()}\n\n{format_block(schema)}")


def _require_cloud(gateway: Gateway) -> None:
    if gateway.phase != PHASE_CLOUD:
        raise PhaseViolationError("planner operations require a cloud-phase gateway")


def _preferences_text(task: TaskSpec) -> str:
    prefs = task.preferences
    lines = [f"- cases per subtask for validation: {prefs.synthetic_cases_per_subtask}"]
    if prefs.output_format_notes:
        lines.append(f"- output format notes: {prefs.output_format_notes}")
    if prefs.include_entities:
        lines.append("- focus on: " + ", ".join(prefs.include_entities))
    if prefs.exclude_entities:
        lines.append("- ignore: " + ", ".join(prefs.exclude_entities))
    return "\n".join(lines)


def _schema_text(schema: FeatureSchema) -> str:
    lines = []
    for f in schema.fields:
        menu = ", ".join(f.legal_values()) if f.kind != "text" else "free text"
        lines.append(f"- {f.name} ({f.kind}{', required' if f.required else ''}): {menu}")
    return "\n".join(lines)


class _Exchange:
    """One meta-prompt conversation with bounded repair round-trips.

    `interpret` raises OutputParseError for unparseable replies and
    ValueError/DslError for parseable-but-invalid ones; the distinction
    decides which terminal error the budget exhaustion maps to.
    """

    def __init__(self, gateway: Gateway, templates: TemplateSet,
                 max_repairs: int = DEFAULT_MAX_REPAIRS):
        self.gateway = gateway
        self.templates = templates
        self.max_repairs = max_repairs

    def run(self, system_prompt: str, interpret: Callable[[str], object],
            unparseable_error: type[Exception]):
        prompt = system_prompt
        last_reply = ""
        last_parse_failure = True
        last_message = ""
        for _ in range(1 + self.max_repairs):
            reply = self.gateway.chat(prompt, _REPLY_NUDGE)
            last_reply = reply.raw_text
            try:
                return interpret(reply.raw_text)
            except OutputParseError as exc:
                last_parse_failure = True
                last_message = str(exc)
            except (ValueError, DslError) as exc:
                last_parse_failure = False
                last_message = str(exc)
            suffix = render(self.templates.repair,
                            {"error": last_message, "reply": last_reply})
            prompt = f"{system_prompt}\n\n{suffix}"
        if last_parse_failure:
            raise unparseable_error(
                f"reply unusable after {self.max_repairs} repair round-trips: {last_message}")
        raise BudgetExceededError(
            f"reply still invalid after {self.max_repairs} repair round-trips: {last_message}")


def _interpret_plan_reply(raw: str, task: TaskSpec) -> tuple[list[Subtask], list[PromptSpec], str]:
    obj = extract_json_object(raw)
    raw_subtasks = obj.get("subtasks")
    logic_source = obj.get("logic")
    if not isinstance(raw_subtasks, list) or not raw_subtasks:
        raise OutputParseError('reply needs a non-empty "subtasks" list')
    if not isinstance(logic_source, str) or not logic_source.strip():
        raise OutputParseError('reply needs a non-empty "logic" string')
    if len(raw_subtasks) > task.preferences.max_subtasks:
        raise ValueError(
            f"{len(raw_subtasks)} subtasks exceed the limit of {task.preferences.max_subtasks}")
    subtasks: list[Subtask] = []
    prompts: list[PromptSpec] = []
    for entry in raw_subtasks:
        if not isinstance(entry, dict):
            raise OutputParseError("each subtask must be a JSON object")
        for key in ("id", "name", "description", "fields", "prompt"):
            if key not in entry:
                raise OutputParseError(f"subtask entry is missing {key!r}")
        schema = FeatureSchema.from_dict({"fields": entry["fields"]})
        subtask = Subtask(id=str(entry["id"]), name=str(entry["name"]),
                          description=str(entry["description"]), output_schema=schema)
        subtasks.append(subtask)
        prompts.append(PromptSpec.draft(
            subtask.id,
            compose_system_prompt(task.task_description, str(entry["prompt"]), schema)))
    ids = [s.id for s in subtasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate subtask ids in reply: {ids}")
    # Static-checks the logic against the declared schemas and label set.
    parse_logic(logic_source, [s.output_schema for s in subtasks],
                task.preferences.output_labels)
    return subtasks, prompts, logic_source


def decompose(task: TaskSpec, gateway: Gateway, *,
              templates: TemplateSet | None = None,
              max_repairs: int = DEFAULT_MAX_REPAIRS,
              clock: Callable[[], str] | None = None) -> Plan:
    """Produce subtasks, draft prompts, and synthesis logic for a task.

    The returned plan has no synthetic sets yet; generate_synthetic fills
    them per subtask. Deterministic given a deterministic backend: no
    wall-clock enters provenance unless `clock` is supplied.
    """
    _require_cloud(gateway)
    templates = templates or TemplateSet.load()
    system = render(templates.decompose, {
        "task": task.task_description,
        "guideline": task.guideline,
        "labels": "\n".join(f"{lbl.ordinal}: {lbl.name}"
                            for lbl in task.preferences.output_labels),
        "max_subtasks": str(task.preferences.max_subtasks),
        "preferences": _preferences_text(task),
    })
    exchange = _Exchange(gateway, templates, max_repairs)
    subtasks, prompts, logic_source = exchange.run(
        system, lambda raw: _interpret_plan_reply(raw, task), MalformedPlanError)
    provenance: dict[str, object] = {
        "planner_model": gateway.profile.model or "",
        "meta_prompt_digests": templates.digests(),
        "task_digest": task_digest(task),
        "guideline_digest": hashlib.sha256(task.guideline.encode("utf-8")).hexdigest(),
    }
    if clock is not None:
        provenance["created_at"] = clock()
    return Plan(subtasks=tuple(subtasks), prompts=tuple(prompts),
                logic_source=logic_source,
                labels=task.preferences.output_labels,
                synthetic_sets={}, provenance=provenance)


def _interpret_cases_reply(raw: str, subtask: Subtask, count: int) -> list[SyntheticCase]:
    obj = extract_json_object(raw)
    raw_cases = obj.get("cases")
    if not isinstance(raw_cases, list) or not raw_cases:
        raise OutputParseError('reply needs a non-empty "cases" list')
    if len(raw_cases) < count:
        raise ValueError(f"got {len(raw_cases)} cases, need {count}")
    cases: list[SyntheticCase] = []
    for i, entry in enumerate(raw_cases[:count]):
        if not isinstance(entry, dict) or "input" not in entry or "expected" not in entry:
            raise OutputParseError(f'case {i} needs "input" and "expected"')
        if not isinstance(entry["expected"], dict):
            raise OutputParseError(f'case {i}: "expected" must be an object')
        expected = FeatureSet.from_raw(subtask.output_schema, entry["expected"], strict=True)
        cases.append(SyntheticCase(subtask_id=subtask.id,
                                   input_text=str(entry["input"]), expected=expected))
    return cases


def _uncovered_values(subtask: Subtask, cases: Sequence[SyntheticCase]) -> list[str]:
    missing = []
    for f in subtask.output_schema.fields:
        seen = {case.expected.get(f.name) for case in cases}
        for value in f.legal_values():
            if value not in seen:
                missing.append(f"{f.name}={value}")
    return missing


def generate_synthetic(subtask: Subtask, guideline: str, gateway: Gateway, *,
                       count: int = 10, templates: TemplateSet | None = None,
                       max_repairs: int = DEFAULT_MAX_REPAIRS) -> list[SyntheticCase]:
    """Generate exactly `count` schema-conforming synthetic cases.

    Value coverage is best-effort: one re-prompt when reachable coverage is
    missed, a CoverageUnreachableWarning when the schema has more values
    than the case budget can ever cover.
    """
    _require_cloud(gateway)
    templates = templates or TemplateSet.load()
    system = render(templates.synthetic, {
        "subtask": f"{subtask.name}: {subtask.description}",
        "schema": _schema_text(subtask.output_schema),
        "guideline": guideline,
        "count": str(count),
    })
    exchange = _Exchange(gateway, templates, max_repairs)
    cases = exchange.run(
        system, lambda raw: _interpret_cases_reply(raw, subtask, count),
        MalformedCasesError)

    needed = max((len(f.legal_values()) for f in subtask.output_schema.fields), default=0)
    uncovered = _uncovered_values(subtask, cases)
    if needed > count:
        warnings.warn(CoverageUnreachableWarning(
            f"subtask {subtask.id!r}: schema needs {needed} cases to cover every value, "
            f"budget is {count}"))
        return cases
    if uncovered:
        retry_system = (f"{system}\n\nYour previous set left these values uncovered: "
                        f"{', '.join(uncovered)}. Produce a complete replacement set of "
                        f"{count} cases that covers them all.")
        try:
            retry_cases = exchange.run(
                retry_system, lambda raw: _interpret_cases_reply(raw, subtask, count),
                MalformedCasesError)
        except (MalformedCasesError, BudgetExceededError):
            retry_cases = None
        if retry_cases is not None and not _uncovered_values(subtask, retry_cases):
            return retry_cases
        if retry_cases is not None and len(_uncovered_values(subtask, retry_cases)) < len(uncovered):
            cases = retry_cases
            uncovered = _uncovered_values(subtask, retry_cases)
        warnings.warn(CoverageIncompleteWarning(
            f"subtask {subtask.id!r}: values still uncovered after retry: "
            f"{', '.join(uncovered)}"))
    return cases


def _failures_text(failures: Sequence[tuple[SyntheticCase, SubtaskRun]]) -> str:
    blocks = []
    for i, (case, run) in enumerate(failures, start=1):
        blocks.append(
            f"### Failure {i}\n"
            f"Input:\n{case.input_text}\n"
            f"Expected: {json.dumps(dict(case.expected.values), sort_keys=True, ensure_ascii=False)}\n"
            f"Actual:   {json.dumps(dict(run.output.values), sort_keys=True, ensure_ascii=False)}"
            f"{' (output was unparseable)' if run.parse_status == 'unparseable' else ''}\n"
            f"Local model reasoning:\n{run.reasoning or '(none)'}")
    return "\n\n".join(blocks)


def refine_prompt(prompt: PromptSpec, failures: Sequence[tuple[SyntheticCase, SubtaskRun]],
                  gateway: Gateway, *, templates: TemplateSet | None = None,
                  schema: FeatureSchema | None = None,
                  max_repairs: int = DEFAULT_MAX_REPAIRS) -> PromptSpec:
    """Rewrite a failing prompt using the failing cases and reasoning traces.

    Returns a fresh draft at revision + 1. When the schema is supplied the
    format contract is re-appended if the rewrite dropped it.
    """
    if not failures:
        raise ValueError("refine_prompt: failures must be non-empty")
    _require_cloud(gateway)
    templates = templates or TemplateSet.load()
    system = render(templates.refine, {
        "prompt": prompt.system_prompt,
        "failures": _failures_text(failures),
    })

    def interpret(raw: str) -> str:
        obj = extract_json_object(raw)
        text = obj.get("system_prompt")
        if not isinstance(text, str) or not text.strip():
            raise OutputParseError('reply needs a non-empty "system_prompt"')
        return text

    exchange = _Exchange(gateway, templates, max_repairs)
    new_text = exchange.run(system, interpret, MalformedPlanError)
    if schema is not None:
        contract = format_block(schema)
        if contract not in new_text:
            new_text = f"{new_text.strip()}\n\n{contract}"
    return prompt.with_revision(new_text)


def build_plan(task: TaskSpec, gateway: Gateway, *,
               templates: TemplateSet | None = None,
               max_repairs: int = DEFAULT_MAX_REPAIRS,
               clock: Callable[[], str] | None = None) -> Plan:
    """Full planning pass: decompose, then synthetic sets for every subtask."""
    templates = templates or TemplateSet.load()
    plan = decompose(task, gateway, templates=templates,
                     max_repairs=max_repairs, clock=clock)
    sets = {
        subtask.id: generate_synthetic(
            subtask, task.guideline, gateway,
            count=task.preferences.synthetic_cases_per_subtask,
            templates=templates, max_repairs=max_repairs)
        for subtask in plan.subtasks
    }
    return plan.with_synthetic_sets(sets)
