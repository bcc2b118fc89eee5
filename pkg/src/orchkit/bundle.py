"""Serialized forms: the plan file and the air-gapped artifact bundle.

The bundle is a single canonical-JSON document (sorted keys, compact
separators, UTF-8) with per-section SHA-256 hashes inside it and a
whole-file hash trailer appended as the final line:

    {"integrity": {...}, "sections": {...}}
    #sha256:<64 hex digits>

Canonical form means identical plans pack to byte-identical bundles, the
file is human-auditable before it crosses the air gap, and any single-byte
mutation is caught by the trailer hash before content is yielded. Bundles
carry only planner-phase artifacts; the synthetic sets ride along so the
isolated side can re-validate prompts before touching real documents.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    ChecksumMismatchError,
    MalformedBundleError,
    PlanInvalidError,
    UnrefinedPromptsError,
    VersionIncompatibleError,
)
from .model import (
    FeatureSchema,
    FeatureSet,
    OutcomeLabel,
    Plan,
    PromptSpec,
    Subtask,
    SubtaskRun,
    SyntheticCase,
    validate_plan,
)
from .validator import CaseResult, ValidationReport

FORMAT_VERSION = "1.0.0"
BUNDLE_EXTENSION = ".orchb"
_TRAILER_PREFIX = "#sha256:"
_EPOCH = "1970-01-01T00:00:00Z"


def canonical_json(value: object) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Model <-> dict
# ---------------------------------------------------------------------------

def _subtask_to_dict(subtask: Subtask) -> dict:
    return {"id": subtask.id, "name": subtask.name,
            "description": subtask.description,
            "schema": subtask.output_schema.to_dict()}


def _subtask_from_dict(data: Mapping) -> Subtask:
    return Subtask(id=data["id"], name=data["name"],
                   description=data["description"],
                   output_schema=FeatureSchema.from_dict(data["schema"]))


def _report_to_dict(report: ValidationReport) -> dict:
    return {
        "subtask_id": report.subtask_id,
        "revision": report.revision,
        "passes": report.passes,
        "total": report.total,
        "verdict": report.verdict,
        "results": [{
            "case_index": r.case_index,
            "passed": r.passed,
            "reason": r.reason,
            "case": {"input_text": r.case.input_text,
                     "expected": dict(r.case.expected.values)},
            "run": {"document_id": r.run.document_id,
                    "reasoning": r.run.reasoning,
                    "output": dict(r.run.output.values),
                    "parse_status": r.run.parse_status},
        } for r in report.results],
    }


def _report_from_dict(data: Mapping, subtask_id: str) -> ValidationReport:
    results = []
    for entry in data["results"]:
        case = SyntheticCase(subtask_id=subtask_id,
                             input_text=entry["case"]["input_text"],
                             expected=FeatureSet(entry["case"]["expected"]))
        run = SubtaskRun(subtask_id=subtask_id,
                         document_id=entry["run"]["document_id"],
                         reasoning=entry["run"]["reasoning"],
                         output=FeatureSet(entry["run"]["output"]),
                         parse_status=entry["run"]["parse_status"])
        results.append(CaseResult(case_index=entry["case_index"], case=case, run=run,
                                  passed=entry["passed"], reason=entry["reason"]))
    return ValidationReport(subtask_id=data["subtask_id"], revision=data["revision"],
                            results=tuple(results), passes=data["passes"],
                            total=data["total"], verdict=data["verdict"])


def _prompt_to_dict(prompt: PromptSpec) -> dict:
    report = prompt.report
    return {"subtask_id": prompt.subtask_id,
            "system_prompt": prompt.system_prompt,
            "revision": prompt.revision,
            "status": prompt.status,
            "report": _report_to_dict(report) if isinstance(report, ValidationReport) else None}


def _prompt_from_dict(data: Mapping) -> PromptSpec:
    report = data.get("report")
    return PromptSpec(subtask_id=data["subtask_id"],
                      system_prompt=data["system_prompt"],
                      revision=data["revision"], status=data["status"],
                      report=_report_from_dict(report, data["subtask_id"])
                      if report else None)


def _case_to_dict(case: SyntheticCase) -> dict:
    return {"input_text": case.input_text, "expected": dict(case.expected.values)}


def plan_to_dict(plan: Plan) -> dict:
    return {
        "subtasks": [_subtask_to_dict(s) for s in plan.subtasks],
        "prompts": [_prompt_to_dict(p) for p in plan.prompts],
        "logic_source": plan.logic_source,
        "labels": [lbl.name for lbl in plan.labels],
        "synthetic_sets": {sid: [_case_to_dict(c) for c in cases]
                           for sid, cases in plan.synthetic_sets.items()},
        "provenance": dict(plan.provenance),
    }


def plan_from_dict(data: Mapping) -> Plan:
    labels = tuple(OutcomeLabel(name, i) for i, name in enumerate(data["labels"]))
    sets = {
        sid: tuple(SyntheticCase(subtask_id=sid, input_text=c["input_text"],
                                 expected=FeatureSet(c["expected"]))
                   for c in cases)
        for sid, cases in data["synthetic_sets"].items()
    }
    return Plan(subtasks=tuple(_subtask_from_dict(s) for s in data["subtasks"]),
                prompts=tuple(_prompt_from_dict(p) for p in data["prompts"]),
                logic_source=data["logic_source"], labels=labels,
                synthetic_sets=sets, provenance=dict(data["provenance"]))


# ---------------------------------------------------------------------------
# Plan files (pre-bundle, planner-side)
# ---------------------------------------------------------------------------

_PLAN_FORMAT = "orchkit-plan/1"


def save_plan(plan: Plan, path: str | Path) -> None:
    payload = {"format": _PLAN_FORMAT, "plan": plan_to_dict(plan)}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True,
                                     ensure_ascii=False) + "\n", encoding="utf-8")


def load_plan(path: str | Path) -> Plan:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read plan file {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != _PLAN_FORMAT:
        raise ValueError(f"{path} is not a plan file (expected format {_PLAN_FORMAT})")
    return plan_from_dict(payload["plan"])


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RuntimeDefaults:
    """Execution-side knobs that travel with the bundle."""

    rounds: int = 5
    local_temperature: float = 0.2
    local_context: int = 32768
    threshold: float = 0.80

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("RuntimeDefaults.rounds: must be >= 1")
        if not (0.0 < self.threshold <= 1.0):
            raise ValueError("RuntimeDefaults.threshold: must be in (0, 1]")

    def to_dict(self) -> dict:
        return {"rounds": self.rounds, "local_temperature": self.local_temperature,
                "local_context": self.local_context, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, data: Mapping) -> "RuntimeDefaults":
        return cls(rounds=data["rounds"], local_temperature=data["local_temperature"],
                   local_context=data["local_context"], threshold=data["threshold"])


@dataclass(frozen=True)
class ArtifactBundle:
    """Verified view over unpacked bundle sections."""

    sections: Mapping[str, object]
    raw: bytes

    @property
    def format_version(self) -> str:
        return self.sections["meta"]["format_version"]  # type: ignore[index]

    @property
    def created_at(self) -> str:
        return self.sections["meta"]["created_at"]  # type: ignore[index]

    @property
    def allow_failed(self) -> bool:
        return bool(self.sections["meta"].get("allow_failed", False))  # type: ignore[union-attr]

    def runtime(self) -> RuntimeDefaults:
        return RuntimeDefaults.from_dict(self.sections["runtime"])  # type: ignore[arg-type]

    def to_plan(self) -> Plan:
        s = self.sections
        return plan_from_dict({
            "subtasks": s["subtasks"], "prompts": s["prompts"],
            "logic_source": s["logic"]["source"], "labels": s["labels"],
            "synthetic_sets": s["synthetic"], "provenance": s["provenance"],
        })


def _sections_for(plan: Plan, runtime: RuntimeDefaults, *, created_at: str,
                  allow_failed: bool, guideline_body: str | None) -> dict:
    from .ruledsl import pretty

    plan_dict = plan_to_dict(plan)
    meta = {
        "format_version": FORMAT_VERSION,
        "created_at": created_at,
        "task_digest": plan.provenance.get("task_digest", ""),
        "guideline_digest": plan.provenance.get("guideline_digest", ""),
        "allow_failed": allow_failed,
    }
    if guideline_body is not None:
        meta["guideline_body"] = guideline_body
    return {
        "meta": meta,
        "subtasks": plan_dict["subtasks"],
        "prompts": plan_dict["prompts"],
        # Source travels verbatim; the digest is over the canonical parsed
        # form so the isolated side can prove its re-parse means the same.
        "logic": {"source": plan.logic_source,
                  "parsed_digest": _sha256_text(pretty(plan.parsed_logic()))},
        "labels": plan_dict["labels"],
        "synthetic": plan_dict["synthetic_sets"],
        "runtime": runtime.to_dict(),
        "provenance": plan_dict["provenance"],
    }


def _render(sections: dict) -> bytes:
    integrity = {"algo": "sha256",
                 "sections": {name: _sha256_text(canonical_json(value))
                              for name, value in sections.items()}}
    body = canonical_json({"integrity": integrity, "sections": sections}) + "\n"
    trailer = _TRAILER_PREFIX + _sha256_text(body) + "\n"
    return (body + trailer).encode("utf-8")


def pack(plan: Plan, runtime: RuntimeDefaults | None = None, *,
         created_at: str | None = None, allow_failed: bool = False,
         guideline_body: str | None = None, min_cases: int = 1) -> bytes:
    """Serialize a validated plan for the air-gapped handoff.

    created_at defaults to the epoch so packing is reproducible; pass a real
    timestamp explicitly when provenance matters more than determinism.
    """
    violations = validate_plan(plan, min_cases=min_cases)
    if violations:
        raise PlanInvalidError("; ".join(violations))
    bad = [p.subtask_id for p in plan.prompts if p.status == "draft"
           or (p.status == "failed" and not allow_failed)]
    if bad:
        raise UnrefinedPromptsError(
            f"prompts not refined for subtasks: {', '.join(sorted(bad))}"
            + ("" if allow_failed else " (use allow_failed to pack failed prompts)"))
    sections = _sections_for(plan, runtime or RuntimeDefaults(),
                             created_at=created_at or _EPOCH,
                             allow_failed=allow_failed, guideline_body=guideline_body)
    return _render(sections)


def repack(bundle: ArtifactBundle) -> bytes:
    """Re-render an unpacked bundle; canonical form makes this the identity."""
    return _render(dict(bundle.sections))


def unpack(data: bytes) -> ArtifactBundle:
    """Verify every hash, then yield the bundle contents.

    Nothing is returned unless the whole-file trailer, the per-section
    hashes, and the format major version all check out.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedBundleError(f"bundle is not UTF-8: {exc}") from exc
    marker = text.rfind(_TRAILER_PREFIX)
    if marker == -1 or (marker > 0 and text[marker - 1] != "\n"):
        raise MalformedBundleError("bundle has no hash trailer")
    body = text[:marker]
    trailer = text[marker + len(_TRAILER_PREFIX):]
    # Exactly 64 lowercase hex digits and a newline; anything else (stray
    # whitespace included) is a mutation, not a cosmetic difference.
    if not re.fullmatch(r"[0-9a-f]{64}\n", trailer):
        raise MalformedBundleError("bundle hash trailer is malformed")
    expected = trailer.strip()
    actual = _sha256_text(body)
    if actual != expected:
        raise ChecksumMismatchError(
            f"whole-file hash mismatch: trailer {expected[:12]}…, computed {actual[:12]}…")
    try:
        document = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedBundleError(f"bundle body is not JSON: {exc}") from exc
    if not isinstance(document, dict) or "sections" not in document or "integrity" not in document:
        raise MalformedBundleError("bundle body lacks sections/integrity")
    sections = document["sections"]
    recorded = document["integrity"].get("sections", {})
    if set(recorded) != set(sections):
        raise ChecksumMismatchError("integrity map does not cover the sections")
    for name, value in sections.items():
        actual = _sha256_text(canonical_json(value))
        if actual != recorded[name]:
            raise ChecksumMismatchError(f"section {name!r} hash mismatch")
    version = str(sections.get("meta", {}).get("format_version", ""))
    major = version.split(".", 1)[0]
    ours = FORMAT_VERSION.split(".", 1)[0]
    if major != ours:
        raise VersionIncompatibleError(
            f"bundle format {version} is incompatible with reader {FORMAT_VERSION}")
    return ArtifactBundle(sections=sections, raw=bytes(data))


def write_bundle(data: bytes, path: str | Path) -> None:
    Path(path).write_bytes(data)


def read_bundle(path: str | Path) -> ArtifactBundle:
    return unpack(Path(path).read_bytes())
