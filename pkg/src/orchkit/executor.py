"""Local-phase inference: run refined prompts over documents, repeat for T
rounds, majority-vote the per-round labels, and synthesize outcomes through
the rule program.

This module is the only place documents meet a model, and it refuses cloud
profiles outright: a gateway must be local-phase and must not be cloud_http,
no matter what the configuration says. Unparseable subtask output degrades
to all-unknown features instead of aborting, so every round still yields a
label through the rule program's unknown handling.
"""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    BackendRefusalError,
    OutputParseError,
    PhaseViolationError,
    TransportError,
    TruncatedError,
)
from .gateway import KIND_CLOUD_HTTP, PHASE_LOCAL, Gateway
from .model import (
    Document,
    FeatureSet,
    OutcomeLabel,
    Plan,
    PromptSpec,
    Subtask,
    SubtaskRun,
)
from .parsing import format_block, parse_subtask_output
from .ruledsl import evaluate

DEFAULT_ROUNDS = 5

_REPAIR_NOTE = (
    "Your previous reply could not be parsed against the output contract. "
    "Respond again with only the JSON object, exactly as specified below.")


def _require_local(gateway: Gateway) -> None:
    if gateway.profile.kind == KIND_CLOUD_HTTP:
        raise PhaseViolationError("document inference refuses cloud_http profiles")
    if gateway.phase != PHASE_LOCAL:
        raise PhaseViolationError("document inference requires a local-phase gateway")


@dataclass(frozen=True)
class RoundRecord:
    index: int
    runs: tuple[SubtaskRun, ...]
    features: FeatureSet
    label: OutcomeLabel


@dataclass(frozen=True)
class DocumentPrediction:
    document_id: str
    rounds: tuple[RoundRecord, ...]
    candidates: tuple[OutcomeLabel, ...]
    final: OutcomeLabel
    votes: dict[str, int]
    tie: bool


def majority_vote(labels: Sequence[OutcomeLabel]) -> OutcomeLabel:
    """Most frequent label; ties resolve to the highest ordinal (the more
    severe outcome, by the conservative tie rule)."""
    if not labels:
        raise ValueError("majority_vote: labels must be non-empty")
    counts = Counter(labels)
    best = max(counts.values())
    return max(lbl for lbl, n in counts.items() if n == best)


def run_subtask(gateway: Gateway, subtask: Subtask, prompt: PromptSpec,
                doc: Document, *, allow_failed: bool = False) -> SubtaskRun:
    """Execute one refined prompt over one document.

    Parse failure gets one repair round-trip with the format contract
    restated; a second failure (or transport exhaustion) yields an
    all-unknown run marked unparseable rather than an exception.
    """
    _require_local(gateway)
    schema = subtask.output_schema
    if prompt.status == "draft" or (prompt.status == "failed" and not allow_failed):
        raise ValueError(
            f"run_subtask: prompt for {subtask.id!r} has status {prompt.status!r}")

    def attempt(system_prompt: str) -> tuple[str, FeatureSet]:
        response = gateway.chat(system_prompt, doc.body, response_schema=schema)
        return parse_subtask_output(schema, response.raw_text)

    try:
        reasoning, output = attempt(prompt.system_prompt)
        return SubtaskRun(subtask_id=subtask.id, document_id=doc.id,
                          reasoning=reasoning, output=output, parse_status="ok")
    except OutputParseError:
        pass
    except (TransportError, TruncatedError, BackendRefusalError) as exc:
        return SubtaskRun(subtask_id=subtask.id, document_id=doc.id,
                          reasoning=f"transport failure: {exc}",
                          output=FeatureSet.all_unknown(schema),
                          parse_status="unparseable")
    repair_system = f"{prompt.system_prompt}\n\n{_REPAIR_NOTE}\n\n{format_block(schema)}"
    try:
        reasoning, output = attempt(repair_system)
        return SubtaskRun(subtask_id=subtask.id, document_id=doc.id,
                          reasoning=reasoning, output=output, parse_status="repaired")
    except (OutputParseError, TransportError, TruncatedError, BackendRefusalError) as exc:
        return SubtaskRun(subtask_id=subtask.id, document_id=doc.id,
                          reasoning=f"unparseable after repair: {exc}",
                          output=FeatureSet.all_unknown(schema),
                          parse_status="unparseable")


def run_document(gateway: Gateway, plan: Plan, doc: Document, *,
                 rounds: int = DEFAULT_ROUNDS, allow_failed: bool = False,
                 subtask_workers: int = 4) -> DocumentPrediction:
    """T independent inference rounds over one document, majority-voted.

    Rounds are sequential and issue fresh requests; subtasks within a round
    may run concurrently (results keep subtask order). Feature merge is a
    disjoint union: cross-subtask field collisions are a plan-validation
    error, so they cannot occur here.
    """
    _require_local(gateway)
    if rounds < 1:
        raise ValueError("run_document: rounds must be >= 1")
    logic = plan.parsed_logic()
    pairs = [(s, plan.prompt_for(s.id)) for s in plan.subtasks]
    for subtask, prompt in pairs:
        if prompt is None:
            raise ValueError(f"run_document: no prompt for subtask {subtask.id!r}")

    round_records: list[RoundRecord] = []
    for index in range(1, rounds + 1):
        if subtask_workers > 1 and len(pairs) > 1:
            with ThreadPoolExecutor(max_workers=min(subtask_workers, len(pairs))) as pool:
                runs = list(pool.map(
                    lambda pair: run_subtask(gateway, pair[0], pair[1], doc,
                                             allow_failed=allow_failed), pairs))
        else:
            runs = [run_subtask(gateway, subtask, prompt, doc, allow_failed=allow_failed)
                    for subtask, prompt in pairs]
        merged: dict[str, str] = {}
        for run in runs:
            merged.update(run.output.values)
        features = FeatureSet(merged)
        round_records.append(RoundRecord(index=index, runs=tuple(runs),
                                         features=features,
                                         label=evaluate(logic, features)))
    candidates = tuple(r.label for r in round_records)
    final = majority_vote(candidates)
    counts = Counter(candidates)
    best = max(counts.values())
    votes = {lbl.name: counts[lbl] for lbl in sorted(counts)}
    return DocumentPrediction(document_id=doc.id, rounds=tuple(round_records),
                              candidates=candidates, final=final, votes=votes,
                              tie=sum(1 for n in counts.values() if n == best) > 1)


def run_documents(gateway: Gateway, plan: Plan, docs: Sequence[Document], *,
                  rounds: int = DEFAULT_ROUNDS, allow_failed: bool = False,
                  workers: int = 1) -> list[DocumentPrediction]:
    """Bounded worker pool over documents; order follows the input."""
    if workers > 1 and len(docs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(
                lambda d: run_document(gateway, plan, d, rounds=rounds,
                                       allow_failed=allow_failed), docs))
    return [run_document(gateway, plan, doc, rounds=rounds, allow_failed=allow_failed)
            for doc in docs]


# ---------------------------------------------------------------------------
# Document ingestion and prediction output
# ---------------------------------------------------------------------------

def load_documents(path: str | Path) -> list[Document]:
    """Directory of *.txt files (id = stem) or a JSON-lines file with
    {"id", "body", "format_tag"} per line."""
    p = Path(path)
    if p.is_dir():
        docs = [Document(id=f.stem, body=f.read_text(encoding="utf-8"))
                for f in sorted(p.glob("*.txt"))]
        if not docs:
            raise ValueError(f"no *.txt documents in {p}")
        return docs
    docs = []
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            docs.append(Document(id=str(record["id"]), body=record["body"],
                                 format_tag=record.get("format_tag", "free_text")))
    if not docs:
        raise ValueError(f"no documents in {p}")
    return docs


def prediction_to_dict(pred: DocumentPrediction) -> dict:
    return {
        "document_id": pred.document_id,
        "final_label": pred.final.name,
        "final_ordinal": pred.final.ordinal,
        "tie": pred.tie,
        "votes": pred.votes,
        "candidates": [lbl.name for lbl in pred.candidates],
        "rounds": [{
            "round": r.index,
            "label": r.label.name,
            "features": dict(r.features.values),
            "runs": [{"subtask_id": run.subtask_id,
                      "parse_status": run.parse_status,
                      "reasoning": run.reasoning} for run in r.runs],
        } for r in pred.rounds],
    }


def write_predictions(preds: Sequence[DocumentPrediction], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for pred in preds:
            fh.write(json.dumps(prediction_to_dict(pred), sort_keys=True,
                                ensure_ascii=False) + "\n")


def summarize(preds: Sequence[DocumentPrediction], labels: Sequence[OutcomeLabel], *,
              rounds: int) -> dict:
    histogram = {lbl.name: 0 for lbl in labels}
    for pred in preds:
        histogram[pred.final.name] = histogram.get(pred.final.name, 0) + 1
    return {
        "documents": len(preds),
        "rounds": rounds,
        "label_order": [lbl.name for lbl in labels],
        "final_label_histogram": histogram,
        "ties": sum(1 for p in preds if p.tie),
        "unparseable_runs": sum(
            1 for p in preds for r in p.rounds for run in r.runs
            if run.parse_status == "unparseable"),
    }
