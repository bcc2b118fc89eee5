"""Validation scoring and refinement-loop semantics.

The scripted local backend here is parameterized by a pass count per prompt
revision: each synthetic case carries its expected value in the input text,
and the backend answers the first p cases correctly and the rest wrongly,
so threshold arithmetic can be pinned exactly.
"""

from __future__ import annotations

import json
import re
from fractions import Fraction

import pytest

from orchkit.gateway import PHASE_LOCAL, BackendProfile, Gateway, ScriptedBackend
from orchkit.model import FeatureSet, PromptSpec, SyntheticCase
from orchkit.validator import (
    run_refinement_loop,
    validate_prompt,
)

from conftest import golden_subtasks

SPREAD = golden_subtasks()[0]
VALUES = ("present", "absent", "unknown")


def make_cases(n: int = 10) -> list[SyntheticCase]:
    return [SyntheticCase(SPREAD.id, f"case {i} expects {VALUES[i % 3]}",
                          FeatureSet({"distant_metastasis": VALUES[i % 3]}))
            for i in range(n)]


def draft_prompt() -> PromptSpec:
    return PromptSpec.draft(SPREAD.id, "extract the field. [[rev=0]]")


def bump_revision(prompt: PromptSpec, failures) -> PromptSpec:
    assert failures, "refinement must only run with failures in hand"
    return prompt.with_revision(
        prompt.system_prompt.replace(f"[[rev={prompt.revision}]]",
                                     f"[[rev={prompt.revision + 1}]]"))


class LocalScript:
    """Answers correctly for the first `passes_for(revision)` case indices."""

    def __init__(self, passes_by_rev):
        self.passes_by_rev = passes_by_rev

    def passes_for(self, revision: int) -> int:
        if callable(self.passes_by_rev):
            return self.passes_by_rev(revision)
        return self.passes_by_rev[revision]

    def __call__(self, request) -> str:
        rev = int(re.search(r"\[\[rev=(\d+)\]\]", request.system_prompt).group(1))
        idx = int(re.search(r"case (\d+)", request.user_content).group(1))
        expected = request.user_content.split("expects ")[1].strip()
        if idx < self.passes_for(rev):
            value = expected
        else:
            value = "absent" if expected != "absent" else "present"
        return json.dumps({"reasoning": f"revision {rev} on case {idx}",
                           "values": {"distant_metastasis": value}})


def local_gateway(script) -> Gateway:
    return Gateway(BackendProfile.scripted(ScriptedBackend(script)), PHASE_LOCAL,
                   sleep=lambda _s: None)


# --- threshold arithmetic -------------------------------------------------------

@pytest.mark.parametrize("passes,verdict", [(9, "passed"), (7, "refine"), (8, "passed")])
def test_threshold_examples(passes, verdict):
    gw = local_gateway(LocalScript(lambda rev: passes))
    report = validate_prompt(draft_prompt(), make_cases(10), gw, subtask=SPREAD)
    assert report.passes == passes
    assert report.pass_rate == pytest.approx(passes / 10)
    assert report.verdict == verdict


def test_threshold_is_exact_rational():
    gw = local_gateway(LocalScript(lambda rev: 4))
    report = validate_prompt(draft_prompt(), make_cases(5), gw, subtask=SPREAD,
                             threshold=0.8)
    assert report.exact_rate() == Fraction(4, 5)
    assert report.verdict == "passed"  # 4/5 == 0.8 exactly, loop is strictly <


def test_each_case_runs_exactly_once():
    calls = {"n": 0}

    class Counting(LocalScript):
        def __call__(self, request):
            calls["n"] += 1
            return super().__call__(request)

    gw = local_gateway(Counting(lambda rev: 10))
    validate_prompt(draft_prompt(), make_cases(10), gw, subtask=SPREAD)
    assert calls["n"] == 10


def test_unparseable_output_counts_as_failure():
    def script(request):
        idx = int(re.search(r"case (\d+)", request.user_content).group(1))
        if idx == 0:
            return "I will not produce JSON."
        expected = request.user_content.split("expects ")[1].strip()
        return json.dumps({"reasoning": "ok", "values": {"distant_metastasis": expected}})

    gw = local_gateway(script)
    report = validate_prompt(draft_prompt(), make_cases(10), gw, subtask=SPREAD)
    assert report.passes == 9
    failed = [r for r in report.results if not r.passed]
    assert len(failed) == 1 and failed[0].run.parse_status == "unparseable"
    assert failed[0].run.output.get("distant_metastasis") == "unknown"


def test_transport_failure_marks_case_and_report_survives():
    from orchkit.errors import TransportError

    def script(request):
        idx = int(re.search(r"case (\d+)", request.user_content).group(1))
        if idx == 3:
            raise TransportError("wire fell out")
        expected = request.user_content.split("expects ")[1].strip()
        return json.dumps({"reasoning": "ok", "values": {"distant_metastasis": expected}})

    gw = Gateway(BackendProfile.scripted(ScriptedBackend(script)), PHASE_LOCAL,
                 retry=__import__("orchkit.gateway", fromlist=["RetryPolicy"]).RetryPolicy(
                     attempts=2, base_delay=0.0, jitter=0.0),
                 sleep=lambda _s: None)
    report = validate_prompt(draft_prompt(), make_cases(10), gw, subtask=SPREAD)
    assert report.passes == 9
    failed = [r for r in report.results if not r.passed][0]
    assert "transport" in failed.reason


def test_validation_repeats_demand_consistency():
    calls = {"n": 0}

    def flipflop(request):
        calls["n"] += 1
        expected = request.user_content.split("expects ")[1].strip()
        value = expected if calls["n"] % 2 else "present"
        return json.dumps({"reasoning": "coin", "values": {"distant_metastasis": value}})

    gw = local_gateway(flipflop)
    case = SyntheticCase(SPREAD.id, "case 0 expects absent",
                         FeatureSet({"distant_metastasis": "absent"}))
    single = validate_prompt(draft_prompt(), [case], gw, subtask=SPREAD)
    assert single.passes == 1  # first call answers correctly
    calls["n"] = 0
    doubled = validate_prompt(draft_prompt(), [case], gw, subtask=SPREAD, repeats=2)
    assert doubled.passes == 0  # second run flips to a wrong answer
    assert doubled.total == 1   # repeats do not inflate the case count


def test_normalization_accepts_alias_case_and_whitespace():
    def script(request):
        return json.dumps({"reasoning": "alias", "values": {"distant_metastasis": "  METS "}})

    gw = local_gateway(script)
    case = SyntheticCase(SPREAD.id, "case 0 expects present",
                         FeatureSet({"distant_metastasis": "present"}))
    report = validate_prompt(draft_prompt(), [case], gw, subtask=SPREAD)
    assert report.passes == 1  # "METS" -> alias -> "present"


# --- refinement loop ---------------------------------------------------------------

def test_loop_improves_and_terminates_at_revision_one():
    gw = local_gateway(LocalScript({0: 6, 1: 9}))
    outcome = run_refinement_loop(SPREAD, draft_prompt(), make_cases(10), gw,
                                  bump_revision, max_iters=5)
    assert outcome.prompt.status == "refined"
    assert outcome.prompt.revision == 1
    assert len(outcome.history) == 2
    assert [r.passes for r in outcome.history] == [6, 9]
    assert outcome.refinements_used == 1


def test_loop_stuck_backend_fails_after_budget():
    gw = local_gateway(LocalScript(lambda rev: 5))
    outcome = run_refinement_loop(SPREAD, draft_prompt(), make_cases(10), gw,
                                  bump_revision, max_iters=3)
    assert outcome.prompt.status == "failed"
    assert len(outcome.history) == 4  # revisions 0..3
    assert outcome.refinements_used == 3
    # Equal scores tie toward the earliest revision.
    assert outcome.prompt.revision == 0
    assert outcome.prompt.report.passes == 5


def test_loop_failed_prompt_carries_best_report():
    gw = local_gateway(LocalScript({0: 3, 1: 7, 2: 6, 3: 7}))
    outcome = run_refinement_loop(SPREAD, draft_prompt(), make_cases(10), gw,
                                  bump_revision, max_iters=3)
    assert outcome.prompt.status == "failed"
    assert outcome.prompt.revision == 1  # 7/10 first reached at revision 1
    assert outcome.prompt.report.passes == max(r.passes for r in outcome.history)


def test_loop_immediate_pass_never_refines():
    refine_calls = {"n": 0}

    def refine(prompt, failures):
        refine_calls["n"] += 1
        return bump_revision(prompt, failures)

    gw = local_gateway(LocalScript(lambda rev: 10))
    outcome = run_refinement_loop(SPREAD, draft_prompt(), make_cases(10), gw,
                                  refine, max_iters=5)
    assert refine_calls["n"] == 0
    assert outcome.prompt.revision == 0
    assert outcome.prompt.status == "refined"
    assert outcome.prompt.report.verdict == "passed"
    assert len(outcome.history) == 1


def test_loop_honors_max_iters_one():
    gw = local_gateway(LocalScript(lambda rev: 0))
    outcome = run_refinement_loop(SPREAD, draft_prompt(), make_cases(10), gw,
                                  bump_revision, max_iters=1)
    assert len(outcome.history) == 2
    assert outcome.prompt.status == "failed"


def test_loop_passes_failures_with_reasoning_to_refiner():
    captured = {}

    def refine(prompt, failures):
        captured["failures"] = failures
        return bump_revision(prompt, failures)

    gw = local_gateway(LocalScript({0: 8 - 1, 1: 10}))  # 7/10 then perfect
    run_refinement_loop(SPREAD, draft_prompt(), make_cases(10), gw, refine)
    cases, runs = zip(*captured["failures"])
    assert len(cases) == 3
    assert all("revision 0" in run.reasoning for run in runs)
