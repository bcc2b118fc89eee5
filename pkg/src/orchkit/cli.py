"""Command-line surface: plan, validate, pack, unpack, infer, evaluate.

Phase separation is structural: `plan`/`validate` drive the cloud channel
and never touch documents; `infer` drives the local channel, refuses to
start while a cloud profile is configured, and only reads documents after
that guard (and any requested revalidation) has passed.

Exit codes, fixed so air-gapped shell pipelines can branch on failure class:
    0  success
    2  invalid input (missing/malformed files, id mismatches)
    3  planner failure (malformed or repeatedly invalid plan replies)
    4  transport failure
    5  validation failure (a prompt or revalidation below threshold)
    6  bundle integrity failure (tamper, version, malformed)
    7  privacy refusal (cloud profile active during inference)
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import bundle as bundlemod
from . import evalkit, executor, planner, validator
from .config import Config, load_config
from .errors import (
    BackendRefusalError,
    BudgetExceededError,
    ChecksumMismatchError,
    DslError,
    MalformedBundleError,
    MalformedCasesError,
    MalformedPlanError,
    OrchError,
    PhaseViolationError,
    TransportError,
    TruncatedError,
    UnseenRequestError,
    VersionIncompatibleError,
)
from .gateway import KIND_CLOUD_HTTP, PHASE_CLOUD, PHASE_LOCAL, Gateway
from .model import TaskSpec, UserPrefs, validate_plan
from .planner import TemplateSet

EXIT_OK = 0
EXIT_INVALID_INPUT = 2
EXIT_PLANNER = 3
EXIT_TRANSPORT = 4
EXIT_VALIDATION = 5
EXIT_TAMPER = 6
EXIT_PRIVACY = 7


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _exit_code_for(exc: Exception) -> int:
    if isinstance(exc, PhaseViolationError):
        return EXIT_PRIVACY
    if isinstance(exc, (ChecksumMismatchError, VersionIncompatibleError, MalformedBundleError)):
        return EXIT_TAMPER
    if isinstance(exc, (MalformedPlanError, BudgetExceededError, MalformedCasesError, DslError)):
        return EXIT_PLANNER
    if isinstance(exc, (TransportError, TruncatedError, BackendRefusalError, UnseenRequestError)):
        return EXIT_TRANSPORT
    # PlanInvalidError and UnrefinedPromptsError mean the input plan is not
    # packable; everything else unclassified is also treated as bad input.
    return EXIT_INVALID_INPUT


def _now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _load_prefs(path: Path) -> UserPrefs:
    data = json.loads(path.read_text(encoding="utf-8"))
    return UserPrefs(
        output_labels=tuple(data["output_labels"]),
        max_subtasks=int(data.get("max_subtasks", 6)),
        synthetic_cases_per_subtask=int(data.get("synthetic_cases_per_subtask", 10)),
        output_format_notes=str(data.get("output_format_notes", "")),
        include_entities=tuple(data.get("include_entities", ())),
        exclude_entities=tuple(data.get("exclude_entities", ())))


def _templates(config: Config) -> TemplateSet:
    return TemplateSet.load(config.templates_dir)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_plan(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    task = TaskSpec(
        task_description=Path(args.task).read_text(encoding="utf-8"),
        guideline=Path(args.guideline).read_text(encoding="utf-8"),
        preferences=_load_prefs(Path(args.prefs)))
    gateway = Gateway(config.cloud.to_profile("cloud"), PHASE_CLOUD)
    clock = None if args.deterministic else _now_iso
    plan = planner.build_plan(task, gateway, templates=_templates(config), clock=clock)
    violations = validate_plan(plan, min_cases=config.min_synthetic_cases)
    if violations:
        raise MalformedPlanError("planned artifact failed validation: " + "; ".join(violations))
    bundlemod.save_plan(plan, args.out)
    print(f"plan written to {args.out}: {len(plan.subtasks)} subtasks, "
          f"{sum(len(v) for v in plan.synthetic_sets.values())} synthetic cases")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    plan = bundlemod.load_plan(args.plan)
    local_gateway = Gateway(config.local.to_profile("local"), PHASE_LOCAL)
    templates = _templates(config)
    max_iters = args.max_iters if args.max_iters is not None else config.max_iters

    cloud_gateway: list[Gateway] = []  # built lazily: only refinement needs it

    def refine(prompt, failures, schema):
        if not cloud_gateway:
            cloud_gateway.append(Gateway(config.cloud.to_profile("cloud"), PHASE_CLOUD))
        return planner.refine_prompt(prompt, failures, cloud_gateway[0],
                                     templates=templates, schema=schema)

    new_prompts = []
    histories: list[dict] = []
    any_failed = False
    for subtask in plan.subtasks:
        prompt = plan.prompt_for(subtask.id)
        cases = plan.synthetic_sets.get(subtask.id, ())
        outcome = validator.run_refinement_loop(
            subtask, prompt, list(cases), local_gateway,
            lambda p, f, _s=subtask: refine(p, f, _s.output_schema),
            max_iters=max_iters, threshold=config.threshold,
            repeats=config.validation_repeats)
        new_prompts.append(outcome.prompt)
        histories.extend(validator.history_to_dict(outcome.history))
        final = outcome.history[-1]
        print(f"{subtask.id}: {outcome.prompt.status} at revision "
              f"{outcome.prompt.revision} (pass rate {final.passes}/{final.total}, "
              f"{outcome.refinements_used} refinements)")
        if outcome.prompt.status == "failed":
            any_failed = True
    refined_plan = plan.with_prompts(new_prompts)
    bundlemod.save_plan(refined_plan, args.out)
    if args.emit_history:
        Path(args.emit_history).write_text(
            json.dumps(histories, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8")
    print(f"validated plan written to {args.out}")
    return EXIT_VALIDATION if any_failed else EXIT_OK


def cmd_pack(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    plan = bundlemod.load_plan(args.plan)
    runtime = bundlemod.RuntimeDefaults(
        rounds=config.rounds,
        local_temperature=config.local.temperature if config.local.temperature is not None else 0.2,
        local_context=config.local.context or 32768,
        threshold=config.threshold)
    guideline_body = (Path(args.include_guideline).read_text(encoding="utf-8")
                      if args.include_guideline else None)
    data = bundlemod.pack(plan, runtime,
                          created_at=None if args.deterministic else _now_iso(),
                          allow_failed=args.allow_failed,
                          guideline_body=guideline_body,
                          min_cases=config.min_synthetic_cases)
    bundlemod.write_bundle(data, args.out)
    print(f"bundle written to {args.out} ({len(data)} bytes)")
    return EXIT_OK


def cmd_unpack(args: argparse.Namespace) -> int:
    artifact = bundlemod.read_bundle(args.bundle)
    bundlemod.save_plan(artifact.to_plan(), args.out)
    print(f"bundle {args.bundle} verified (format {artifact.format_version}); "
          f"plan written to {args.out}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    config = load_config(args.config)

    # Privacy guard comes before anything else is even read.
    cloud_active = config.cloud.kind == KIND_CLOUD_HTTP or config.local.kind == KIND_CLOUD_HTTP
    if cloud_active:
        if not (args.i_know_this_is_scripted and config.local.kind == "scripted"):
            return _fail(EXIT_PRIVACY,
                         "a cloud profile is active; refusing to run inference "
                         "over documents in this environment")
    artifact = bundlemod.read_bundle(args.bundle)
    plan = artifact.to_plan()
    runtime = artifact.runtime()
    gateway = Gateway(config.local.to_profile("local"), PHASE_LOCAL)
    rounds = args.rounds if args.rounds is not None else runtime.rounds

    if args.revalidate:
        below = []
        for subtask in plan.subtasks:
            prompt = plan.prompt_for(subtask.id)
            cases = plan.synthetic_sets.get(subtask.id, ())
            if not cases:
                continue
            report = validator.validate_prompt(prompt, list(cases), gateway,
                                               subtask=subtask,
                                               threshold=runtime.threshold)
            print(f"revalidate {subtask.id}: {report.passes}/{report.total} "
                  f"({report.verdict})")
            if report.verdict != "passed":
                below.append(subtask.id)
        if below:
            return _fail(EXIT_VALIDATION,
                         "revalidation below threshold for: " + ", ".join(below)
                         + "; not touching documents")

    docs = executor.load_documents(args.docs)
    preds = executor.run_documents(gateway, plan, docs, rounds=rounds,
                                   allow_failed=artifact.allow_failed,
                                   workers=config.workers)
    executor.write_predictions(preds, args.out)
    summary = executor.summarize(preds, plan.labels, rounds=rounds)
    if not args.deterministic:
        summary["completed_at"] = _now_iso()
    if args.summary:
        Path(args.summary).write_text(
            json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8")
    print(f"{len(preds)} predictions written to {args.out}")
    return EXIT_OK


def _load_pred_set(path: Path) -> evalkit.LabeledSet:
    if path.suffix == ".csv":
        return evalkit.load_labeled_csv(path, source="system")
    with path.open("r", encoding="utf-8") as fh:
        first = ""
        for line in fh:
            if line.strip():
                first = line
                break
    if first and "final_label" in json.loads(first):
        return evalkit.load_predictions_jsonl(path)
    return evalkit.load_labeled_jsonl(path, source="system")


def cmd_evaluate(args: argparse.Namespace) -> int:
    pred = _load_pred_set(Path(args.pred))
    gt_path = Path(args.gt)
    gt = (evalkit.load_labeled_csv(gt_path, source="gt") if gt_path.suffix == ".csv"
          else evalkit.load_labeled_jsonl(gt_path, source="gt"))
    labels = None
    if args.labels:
        labels = [x.strip() for x in args.labels.split(",") if x.strip()]
    elif args.labels_from_summary:
        summary = json.loads(Path(args.labels_from_summary).read_text(encoding="utf-8"))
        labels = summary["label_order"]
    report = evalkit.evaluate_report(pred, gt, labels)
    print(evalkit.render_table([report]))
    print()
    print(evalkit.render_confusion(report))
    print(f"\naccuracy: {report.accuracy_percent:.2f}% "
          f"({report.n_scored} scored = {report.n_total} total "
          f"- {report.n_excluded} indeterminate)")
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8")
    if args.confusion_csv:
        evalkit.confusion_to_csv(report, args.confusion_csv)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orchkit",
        description="Two-phase planner/executor pipeline for guideline-driven "
                    "classification over sensitive documents.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="decompose a task and generate synthetic sets (cloud phase)")
    p.add_argument("--task", required=True, help="task description text file")
    p.add_argument("--guideline", required=True, help="guideline document text file")
    p.add_argument("--prefs", required=True, help="preferences JSON file")
    p.add_argument("--out", required=True, help="output plan file")
    p.add_argument("--config", default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="suppress timestamps for reproducible output")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("validate", help="run the refinement loop over every prompt")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True, help="output plan file with refined prompts")
    p.add_argument("--config", default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--emit-history", default=None, help="write full validation history JSON")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pack", help="serialize a validated plan into an .orchb bundle")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--allow-failed", action="store_true",
                   help="pack failed prompts too (recorded in the bundle)")
    p.add_argument("--include-guideline", default=None,
                   help="embed this guideline file (default: digest only)")
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("unpack", help="verify a bundle and extract the plan")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unpack)

    p = sub.add_parser("infer", help="run the bundle over documents (local phase)")
    p.add_argument("--bundle", required=True)
    p.add_argument("--docs", required=True, help="document directory or JSON-lines file")
    p.add_argument("--out", required=True, help="predictions JSON-lines output")
    p.add_argument("--summary", default=None, help="summary JSON output")
    p.add_argument("--rounds", type=int, default=None,
                   help="inference rounds per document (default from bundle)")
    p.add_argument("--revalidate", action="store_true",
                   help="re-run synthetic validation before touching documents")
    p.add_argument("--i-know-this-is-scripted", action="store_true",
                   help="bypass the cloud-profile guard for scripted backends")
    p.add_argument("--config", default=None)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predictions JSON-lines or id,label CSV")
    p.add_argument("--gt", required=True, help="ground truth CSV or JSON-lines")
    p.add_argument("--labels", default=None,
                   help="comma-separated label order (ascending severity)")
    p.add_argument("--labels-from-summary", default=None,
                   help="read label order from an infer summary JSON")
    p.add_argument("--out", default=None, help="write report JSON here")
    p.add_argument("--confusion-csv", default=None)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OrchError as exc:
        return _fail(_exit_code_for(exc), str(exc))
    except (ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        return _fail(EXIT_INVALID_INPUT, str(exc))


if __name__ == "__main__":
    sys.exit(main())
