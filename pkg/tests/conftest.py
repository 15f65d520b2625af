"""Shared fixtures: minimal tasks, scripted registries, pack locations."""

import os

import pytest

from consortium.backends import ScriptedBackend, ScriptedReply
from consortium.hashing import hash_text
from consortium.parsing import parse_candidates
from consortium.types import (
    CandidateOutput,
    ModelDescriptor,
    OutputSchema,
    PolicySet,
    SharedContext,
    TaskSpec,
    TextInput,
)

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
WORKFLOWS_ROOT = os.path.join(REPO_ROOT, "workflows")
PACKS = ("podcast", "hreflex", "dental", "psychiatric", "rf")
SCENARIOS = ("unanimous", "split", "degenerate")

ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config) -> None:
    """Surface one verdict line per acceptance criterion in the summary."""
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


def member(i: int, *, modality: str = "text") -> ModelDescriptor:
    return ModelDescriptor(
        model_id=f"m{i}",
        display_name=f"Member {i}",
        role="consortium_member",
        modality=modality,
        backend_ref=f"b{i}",
    )


def reasoner_descriptor(ref: str = "rj") -> ModelDescriptor:
    return ModelDescriptor(
        model_id="r1",
        display_name="Reasoner",
        role="reasoner",
        modality="text",
        backend_ref=ref,
    )


def label_schema(*labels: str, allows_unknown: bool = False) -> OutputSchema:
    return OutputSchema(
        kind="single_label",
        label_universe=tuple(labels) or ("A", "B", "C"),
        allows_unknown=allows_unknown,
    )


def items_schema() -> OutputSchema:
    return OutputSchema(
        kind="labeled_items",
        item_universe=("T1", "T2", "T3"),
        label_universe=("healthy", "inflamed", "decayed"),
        severity_scale=("none", "mild", "moderate", "severe"),
    )


def make_task(
    n_members: int = 3,
    *,
    schema: OutputSchema | None = None,
    policies: PolicySet | None = None,
    quorum: int = 2,
    context: SharedContext | None = None,
    run_id: str = "run-0001",
) -> TaskSpec:
    task = TaskSpec(
        workflow_id="test",
        run_id=run_id,
        consortium=tuple(member(i) for i in range(1, n_members + 1)),
        reasoner=reasoner_descriptor(),
        prompt_template="Answer about: {{subject}}",
        reasoner_template="Consolidate:\n{{candidates}}\n{{consensus}}\n{{output_grammar}}",
        context=context
        or SharedContext(text_inputs=(TextInput("subject", "the test subject"),)),
        schema=schema or label_schema(),
        policies=policies or PolicySet(),
        quorum=quorum,
    )
    task.validate()
    return task


def make_candidate(
    raw_text: str,
    *,
    model_id: str = "m1",
    run_id: str = "run-0001",
    status: str = "ok",
) -> CandidateOutput:
    return CandidateOutput(
        run_id=run_id,
        model_id=model_id,
        raw_text=raw_text,
        parsed=None,
        latency_ms=10,
        received_at=0.0,
        content_hash=hash_text(raw_text),
        status=status,
    )


def parsed_set(schema: OutputSchema, texts_by_model: dict[str, str]) -> tuple[CandidateOutput, ...]:
    """Candidates for model_id -> raw_text, already run through the parser."""
    raw = tuple(
        make_candidate(text, model_id=model_id)
        for model_id, text in sorted(texts_by_model.items())
    )
    return parse_candidates(raw, schema)


def scripted_registry(replies: dict[str, str | ScriptedReply]) -> dict[str, ScriptedBackend]:
    """Build a registry from backend_ref -> reply text (or ScriptedReply)."""
    registry = {}
    for ref, reply in replies.items():
        if isinstance(reply, str):
            reply = ScriptedReply(text=reply)
        registry[ref] = ScriptedBackend(ref, default=reply)
    return registry


@pytest.fixture
def out_dir(tmp_path):
    return str(tmp_path)
