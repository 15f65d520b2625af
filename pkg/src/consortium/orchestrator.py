"""Run lifecycle: render once, fan out in isolation, gate on quorum, govern.

The pipeline is two-stage. Stage one renders a single canonical prompt and
sends it, unchanged, to every consortium member concurrently; members never
see each other's output, and every reply or failure is materialized as a
candidate record. Stage two runs only after all members have settled (or
the global timeout fires): consensus is computed over the ok candidates,
then consolidation (reasoner-led or deterministic) produces the decision
under the policy set.

Every stage appends a record to the run's audit trail before the pipeline
moves on, so a crash leaves a verifiable prefix. Candidate records are
appended in model_id order after all invocations settle, which keeps the
hash chain independent of arrival order.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import audit
from .backends import BackendRegistry, resolve_backend
from .consensus import ConsensusReport, compute_consensus
from .errors import (
    BackendError,
    ConsortiumError,
    QuorumNotMet,
    Timeout,
)
from .governance import (
    MODE_DETERMINISTIC,
    MODE_REASONER,
    ConsolidatedDecision,
    consolidate_deterministic,
    consolidate_with_reasoner,
    enforce_policies,
)
from .hashing import HASH_ALGORITHM, canonical_json, hash_text
from .parsing import parse_candidates
from .prompting import render_canonical_prompt
from .types import (
    STATUS_BACKEND_ERROR,
    STATUS_OK,
    STATUS_TIMEOUT,
    CandidateOutput,
    CanonicalPrompt,
    ImageInput,
    ModelDescriptor,
    TaskSpec,
)

DEFAULT_GLOBAL_TIMEOUT_S = 120.0

PHASE_RENDERING = "rendering"
PHASE_FAN_OUT = "fan_out"
PHASE_CONSENSUS = "consensus"
PHASE_GOVERNANCE = "governance"
PHASE_COMPLETE = "complete"
PHASE_FAILED = "failed"
PHASES = (
    PHASE_RENDERING,
    PHASE_FAN_OUT,
    PHASE_CONSENSUS,
    PHASE_GOVERNANCE,
    PHASE_COMPLETE,
    PHASE_FAILED,
)


@dataclass
class RunState:
    """Mutable run bookkeeping, confined to the coordinating thread."""

    run_id: str
    phase: str = PHASE_RENDERING
    candidates: list[CandidateOutput] = field(default_factory=list)
    started_at: float = field(default_factory=time.time)
    finished_at: Optional[float] = None

    def advance(self, phase: str) -> None:
        """Move strictly forward through the phase order."""
        if PHASES.index(phase) <= PHASES.index(self.phase) and phase != PHASE_FAILED:
            raise ValueError(f"cannot move from {self.phase} back to {phase}")
        self.phase = phase
        if phase in (PHASE_COMPLETE, PHASE_FAILED):
            self.finished_at = time.time()

    def record(self, candidate: CandidateOutput) -> None:
        self.candidates.append(candidate)


@dataclass(frozen=True)
class RunResult:
    decision: ConsolidatedDecision
    decision_path: str
    trail_path: str
    state: RunState


def _failure_candidate(run_id: str, model_id: str, status: str) -> CandidateOutput:
    return CandidateOutput(
        run_id=run_id,
        model_id=model_id,
        raw_text="",
        parsed=None,
        latency_ms=0,
        received_at=time.time(),
        content_hash=hash_text(""),
        status=status,
    )


def _invoke_member(
    registry: BackendRegistry,
    member: ModelDescriptor,
    prompt: CanonicalPrompt,
    images: Sequence[ImageInput],
    run_id: str,
) -> CandidateOutput:
    backend = resolve_backend(registry, member.backend_ref)
    try:
        result = backend.invoke(prompt, images=images)
    except Timeout:
        return _failure_candidate(run_id, member.model_id, STATUS_TIMEOUT)
    except BackendError:
        return _failure_candidate(run_id, member.model_id, STATUS_BACKEND_ERROR)
    return CandidateOutput(
        run_id=run_id,
        model_id=member.model_id,
        raw_text=result.text,
        parsed=None,
        latency_ms=result.latency_ms,
        received_at=time.time(),
        content_hash=hash_text(result.text),
        status=STATUS_OK,
    )


def fan_out(
    prompt: CanonicalPrompt,
    members: Sequence[ModelDescriptor],
    registry: BackendRegistry,
    *,
    run_id: str,
    quorum: int,
    images: Sequence[ImageInput] = (),
    timeout_s: float = DEFAULT_GLOBAL_TIMEOUT_S,
) -> tuple[CandidateOutput, ...]:
    """Invoke every member concurrently with the identical prompt.

    Returns one candidate per member, sorted by model_id. A member whose
    invocation has not settled when the global timeout fires yields a
    timeout candidate; its worker is cancelled where possible and never
    awaited. Raises QuorumNotMet (carrying the full candidate set) when
    fewer than ``quorum`` candidates are ok.
    """
    executor = ThreadPoolExecutor(max_workers=max(len(members), 1))
    futures: dict[Future[CandidateOutput], ModelDescriptor] = {}
    try:
        for member in members:
            futures[
                executor.submit(
                    _invoke_member, registry, member, prompt, images, run_id
                )
            ] = member
        done, _ = wait(futures, timeout=timeout_s)
    finally:
        executor.shutdown(wait=False, cancel_futures=True)
    candidates: list[CandidateOutput] = []
    for future, member in futures.items():
        if future not in done:
            candidates.append(
                _failure_candidate(run_id, member.model_id, STATUS_TIMEOUT)
            )
            continue
        exc = future.exception()
        if exc is not None:
            # _invoke_member converts backend errors itself; anything that
            # escapes is a programming error and should surface.
            raise exc
        candidates.append(future.result())
    candidates.sort(key=lambda c: c.model_id)
    ok_count = sum(1 for c in candidates if c.status == STATUS_OK)
    if ok_count < quorum:
        raise QuorumNotMet(ok_count, quorum, tuple(candidates))
    return tuple(candidates)


def trail_path_for(out_dir: str, run_id: str) -> str:
    return os.path.join(out_dir, f"{run_id}.audit.jsonl")


def decision_path_for(out_dir: str, run_id: str) -> str:
    return os.path.join(out_dir, f"{run_id}.decision")


def write_decision_file(path: str, decision: ConsolidatedDecision) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(canonical_json(decision.to_dict()) + "\n")


def execute_run(
    task: TaskSpec,
    registry: BackendRegistry,
    out_dir: str,
    *,
    deterministic_only: bool = False,
    global_timeout_s: float = DEFAULT_GLOBAL_TIMEOUT_S,
) -> RunResult:
    """Execute one full run and leave a complete audit trail behind.

    Writes ``{run_id}.audit.jsonl`` and ``{run_id}.decision`` under
    ``out_dir``. Any failure after the trail opens appends a run_failed
    record before the exception propagates.
    """
    task.validate()
    for member in task.consortium:
        resolve_backend(registry, member.backend_ref)
    if not deterministic_only:
        resolve_backend(registry, task.reasoner.backend_ref)
    state = RunState(run_id=task.run_id)
    trail = audit.AuditTrail(trail_path_for(out_dir, task.run_id), task.run_id)
    try:
        started_body = dict(task.to_dict())
        started_body["hash_algorithm"] = HASH_ALGORITHM
        started_body["deterministic_only"] = deterministic_only
        started_body["global_timeout_s"] = global_timeout_s
        started_body["started_at"] = state.started_at
        trail.append(audit.KIND_RUN_STARTED, started_body)
        try:
            decision = _run_pipeline(
                task,
                registry,
                trail,
                state,
                deterministic_only=deterministic_only,
                global_timeout_s=global_timeout_s,
            )
        except ConsortiumError as exc:
            state.advance(PHASE_FAILED)
            trail.append(
                audit.KIND_RUN_FAILED,
                {
                    "error": type(exc).__name__,
                    "detail": str(exc),
                    "phase": state.phase,
                    "finished_at": state.finished_at,
                },
            )
            raise
        decision_path = decision_path_for(out_dir, task.run_id)
        write_decision_file(decision_path, decision)
        state.advance(PHASE_COMPLETE)
        return RunResult(
            decision=decision,
            decision_path=decision_path,
            trail_path=trail.path,
            state=state,
        )
    finally:
        trail.close()


def _run_pipeline(
    task: TaskSpec,
    registry: BackendRegistry,
    trail: audit.AuditTrail,
    state: RunState,
    *,
    deterministic_only: bool,
    global_timeout_s: float,
) -> ConsolidatedDecision:
    prompt = render_canonical_prompt(task.prompt_template, task.context)
    trail.append(audit.KIND_PROMPT_RENDERED, prompt.to_dict())

    state.advance(PHASE_FAN_OUT)
    image_map = {image.source_id: image for image in task.context.image_inputs}
    images = tuple(image_map[sid] for sid in prompt.attached_images)
    try:
        candidates = fan_out(
            prompt,
            task.consortium,
            registry,
            run_id=task.run_id,
            quorum=task.quorum,
            images=images,
            timeout_s=global_timeout_s,
        )
    except QuorumNotMet as exc:
        for candidate in exc.candidates:
            state.record(candidate)
            trail.append(audit.KIND_CANDIDATE_RECEIVED, candidate.to_dict())
        raise
    for candidate in candidates:
        state.record(candidate)
        trail.append(audit.KIND_CANDIDATE_RECEIVED, candidate.to_dict())

    state.advance(PHASE_CONSENSUS)
    parsed = parse_candidates(candidates, task.schema)
    report = compute_consensus(
        parsed, task.schema, task.policies, run_id=task.run_id
    )
    trail.append(audit.KIND_CONSENSUS_COMPUTED, report.to_dict())

    state.advance(PHASE_GOVERNANCE)
    if deterministic_only:
        decision = consolidate_deterministic(
            report, task.schema, task.policies, task.context
        )
    else:
        decision, info = consolidate_with_reasoner(task, parsed, report, registry)
        trail.append(audit.KIND_REASONER_INVOKED, info)
    decision = enforce_policies(decision, task.policies)
    trail.append(
        audit.KIND_POLICY_APPLIED,
        {
            "policies": task.policies.to_dict(),
            "consolidation_mode": decision.consolidation_mode,
            "entries": len(decision.entries),
            "discarded": len(decision.discarded),
        },
    )
    trail.append(audit.KIND_DECISION_ISSUED, decision.to_dict())
    return decision
