"""Consensus-driven multi-model runs with governed, auditable decisions.

One canonical prompt fans out to an isolated consortium of model backends;
their verbatim candidate outputs are tallied into a consensus report, then
consolidated into a single decision with per-entry confidence, provenance,
and discard reasons, under a reasoning-layer governor with a deterministic
fallback. Every stage lands in a hash-chained audit trail that supports
verification, byte-exact replay, and explanation.
"""

from .audit import (
    AuditRecord,
    AuditTrail,
    explain_document,
    explain_report,
    read_trail,
    replay,
    verify_chain,
)
from .backends import (
    BackendConfig,
    HttpBackend,
    ScriptedBackend,
    ScriptedReply,
)
from .consensus import ConsensusReport, compute_consensus
from .errors import (
    AuditError,
    BackendError,
    ConfigError,
    ConsortiumError,
    QuorumNotMet,
    ReasonerFailed,
    ReasonerOutputInvalid,
    ReplayDivergence,
    ReplayUnsupported,
    TemplateError,
)
from .governance import (
    ConsolidatedDecision,
    DecisionEntry,
    consolidate_deterministic,
    consolidate_with_reasoner,
    enforce_policies,
)
from .orchestrator import RunResult, execute_run, fan_out
from .parsing import parse_candidates
from .prompting import render_canonical_prompt
from .types import (
    CandidateOutput,
    CanonicalPrompt,
    ImageInput,
    ModelDescriptor,
    OutputSchema,
    PolicySet,
    SharedContext,
    StructuredPayload,
    TaskSpec,
    TextInput,
)
from .workflows import Scenario, WorkflowDefinition, load_scenario, load_workflow

__version__ = "0.1.0"

__all__ = [
    "AuditError",
    "AuditRecord",
    "AuditTrail",
    "BackendConfig",
    "BackendError",
    "CandidateOutput",
    "CanonicalPrompt",
    "ConfigError",
    "ConsensusReport",
    "ConsolidatedDecision",
    "ConsortiumError",
    "DecisionEntry",
    "HttpBackend",
    "ImageInput",
    "ModelDescriptor",
    "OutputSchema",
    "PolicySet",
    "QuorumNotMet",
    "ReasonerFailed",
    "ReasonerOutputInvalid",
    "ReplayDivergence",
    "ReplayUnsupported",
    "RunResult",
    "Scenario",
    "ScriptedBackend",
    "ScriptedReply",
    "SharedContext",
    "StructuredPayload",
    "TaskSpec",
    "TemplateError",
    "TextInput",
    "WorkflowDefinition",
    "compute_consensus",
    "consolidate_deterministic",
    "consolidate_with_reasoner",
    "enforce_policies",
    "execute_run",
    "explain_document",
    "explain_report",
    "fan_out",
    "load_scenario",
    "load_workflow",
    "parse_candidates",
    "read_trail",
    "render_canonical_prompt",
    "replay",
    "verify_chain",
    "__version__",
]
