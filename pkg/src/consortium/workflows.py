"""Workflow definitions, scenario fixtures, and backend wiring.

A workflow definition is a YAML file describing everything a run needs
except its input context: the consortium roster, the reasoner, both prompt
templates, the output schema, the policy set, and the quorum. Injecting a
context (and optionally a run id) turns a definition into a TaskSpec.

A scenario file pairs a context with scripted backend behavior so a
workflow runs end-to-end offline: every backend ref maps to a default
reply (inline text, a file, or an injected failure). Relative file
references resolve against the directory containing the YAML file that
names them.

Run ids derive from the workflow id plus a fingerprint of the context
content (text, metadata, image hashes — never file paths), so the same
inputs always produce the same run id on any machine.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass
from typing import Any, Mapping, Optional, Sequence

import yaml

from .backends import (
    BackendConfig,
    BackendRegistry,
    HttpBackend,
    ScriptedBackend,
    ScriptedReply,
)
from .errors import ConfigError
from .hashing import hash_canonical, hash_content
from .types import (
    ImageInput,
    ModelDescriptor,
    OutputSchema,
    PolicySet,
    SharedContext,
    TaskSpec,
    TextInput,
)


@dataclass(frozen=True)
class WorkflowDefinition:
    """A validated workflow awaiting only context injection."""

    workflow_id: str
    consortium: tuple[ModelDescriptor, ...]
    reasoner: ModelDescriptor
    prompt_template: str
    reasoner_template: str
    schema: OutputSchema
    policies: PolicySet
    quorum: int

    def build_task(
        self,
        context: SharedContext,
        *,
        run_id: Optional[str] = None,
        quorum: Optional[int] = None,
    ) -> TaskSpec:
        task = TaskSpec(
            workflow_id=self.workflow_id,
            run_id=run_id or derive_run_id(self.workflow_id, context),
            consortium=self.consortium,
            reasoner=self.reasoner,
            prompt_template=self.prompt_template,
            reasoner_template=self.reasoner_template,
            context=context,
            schema=self.schema,
            policies=self.policies,
            quorum=quorum if quorum is not None else self.quorum,
        )
        task.validate()
        return task


def derive_run_id(workflow_id: str, context: SharedContext) -> str:
    """Deterministic run id: workflow id plus a content fingerprint.

    The fingerprint covers text, metadata, and image content hashes but
    not file paths, so identical inputs give identical ids everywhere.
    """
    fingerprint = hash_canonical(
        {
            "workflow_id": workflow_id,
            "text": [t.to_dict() for t in context.text_inputs],
            "images": [
                {"source_id": i.source_id, "content_hash": i.content_hash}
                for i in context.image_inputs
            ],
            "metadata": dict(context.metadata),
        }
    )
    return f"{workflow_id}-{fingerprint[:12]}"


def _load_yaml(path: str) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as handle:
            doc = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    return doc


def _require(doc: Mapping[str, Any], field: str, path: str) -> Any:
    if field not in doc:
        raise ConfigError(f"{path}: missing required field {field!r}")
    return doc[field]


def _descriptor(doc: Any, path: str) -> ModelDescriptor:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    for field in ("model_id", "display_name", "role", "modality", "backend_ref"):
        _require(doc, field, path)
    try:
        return ModelDescriptor.from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_workflow(path: str) -> WorkflowDefinition:
    """Read and validate a workflow definition file."""
    doc = _load_yaml(path)
    workflow_id = _require(doc, "workflow_id", "workflow_id")
    members_doc = _require(doc, "consortium", "consortium")
    if not isinstance(members_doc, list) or not members_doc:
        raise ConfigError("consortium: expected a non-empty list")
    consortium = tuple(
        _descriptor(member, f"consortium[{index}]")
        for index, member in enumerate(members_doc)
    )
    reasoner = _descriptor(_require(doc, "reasoner", "reasoner"), "reasoner")
    prompt_template = _require(doc, "prompt_template", "prompt_template")
    reasoner_template = _require(doc, "reasoner_template", "reasoner_template")
    schema_doc = _require(doc, "schema", "schema")
    if not isinstance(schema_doc, dict):
        raise ConfigError("schema: expected a mapping")
    try:
        schema = OutputSchema.from_dict(schema_doc)
    except (ConfigError, KeyError) as exc:
        raise ConfigError(f"schema: {exc}") from None
    policies_doc = doc.get("policies") or {}
    if not isinstance(policies_doc, dict):
        raise ConfigError("policies: expected a mapping")
    try:
        policies = PolicySet.from_dict(policies_doc)
    except ConfigError as exc:
        raise ConfigError(f"policies: {exc}") from None
    quorum = _require(doc, "quorum", "quorum")
    if not isinstance(quorum, int):
        raise ConfigError("quorum: expected an integer")
    definition = WorkflowDefinition(
        workflow_id=str(workflow_id),
        consortium=consortium,
        reasoner=reasoner,
        prompt_template=str(prompt_template),
        reasoner_template=str(reasoner_template),
        schema=schema,
        policies=policies,
        quorum=quorum,
    )
    # Build a throwaway task against an empty context to surface roster
    # and threshold problems at load time rather than at run time.
    probe = TaskSpec(
        workflow_id=definition.workflow_id,
        run_id="probe",
        consortium=definition.consortium,
        reasoner=definition.reasoner,
        prompt_template=definition.prompt_template,
        reasoner_template=definition.reasoner_template,
        context=SharedContext(),
        schema=definition.schema,
        policies=definition.policies,
        quorum=definition.quorum,
    )
    probe.validate()
    return definition


def load_image_input(source_id: str, path: str) -> ImageInput:
    try:
        with open(path, "rb") as handle:
            content = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from exc
    return ImageInput(
        source_id=source_id,
        path=os.path.abspath(path),
        content_hash=hash_content(content),
    )


def load_text_input(source_id: str, path: str) -> TextInput:
    try:
        with open(path, encoding="utf-8") as handle:
            return TextInput(source_id=source_id, text=handle.read())
    except OSError as exc:
        raise ConfigError(f"cannot read text input {path}: {exc}") from exc


def build_context(
    texts: Mapping[str, str],
    images: Mapping[str, str],
    metadata: Mapping[str, str],
) -> SharedContext:
    """Assemble a context from file paths keyed by source id."""
    return SharedContext(
        text_inputs=tuple(
            load_text_input(sid, path) for sid, path in sorted(texts.items())
        ),
        image_inputs=tuple(
            load_image_input(sid, path) for sid, path in sorted(images.items())
        ),
        metadata=dict(metadata),
    )


def _context_from_doc(doc: Mapping[str, Any], base_dir: str) -> SharedContext:
    texts: list[TextInput] = []
    for index, entry in enumerate(doc.get("text") or []):
        path = f"context.text[{index}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}: expected a mapping")
        source_id = _require(entry, "source_id", path)
        if "content" in entry:
            texts.append(TextInput(source_id=source_id, text=str(entry["content"])))
        elif "file" in entry:
            texts.append(
                load_text_input(source_id, os.path.join(base_dir, entry["file"]))
            )
        else:
            raise ConfigError(f"{path}: needs either 'content' or 'file'")
    images: list[ImageInput] = []
    for index, entry in enumerate(doc.get("images") or []):
        path = f"context.images[{index}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}: expected a mapping")
        source_id = _require(entry, "source_id", path)
        file_name = _require(entry, "file", path)
        images.append(
            load_image_input(source_id, os.path.join(base_dir, file_name))
        )
    metadata_doc = doc.get("metadata") or {}
    if not isinstance(metadata_doc, dict):
        raise ConfigError("context.metadata: expected a mapping")
    return SharedContext(
        text_inputs=tuple(texts),
        image_inputs=tuple(images),
        metadata={str(k): str(v) for k, v in metadata_doc.items()},
    )


def _reply_from_doc(doc: Mapping[str, Any], base_dir: str, path: str) -> ScriptedReply:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    text: Optional[str] = None
    if "response" in doc:
        text = str(doc["response"])
    elif "response_file" in doc:
        file_path = os.path.join(base_dir, doc["response_file"])
        try:
            with open(file_path, encoding="utf-8") as handle:
                text = handle.read()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read {file_path}: {exc}") from exc
    error = doc.get("error")
    if text is None and error is None:
        raise ConfigError(
            f"{path}: needs 'response', 'response_file', or 'error'"
        )
    latency = doc.get("latency_ms")
    try:
        return ScriptedReply(
            text=text,
            latency_ms=int(latency) if latency is not None else None,
            error=error,
        )
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class Scenario:
    """One runnable fixture: a context plus scripted backend behavior."""

    name: str
    context: SharedContext
    backends: Mapping[str, ScriptedBackend]
    deterministic_only: bool

    def registry(self) -> BackendRegistry:
        return dict(self.backends)


def load_scenario(path: str) -> Scenario:
    """Read a scenario fixture file; file references resolve beside it."""
    doc = _load_yaml(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    name = _require(doc, "scenario", "scenario")
    context = _context_from_doc(doc.get("context") or {}, base_dir)
    backends_doc = _require(doc, "backends", "backends")
    if not isinstance(backends_doc, dict) or not backends_doc:
        raise ConfigError("backends: expected a non-empty mapping")
    backends: dict[str, ScriptedBackend] = {}
    for ref, spec in sorted(backends_doc.items()):
        path_label = f"backends.{ref}"
        if not isinstance(spec, dict):
            raise ConfigError(f"{path_label}: expected a mapping")
        default = _reply_from_doc(
            _require(spec, "default", path_label), base_dir, f"{path_label}.default"
        )
        script: dict[str, ScriptedReply] = {}
        for prompt_hash, reply_doc in (spec.get("script") or {}).items():
            script[str(prompt_hash)] = _reply_from_doc(
                reply_doc, base_dir, f"{path_label}.script.{prompt_hash}"
            )
        backends[str(ref)] = ScriptedBackend(
            backend_ref=str(ref),
            script=script,
            default=default,
            seed=int(spec.get("seed", 0)),
            timeout_ms=int(spec.get("timeout_ms", 30_000)),
        )
    options = doc.get("options") or {}
    if not isinstance(options, dict):
        raise ConfigError("options: expected a mapping")
    return Scenario(
        name=str(name),
        context=context,
        backends=backends,
        deterministic_only=bool(options.get("deterministic_only", False)),
    )


def load_backend_configs(path: str) -> dict[str, BackendConfig]:
    """Read endpoint wiring for live backends from a YAML file."""
    doc = _load_yaml(path)
    backends_doc = _require(doc, "backends", "backends")
    if not isinstance(backends_doc, dict) or not backends_doc:
        raise ConfigError("backends: expected a non-empty mapping")
    configs: dict[str, BackendConfig] = {}
    for ref, spec in sorted(backends_doc.items()):
        path_label = f"backends.{ref}"
        if not isinstance(spec, dict):
            raise ConfigError(f"{path_label}: expected a mapping")
        try:
            configs[str(ref)] = BackendConfig(
                backend_ref=str(ref),
                endpoint_url=str(_require(spec, "endpoint_url", path_label)),
                model_name=str(_require(spec, "model_name", path_label)),
                auth_token_env=spec.get("auth_token_env"),
                timeout_ms=int(spec.get("timeout_ms", 30_000)),
                max_retries=int(spec.get("max_retries", 2)),
                temperature=float(spec.get("temperature", 0.0)),
            )
        except ConfigError as exc:
            raise ConfigError(f"{path_label}: {exc}") from None
    return configs


def build_http_registry(
    configs: Mapping[str, BackendConfig], *, seed: int = 0
) -> dict[str, HttpBackend]:
    return {
        ref: HttpBackend(config, rng=random.Random(seed))
        for ref, config in sorted(configs.items())
    }


def pack_dir(root: str, name: str) -> str:
    return os.path.join(root, name)


def pack_definition_path(root: str, name: str) -> str:
    return os.path.join(root, name, "definition.yaml")


def pack_scenario_path(root: str, name: str, scenario: str) -> str:
    return os.path.join(root, name, "fixtures", f"{scenario}.yaml")


def pack_golden_decision_path(root: str, name: str, scenario: str) -> str:
    return os.path.join(root, name, "golden", f"{scenario}.decision.json")


def pack_golden_report_path(root: str, name: str, scenario: str) -> str:
    return os.path.join(root, name, "golden", f"{scenario}.report.txt")


def list_pack_scenarios(root: str, name: str) -> list[str]:
    fixtures = os.path.join(root, name, "fixtures")
    names: list[str] = []
    for entry in sorted(os.listdir(fixtures)):
        if entry.endswith(".yaml"):
            names.append(entry[: -len(".yaml")])
    return names
