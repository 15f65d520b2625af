"""Developer smoke run: one deterministic single_label run end to end."""

import json
import sys
import tempfile

from consortium import (
    ModelDescriptor,
    OutputSchema,
    PolicySet,
    ScriptedBackend,
    ScriptedReply,
    SharedContext,
    TaskSpec,
    TextInput,
    execute_run,
    explain_report,
    replay,
    verify_chain,
)


def main() -> int:
    members = tuple(
        ModelDescriptor(
            model_id=f"m{i}",
            display_name=f"Member {i}",
            role="consortium_member",
            modality="text",
            backend_ref=f"b{i}",
        )
        for i in range(1, 4)
    )
    reasoner = ModelDescriptor(
        model_id="r1",
        display_name="Judge",
        role="reasoner",
        modality="text",
        backend_ref="rj",
    )
    context = SharedContext(
        text_inputs=(TextInput("signal", "a narrowband pulse at 433 MHz"),),
        metadata={"band": "UHF"},
    )
    schema = OutputSchema(
        kind="single_label",
        label_universe=("FM", "LoRa", "Bluetooth"),
        allows_unknown=True,
    )
    task = TaskSpec(
        workflow_id="smoke",
        run_id="smoke-0001",
        consortium=members,
        reasoner=reasoner,
        prompt_template="Classify this signal: {{signal}} (band {{band}})",
        reasoner_template="Consolidate:\n{{candidates}}\n{{consensus}}\n{{output_grammar}}",
        context=context,
        schema=schema,
        policies=PolicySet(support_threshold=2),
        quorum=2,
    )
    registry = {
        "b1": ScriptedBackend("b1", default=ScriptedReply(text="label: LoRa")),
        "b2": ScriptedBackend("b2", default=ScriptedReply(text="label: LoRa")),
        "b3": ScriptedBackend("b3", default=ScriptedReply(text="label: FM")),
    }
    with tempfile.TemporaryDirectory() as out:
        result = execute_run(task, registry, out, deterministic_only=True)
        print("decision entries:")
        for entry in result.decision.entries:
            print(" ", entry.target, entry.value, entry.confidence, entry.provenance)
        print("discarded:", [(d.target, d.value, d.reason) for d in result.decision.discarded])
        broken = verify_chain(result.trail_path)
        print("verify:", "intact" if broken is None else f"broken at {broken}")
        replay(result.trail_path)
        print("replay: ok")
        print(explain_report(result.trail_path))
        with open(result.decision_path) as fh:
            doc = json.loads(fh.read())
        assert doc["entries"][0]["value"] == "LoRa"

    registry["rj"] = ScriptedBackend(
        "rj",
        default=ScriptedReply(
            text=(
                "DECISION:\n"
                "label | LoRa | high | cites: m1,m2\n"
                "RATIONALE:\n"
                "Two of three members agree and the chirp profile fits LoRa."
            )
        ),
    )
    with tempfile.TemporaryDirectory() as out:
        result = execute_run(task, registry, out, deterministic_only=False)
        print("reasoner-mode entries:")
        for entry in result.decision.entries:
            print(" ", entry.target, entry.value, entry.confidence, entry.provenance, entry.flags)
        print("mode:", result.decision.consolidation_mode)
        print("rationale:", result.decision.reasoner_rationale)
        print("discarded:", [(d.target, d.value, d.reason) for d in result.decision.discarded])
    return 0


if __name__ == "__main__":
    sys.exit(main())
