"""Regenerate golden decisions and reports for every workflow pack.

Run from the repository root:

    python3 scripts/make_goldens.py [pack ...]

Goldens are frozen outputs: regenerate them only when an intentional
behavior change is reviewed, then inspect the diff before committing.
"""

import os
import shutil
import sys
import tempfile

from consortium.audit import explain_report
from consortium.orchestrator import execute_run
from consortium.workflows import (
    list_pack_scenarios,
    load_scenario,
    load_workflow,
    pack_definition_path,
    pack_golden_decision_path,
    pack_golden_report_path,
    pack_scenario_path,
)

PACKS = ("podcast", "hreflex", "dental", "psychiatric", "rf")


def regenerate(root: str, pack: str) -> None:
    definition = load_workflow(pack_definition_path(root, pack))
    for scenario_name in list_pack_scenarios(root, pack):
        scenario = load_scenario(pack_scenario_path(root, pack, scenario_name))
        task = definition.build_task(scenario.context)
        with tempfile.TemporaryDirectory() as out:
            result = execute_run(
                task,
                scenario.registry(),
                out,
                deterministic_only=scenario.deterministic_only,
            )
            decision_path = pack_golden_decision_path(root, pack, scenario_name)
            report_path = pack_golden_report_path(root, pack, scenario_name)
            os.makedirs(os.path.dirname(decision_path), exist_ok=True)
            shutil.copyfile(result.decision_path, decision_path)
            with open(report_path, "w", encoding="utf-8") as handle:
                handle.write(explain_report(result.trail_path))
        print(f"{pack}/{scenario_name}: {task.run_id}")


def main() -> int:
    root = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "workflows")
    packs = sys.argv[1:] or PACKS
    for pack in packs:
        regenerate(root, pack)
    return 0


if __name__ == "__main__":
    sys.exit(main())
