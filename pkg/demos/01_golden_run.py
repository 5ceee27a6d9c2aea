"""Walk through one scripted evolution round by round.

The generator's first skill crashes, the second passes the surrogate suite
but leaves its checklist open, then the oracle reports "not yet" twice
while the verifier tightens its suite, and the third skill finally scores
perfectly on the hidden suite.
"""
import tempfile
from pathlib import Path

from skillevo.evolution import render_summary
from skillevo.oracle import SealedStore
from skillevo.scenarios import golden_scenario
from skillevo.trace import TraceLog

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    log = TraceLog("transit-period")
    outcome = golden_scenario(root, store=SealedStore(root / "sealed")).run(log)

    print("What the generator was told after each check:")
    for e in log.events:
        p = e.payload
        if e.kind == "suite_run":
            print(f"  v{p['version']} surrogate suite {p['suite_version']}: {p['reward']} ({p['display']})")
        elif e.kind == "checklist_blocked":
            print(f"  checklist still open ({p['missing']}), oracle not consulted")
        elif e.kind == "bit_appended":
            print(f"  oracle bit: {p['bit']} (fail, no score revealed)")
        elif e.kind == "suite_escalated":
            print(f"  verifier escalates to suite {p['suite_version']} with {p['assertions']} assertions")
        elif e.kind == "early_exit":
            print("  oracle satisfied, stopping")

    print("\nOperator view (sealed scores unlocked):")
    for e in log.events:
        if e.kind == "oracle_evaluated":
            print(f"  oracle call {e.payload['n']}: v{e.payload['version']} scored {e.payload['score']}")

    print()
    print(render_summary(outcome))
