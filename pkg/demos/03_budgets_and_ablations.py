"""How the loop spends its budgets, and what each ablation removes."""
import tempfile
from collections import Counter
from fractions import Fraction
from pathlib import Path

from skillevo.evolution import EvolutionConfig
from skillevo.scenarios import always_fail_scenario, constant_score_scenario, scheduled_scenario


def show(label, outcome):
    s = outcome.state
    counts = Counter(e.kind for e in outcome.trace)
    print(f"{label}: status={s.status} r={s.r} n={s.n} j={s.j} final=v{outcome.final.version if outcome.final else '-'}")
    print("    " + ", ".join(f"{k}x{v}" for k, v in sorted(counts.items())))


with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    show("verifier never satisfied", always_fail_scenario(root / "a").run())
    show("hidden suite stuck at 1/2", constant_score_scenario(root / "b").run())
    show("perfect on the 2nd oracle call",
         scheduled_scenario(root / "c", [Fraction(1, 4), Fraction(1)]).run())
    for mode in ("no_verifier", "no_evolution", "no_skill"):
        show(mode, scheduled_scenario(root / mode, [Fraction(1, 2)], EvolutionConfig(mode=mode)).run())
