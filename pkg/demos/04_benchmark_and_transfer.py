"""Pass rates with and without evolved bundles, per domain, and under a second target policy."""
import tempfile
from pathlib import Path

from skillevo.evaluation import domain_breakdown, run_benchmark, to_decimal, transfer_evaluate
from skillevo.oracle import SealedStore
from skillevo.scenarios import build_desk_corpus, desk_solver, make_script_runner

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    tasks, bundles = build_desk_corpus(root / "corpus", SealedStore(root / "sealed"))
    sandboxes = root / "sandboxes"
    sandboxes.mkdir()

    evolved = run_benchmark(tasks, bundles, desk_solver(), sandbox_root=sandboxes)
    bare = run_benchmark(tasks, {}, desk_solver(), sandbox_root=sandboxes)
    print(f"with bundles {evolved.mean}, without {bare.mean}, delta {evolved.mean - bare.mean}"
          f" ({to_decimal(evolved.mean - bare.mean, 4)})")

    domains = {t.task_id: t.domain_tag for t in tasks}
    for row in domain_breakdown([*evolved.records, *bare.records], domains, baseline=bare.condition):
        print(f"  {row.domain}: {row.passed}/{row.total} vs {row.baseline_passed}/{row.baseline_total}")

    (moved,) = transfer_evaluate(bundles, "solver", [make_script_runner()], tasks, sandbox_root=sandboxes)
    print(f"script runner: {moved.transferred.mean} with bundles, delta {moved.delta}")
