"""Lint a handful of skill bundles the way `skillevo validate-skill` does."""
from skillevo.bundle import make_bundle, validate_bundle

DOC = "---\nname: evo-period\ndescription: Fit a transit period.\n---\n# Period\n\n{body}"

cases = {
    "clean": (DOC.format(body="Run `python3 scripts/fit.py transits.csv`.\n"),
              {"scripts/fit.py": "print('fit')\n"}),
    "reads the task's private docs": (DOC.format(body="See /app/environment/doc/format.txt.\n"), {}),
    "imports its own dir with underscores": (
        DOC.format(body="Run `python3 scripts/fit.py`.\n"),
        {"scripts/fit.py": "from evo_period.scripts.util import mean\n"}),
    "mentions a script it does not ship": (DOC.format(body="Run `python3 scripts/plot.py`.\n"), {}),
}

for label, (doc, files) in cases.items():
    report = validate_bundle(make_bundle(doc, files))
    verdict = "ok" if report.passed else "rejected"
    print(f"{label}: {verdict}")
    for f in report.findings:
        print(f"    {f.rule_id}: {f.message}")
