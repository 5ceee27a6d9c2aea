import os

import pytest

from skillevo.bundle import (
    ROOT_DOC,
    ValidationReport,
    diff_bundles,
    load_bundle,
    make_bundle,
    next_version,
    parse_manifest,
    validate_bundle,
    write_bundle,
)
from skillevo.errors import (
    DeleteRootDoc,
    MalformedFrontmatter,
    MissingField,
    MissingFrontmatter,
    NotABundle,
    PathEscape,
    UnknownRule,
)

DOC = "---\nname: evo-citation-checker\ndescription: checks citations\n---\n# Steps\n"


def test_parse_manifest_reads_name_description_and_extras():
    m = parse_manifest("---\nname: evo-citation-checker\ndescription: checks citations\nauthor: me\n---\nbody\n")
    assert m.name == "evo-citation-checker"
    assert m.description == "checks citations"
    assert dict(m.extra) == {"author": "me"}


def test_empty_body_after_frontmatter():
    b = make_bundle("---\nname: x\ndescription: y\n---\n")
    assert b.body == ""
    assert b.name == "x"


@pytest.mark.parametrize("text,err", [
    ("no frontmatter\n", MissingFrontmatter),
    ("---\nname: x\n---\n", MissingField),
    ("---\nname: x\ndescription: y\n", MalformedFrontmatter),
    ("---\nname: x\ndescription:\n  nested: 1\n---\n", MalformedFrontmatter),
    ("---\nname: x\ndescription: [a, b]\n---\n", MalformedFrontmatter),
])
def test_parse_manifest_errors(text, err):
    with pytest.raises(err):
        parse_manifest(text)


def test_missing_field_names_the_field():
    with pytest.raises(MissingField) as info:
        parse_manifest("---\nname: x\n---\n")
    assert "description" in str(info.value)


def test_load_bundle_counts_entries(tmp_path):
    (tmp_path / "scripts").mkdir()
    (tmp_path / ROOT_DOC).write_text(DOC)
    (tmp_path / "scripts" / "utils.py").write_text("def f():\n    return 1\n")
    b = load_bundle(tmp_path)
    assert list(b.files) == ["scripts/utils.py"]
    assert b.version == 0 and b.parent_version is None


def test_load_bundle_preserves_line_counts_byte_exactly(tmp_path):
    doc = DOC + "".join(f"line {i}\n" for i in range(64 - DOC.count("\n")))
    script = "".join(f"x{i} = {i}\r\n" for i in range(142))
    (tmp_path / ROOT_DOC).write_bytes(doc.encode())
    (tmp_path / "scripts").mkdir()
    (tmp_path / "scripts" / "detect.py").write_bytes(script.encode())
    b = load_bundle(tmp_path)
    assert b.root_doc.count("\n") == 64
    assert b.files["scripts/detect.py"] == script.encode()
    assert b.files["scripts/detect.py"].count(b"\n") == 142


def test_load_bundle_rejects_symlink_outside(tmp_path):
    outside = tmp_path / "secret.txt"
    outside.write_text("x")
    root = tmp_path / "b"
    root.mkdir()
    (root / ROOT_DOC).write_text(DOC)
    os.symlink(outside, root / "link.txt")
    with pytest.raises(PathEscape):
        load_bundle(root)


def test_load_bundle_requires_root_doc(tmp_path):
    with pytest.raises(NotABundle):
        load_bundle(tmp_path)


def test_lenient_load_keeps_unparseable_doc(tmp_path):
    (tmp_path / ROOT_DOC).write_text("# no frontmatter\n")
    b = load_bundle(tmp_path, strict=False)
    assert b.manifest is None
    with pytest.raises(MissingFrontmatter):
        load_bundle(tmp_path)


def test_write_then_load_round_trip(tmp_path):
    b = next_version(make_bundle(DOC, {"scripts/a.py": "print(1)\n", "references/r.md": b"\x00\xff"}))
    back = load_bundle(write_bundle(b, tmp_path / "out"))
    assert back == b


@pytest.mark.parametrize("path", ["../x", "/etc/passwd", "a/../../x", "C:/x"])
def test_paths_never_escape(path):
    with pytest.raises(PathEscape):
        make_bundle(DOC, {path: "x"})


def test_next_version_sets_parent_and_keeps_original():
    v0 = make_bundle(DOC, {"scripts/a.py": "1"})
    v1 = next_version(v0, {"scripts/a.py": "2"})
    assert (v1.version, v1.parent_version) == (1, 0)
    assert v0.files["scripts/a.py"] == b"1"
    assert v1.files["scripts/a.py"] == b"2"


def test_next_version_identity_edit():
    v0 = make_bundle(DOC, {"scripts/a.py": "1"})
    v1 = next_version(v0, {})
    assert v1.version == 1
    assert (v1.root_doc, dict(v1.files)) == (v0.root_doc, dict(v0.files))


def test_four_revisions_number_zero_to_three():
    b = make_bundle(DOC)
    chain = [b]
    for k in range(3):
        chain.append(next_version(chain[-1], {"scripts/s.py": str(k)}))
    assert [c.version for c in chain] == [0, 1, 2, 3]
    assert [c.parent_version for c in chain] == [None, 0, 1, 2]


def test_next_version_deletes_and_refuses_root_doc_removal():
    v0 = make_bundle(DOC, {"a.txt": "1", "b.txt": "2"})
    assert list(next_version(v0, {"a.txt": None}).files) == ["b.txt"]
    with pytest.raises(DeleteRootDoc):
        next_version(v0, {ROOT_DOC: None})
    with pytest.raises(PathEscape):
        next_version(v0, {"../up": "x"})


def test_diff_identity_is_empty():
    b = make_bundle(DOC, {"a": "1"})
    assert diff_bundles(b, b).empty


def test_diff_added_removed():
    a = make_bundle(DOC, {"p": "1"})
    b = make_bundle(DOC, {"q": "1"})
    d = diff_bundles(a, b)
    assert (d.added, d.removed, d.modified) == ({"q"}, {"p"}, set())


def test_diff_between_two_method_versions():
    v3 = make_bundle(DOC + "median filter\n", {"scripts/detrend.py": "median()", "scripts/search.py": "bls()"})
    v4 = next_version(v3, {"scripts/detrend.py": "savgol()", "scripts/search.py": "tls()"},
                      DOC + "savitzky-golay\n")
    d = diff_bundles(v3, v4)
    assert d.doc_changed
    assert "scripts/detrend.py" in d.modified


def test_self_contained_rule_flags_external_doc():
    b = make_bundle(DOC + "see /app/environment/doc/xxx.md for details\n")
    report = validate_bundle(b, {"SELF_CONTAINED"})
    assert [f.rule_id for f in report.findings] == ["SELF_CONTAINED"]
    assert not report.passed


def test_hyphen_import_rule():
    doc = "---\nname: evo-task-name\ndescription: d\n---\nbody\n"
    b = make_bundle(doc, {"scripts/run.py": "from evo_task_name.scripts.utils import f\n"})
    report = validate_bundle(b, {"HYPHEN_IMPORT"})
    assert [(f.rule_id, f.path) for f in report.findings] == [("HYPHEN_IMPORT", "scripts/run.py")]


def test_hyphen_import_quiet_without_imports():
    doc = "---\nname: evo-task-name\ndescription: d\n---\nbody\n"
    assert validate_bundle(make_bundle(doc, {"scripts/run.sh": "echo hi\n"})).passed


def test_empty_rule_set_passes():
    report = validate_bundle(make_bundle("---\nname: x\ndescription: y\n---\n/app/environment/doc/\n"), set())
    assert report.findings == () and report.passed


def test_unknown_rule():
    with pytest.raises(UnknownRule):
        validate_bundle(make_bundle(DOC), {"NOPE"})


def test_declared_scripts_rule():
    b = make_bundle(DOC + "Run `python3 skills/x/scripts/go.py`.\n", {"scripts/other.py": ""})
    report = validate_bundle(b, {"DECLARED_SCRIPTS"})
    assert [f.rule_id for f in report.findings] == ["DECLARED_SCRIPTS"]
    assert "scripts/go.py" in report.findings[0].message


def test_report_lines_round_trip():
    b = make_bundle(DOC + "/app/environment/doc/a /app/environment/doc/b\n")
    report = validate_bundle(b)
    assert len(report.findings) == 2
    assert ValidationReport.from_lines(report.to_lines()) == report
    assert all(line.count("\t") == 3 for line in report.to_lines().splitlines())


def test_validate_is_pure():
    b = make_bundle(DOC + "/root/environment/doc/x\n")
    assert validate_bundle(b) == validate_bundle(b)
