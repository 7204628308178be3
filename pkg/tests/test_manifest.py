"""Manifest parsing and the shipped corpus."""
import pytest

from transkernel.manifest import ManifestError, corpus_names, load_manifest, parse_manifest

EXPECTED = {"alloc_fallback", "loop_10", "loop_100", "loop_1000", "rules_mix", "straight_line",
            "suspend_like", "warn_path"}

SRC = """
start:
    mov r0, #1
    bl halt
"""


def test_corpus_is_complete(corpus):
    assert set(corpus_names()) == EXPECTED
    for name, wl in corpus.items():
        assert wl.name == name
        assert wl.entry in wl.labels.values()
        assert wl.irq_handler is not None


def test_include_and_label_resolution(tmp_path):
    (tmp_path / "prog.s").write_text(SRC)
    (tmp_path / "base.inc").write_text("ram = 0x100000..0x101000\n[hooks]\n0x01f00080 = halt\n")
    wl = parse_manifest("include = base.inc\nname = t\nentry = start\nasm = prog.s@0x8000\n",
                        str(tmp_path))
    assert wl.entry == 0x8000 and wl.ram == [(0x100000, 0x1000)]
    assert wl.hooks == {0x01F0_0080: "halt"}


@pytest.mark.parametrize("text, msg", [
    ("name = x\n", "missing entry"),
    ("entry = 0\n[bogus]\n", "unknown section"),
    ("entry = 0\nnonsense\n", "key = value"),
    ("entry = 0\n[cold]\n0x100 = halt\n", "not a cold service"),
    ("entry = 0\n[hooks]\n0x100 = halt\n[cold]\n0x100 = warn\n", "duplicate hook"),
    ("entry = 0\n[irq]\n3 = enabled\n", "irq_handler"),
    ("entry = 0\nirq_handler = 0\n[irq]\n3 = enabled\n[schedule]\n5 = 4\n", "not declared"),
])
def test_manifest_errors(text, msg):
    with pytest.raises(ManifestError, match=msg):
        parse_manifest(text)


def test_hook_inside_code_is_rejected(tmp_path):
    (tmp_path / "prog.s").write_text(SRC)
    with pytest.raises(ManifestError, match="inside a code segment"):
        parse_manifest("entry = start\nasm = prog.s@0x8000\n[hooks]\n0x8004 = halt\n", str(tmp_path))


def test_unknown_name_lists_corpus():
    with pytest.raises(ManifestError, match="loop_10"):
        load_manifest("definitely_not_here")


def test_include_cycle_is_bounded(tmp_path):
    (tmp_path / "a.inc").write_text("include = a.inc\n")
    with pytest.raises(ManifestError, match="too deep"):
        parse_manifest("include = a.inc\nentry = 0\n", str(tmp_path))
