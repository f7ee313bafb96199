from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import LATTICE_ADMITTED, lattice_problem, text
from lemmaflow.domain import Lemma, LemmaLibrary, Problem
from lemmaflow.protocol import (
    MissingSlot,
    PromptKind,
    SearchVerdict,
    VerdictKind,
    VerifierVerdict,
    answers_match,
    extract_final_answer,
    find_boxed,
    gave_up,
    library_render,
    load_templates,
    parse_search_output,
    parse_summarizer_output,
    parse_verdict,
    render_prompt,
)

PROBLEM = Problem("t", "Show that $x^2 \\ge 0$.")


def small_library(n):
    lib = LemmaLibrary()
    for i in range(1, n + 1):
        lib = lib.insert(Lemma(i, f"Fact {i}.", ("Obvious.",)))
    return lib


# ---------------------------------------------------------------- templates


def test_every_prompt_kind_has_a_template():
    ts = load_templates("v1")
    for kind in PromptKind:
        assert ts[kind].text


def test_search_prompt_without_library_has_no_provided_lemmas():
    prompt = render_prompt(PromptKind.LEMMA_SEARCH, PROBLEM, LemmaLibrary())
    assert "### Provided Lemmas ###" not in prompt and PROBLEM.statement in prompt


def test_search_prompt_injects_library():
    empty = render_prompt(PromptKind.LEMMA_SEARCH, PROBLEM, LemmaLibrary())
    prompt = render_prompt(PromptKind.LEMMA_SEARCH, PROBLEM, small_library(2))
    assert "### Provided Lemmas ###" in prompt
    assert prompt.count("<lemma>") - empty.count("<lemma>") == 2


def test_summarize_prompt_carries_library_and_thinking():
    empty = render_prompt(PromptKind.LEMMA_SUMMARIZE, PROBLEM, LemmaLibrary(), {"Thinking": ""})
    prompt = render_prompt(PromptKind.LEMMA_SUMMARIZE, PROBLEM, small_library(3), {"Thinking": "MY-THOUGHTS"})
    assert prompt.count("<lemma>") - empty.count("<lemma>") == 3 and "MY-THOUGHTS" in prompt


def test_self_improve_prompt_mentions_give_up_sentence():
    prompt = render_prompt(
        PromptKind.SELF_IMPROVE, PROBLEM, None, {"SolutiontoVerify": "s", "PreviousCheckingEfforts": "f"}
    )
    assert "I have not found a complete solution" in prompt


@pytest.mark.parametrize(
    "kind, extras, missing",
    [
        (PromptKind.LEMMA_SUMMARIZE, {}, "Thinking"),
        (PromptKind.SELF_IMPROVE, {"SolutiontoVerify": "s"}, "PreviousCheckingEfforts"),
        (PromptKind.LEMMA_VERIFY, {}, "NewLemmatoVerify"),
    ],
)
def test_missing_slot(kind, extras, missing):
    with pytest.raises(MissingSlot) as info:
        render_prompt(kind, PROBLEM, None, extras)
    assert info.value.name == missing


def test_rendering_is_deterministic_and_verbatim():
    a = render_prompt(PromptKind.FINAL_VERIFY, PROBLEM, None, {"response": "{Problem} stays"})
    b = render_prompt(PromptKind.FINAL_VERIFY, PROBLEM, None, {"response": "{Problem} stays"})
    assert a == b and "{Problem} stays" in a


# ---------------------------------------------------------------- boxed scanning


def test_boxed_counts_nested_braces():
    (box,) = find_boxed("so \\boxed{\\frac{1}{2}} done")
    assert box.content == "\\frac{1}{2}"


def test_unterminated_box_reports_diagnostic():
    diags = []
    (box,) = find_boxed("\\boxed{open {", diags)
    assert diags and diags[0].kind == "unterminated_box"


# ---------------------------------------------------------------- search output


def test_search_round1_fixture():
    out = parse_search_output(text("round1_search.md"))
    assert out.verdict is SearchVerdict.PARTIAL
    assert [l.index for l in out.proven] == [1, 3]
    assert all(l.proof_steps for l in out.proven)
    assert len(out.unproven_statements) == 1


def test_search_sentinel_empties_unproven():
    assert parse_search_output(text("round2_search.md")).unproven_statements == ()


def test_search_complete_with_answer():
    out = parse_search_output(text("round4_search.md"))
    assert out.verdict is SearchVerdict.COMPLETE and out.answer == "6"


def test_search_empty_text():
    out = parse_search_output("")
    assert (out.proven, out.unproven_statements, out.verdict) == ((), (), SearchVerdict.NONE)
    assert out.diagnostics


def test_search_two_lemmas_split_on_separator():
    raw = (
        "**a. Verdict:** I have not found a complete solution.\n\\boxed{\n"
        "**Lemma 1:** $a>0$.\n**Proof 1:**\n* **Step 1:** Given.\n---\n"
        "**Lemma 2:** $a^2>0$.\n**Proof 2:**\n* **Step 1:** By Lemma 1.\n* **Step 2:** Square.\n}"
    )
    out = parse_search_output(raw)
    assert [len(l.proof_steps) for l in out.proven] == [1, 2]
    assert out.proven[1].cited_indices == {1}


# ---------------------------------------------------------------- summarizer output


def test_summary_no_new_lemmas():
    assert parse_summarizer_output("Can not summary any new lemmas.").lemmas == []


def test_summary_round1_names_and_citations():
    lemmas = parse_summarizer_output(text("round1_summary.md")).lemmas
    assert len(lemmas) == 10
    assert lemmas[3].cited_indices == {1, 3}


def test_summary_round3_against_library():
    full = parse_summarizer_output(text("round1_summary.md")).lemmas
    lib = LemmaLibrary(tuple(l for l in full if l.key in LATTICE_ADMITTED))
    parsed = parse_summarizer_output(text("round3_summary.md"), lib)
    assert [(l.index, len(l.proof_steps)) for l in parsed.lemmas] == [(11, 5), (12, 5)]
    assert parsed.lemmas[1].cited_indices == {4, 11}
    assert [d.kind for d in parsed.diagnostics] == ["renumbered"]


def test_summary_repairs_tag_on_content_line():
    raw = "<lemma>**Lemma 1:** $x=x$.\n**Proof 1:**\n* **Step 1:** Reflexivity.</lemma>"
    parsed = parse_summarizer_output(raw)
    assert [l.index for l in parsed.lemmas] == [1]
    assert any(d.kind == "repaired_tag" for d in parsed.diagnostics)


def test_summary_skips_block_without_proof():
    parsed = parse_summarizer_output("<lemma>\n**Lemma 1:** claim only.\n</lemma>")
    assert parsed.lemmas == [] and parsed.diagnostics[0].kind == "missing_proof"


def test_glued_parenthetical_is_a_name():
    raw = "<lemma>\n**Lemma 1 (Lemma 1):**(Pigeonhole) Two share a box.\n**Proof 1:**\n* **Step 1:** Count.\n</lemma>"
    (lemma,) = parse_summarizer_output(raw).lemmas
    assert lemma.name == "Pigeonhole" and lemma.statement == "Two share a box."
    assert parse_summarizer_output(library_render([lemma])).lemmas[0].name == "Pigeonhole"


def test_spaced_parenthetical_stays_in_statement():
    raw = "<lemma>\n**Lemma 1:** (a) holds.\n**Proof 1:**\n* **Step 1:** Check.\n</lemma>"
    (lemma,) = parse_summarizer_output(raw).lemmas
    assert lemma.name is None and lemma.statement == "(a) holds."


# ---------------------------------------------------------------- verdicts


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("fine \\box{STEP-1}", VerifierVerdict.all_correct()),
        ("bad \\box{STEP2}", VerifierVerdict.step_error(2)),
        ("bad \\box{STEP 0}", VerifierVerdict.step_error(0)),
        ("bad \\\\box{{LEMMA3}}", VerifierVerdict.lemma_error(3)),
        ("\\box{STEP2} then on reflection \\box{STEP-1}", VerifierVerdict.all_correct()),
        ("\\boxed{STEP4}", VerifierVerdict.step_error(4)),
    ],
)
def test_verdicts(raw, expected):
    assert parse_verdict(raw) == expected


def test_format_error_keeps_description():
    v = parse_verdict("FORMAT_ERROR: missing proof skeleton")
    assert v.kind is VerdictKind.FORMAT_ERROR and v.description == "missing proof skeleton"


def test_format_error_after_a_box_does_not_win():
    assert parse_verdict("\\box{STEP1} FORMAT_ERROR later").kind is VerdictKind.STEP_ERROR


def test_missing_verdict():
    assert parse_verdict("looks fine to me") == VerifierVerdict.format_error("missing verdict")


@given(st.text())
def test_parse_verdict_is_total(s):
    assert isinstance(parse_verdict(s), VerifierVerdict)


@given(st.binary(max_size=300))
def test_parsers_accept_any_bytes(b):
    parse_search_output(b)
    parse_summarizer_output(b)
    parse_verdict(b)


# ---------------------------------------------------------------- answers


@pytest.mark.parametrize(
    "solution, reference, ok",
    [
        ("thus \\boxed{6}", "6", True),
        ("thus \\boxed{ 6. }", "6", True),
        ("\\boxed{\\dfrac{1}{2}}", "\\frac{1}{2}", True),
        ("\\boxed{0.5}", "0.50", True),
        ("\\boxed{7}", "6", False),
        ("no box", "6", False),
    ],
)
def test_answers_match(solution, reference, ok):
    assert answers_match(solution, reference) is ok


def test_extract_final_answer_takes_last_box():
    assert extract_final_answer("\\boxed{1} and \\boxed{2}") == "2"


@pytest.mark.parametrize(
    "raw, expected",
    [("I have not found a complete solution.", True), ('"I have not found a complete solution"', True),
     ("I have not found a complete solution, but here is a fix", False), ("", False)],
)
def test_gave_up(raw, expected):
    assert gave_up(raw) is expected


def test_lattice_problem_loads():
    p = lattice_problem()
    assert p.reference_answer == "6"
