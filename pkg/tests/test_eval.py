from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import chrf_ref
from posttrain.arbitrage import Prompt
from posttrain.chrf import chrf_pp, mean_sentence_chrf
from posttrain.endpoints import MockTransport, first_position_judge, length_judge, mock_translator, scripted_judge
from posttrain.judge import (
    JudgeConfig,
    JudgeError,
    MissingCompletions,
    Verdict,
    WinRateTable,
    build_eval_set,
    judge_pair,
    judge_sensitivity,
    parse_verdict,
    run_match,
)


def test_chrf_hand_examples():
    assert chrf_pp("ab", "abb", char_order=1, word_order=0, beta=1) == 80.0
    assert chrf_pp("the cat sat", "the cat sat") == 100.0
    assert chrf_pp("", "anything at all") == 0.0
    with pytest.raises(ValueError):
        chrf_pp("x", "   ")


text = st.text(alphabet="ab cé中", max_size=25)


@given(text, text.filter(lambda s: s.strip()), st.integers(1, 6), st.integers(0, 3), st.sampled_from([1.0, 2.0, 3.0]))
def test_chrf_matches_bruteforce(hyp, ref, co, wo, beta):
    assert abs(chrf_pp(hyp, ref, co, wo, beta) - chrf_ref(hyp, ref, co, wo, beta)) < 1e-9


def test_mean_sentence_chrf():
    assert mean_sentence_chrf(["a b", "zz"], ["a b", "qq"]) == pytest.approx(50.0)
    with pytest.raises(ValueError):
        mean_sentence_chrf(["a"], [])


def test_parse_verdict():
    assert parse_verdict("reasoning...\nA") == "A"
    assert parse_verdict("b") == "B"
    assert parse_verdict("so\n**TIE**") == "tie"
    assert parse_verdict("banana") is None


def test_template_placeholders():
    with pytest.raises(ValueError):
        JudgeConfig("mock://j", "only {instruction} and {response_a}")
    cfg = JudgeConfig("mock://j")
    out = cfg.render("q", "{response_b}", "real b")
    assert "{response_b}" in out and "real b" in out


P = Prompt("p", "en", "say hi")


def transport_with(handler):
    return MockTransport({"mock://j": handler})


def test_debiased_judging():
    cfg = JudgeConfig("mock://j")
    v = judge_pair(P, "a much longer answer", "short", cfg, transport_with(length_judge()))
    assert (v.winner, v.order_flipped_agreement) == ("A", True)
    v = judge_pair(P, "one", "two", cfg, transport_with(first_position_judge()))
    assert (v.winner, v.order_flipped_agreement) == ("tie", False)
    with pytest.raises(JudgeError):
        judge_pair(P, "one", "two", cfg, transport_with(scripted_judge(["banana"])))


def test_single_reprompt_recovers():
    t = transport_with(scripted_judge(["banana", "B", "A"]))
    v = judge_pair(P, "x", "y", JudgeConfig("mock://j"), t)
    assert v.winner == "B" and v.order_flipped_agreement


def test_disagreeing_verdict_must_be_tie():
    with pytest.raises(ValueError):
        Verdict("p", "en", "A", False)


def test_win_rate_examples():
    t = WinRateTable("a", "b", {"en": (2, 1, 1)})
    assert t.exact_win_rate("en") == Fraction(5, 8) and t.win_rate("en") == 0.625
    two = WinRateTable("a", "b", {"de": (3, 2, 0), "fr": (4, 1, 0)})
    assert two.win_rates == {"de": 0.6, "fr": 0.8} and two.exact_macro_average() == Fraction(7, 10)
    assert WinRateTable.from_dict(two.to_dict()).counts == two.counts


@given(st.dictionaries(st.sampled_from(["en", "fr", "ja", "ar"]),
                       st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50)).filter(lambda c: sum(c)),
                       min_size=1))
def test_antisymmetry(counts):
    t = WinRateTable("a", "b", counts)
    s = t.swapped()
    for lang in counts:
        assert t.exact_win_rate(lang) + s.exact_win_rate(lang) == 1
        assert t.win_rate(lang) + s.win_rate(lang) == 1.0
    assert t.exact_macro_average() + s.exact_macro_average() == 1


def test_run_match_and_position_bias():
    prompts = [Prompt(f"p{i}", lang, "q") for i, lang in enumerate(["en", "fr", "en", "fr"])]
    a = {p.id: "aaaa" for p in prompts}
    b = {p.id: "b" for p in prompts}
    table, verdicts = run_match(prompts, a, b, JudgeConfig("mock://j"), transport_with(length_judge()))
    assert table.win_rates == {"en": 1.0, "fr": 1.0}
    assert [v.prompt_id for v in verdicts] == ["p0", "p2", "p1", "p3"]
    table, _ = run_match(prompts, a, b, JudgeConfig("mock://j"), transport_with(first_position_judge()))
    assert table.macro_average == 0.5
    with pytest.raises(MissingCompletions, match="p3"):
        run_match(prompts, a, {k: v for k, v in b.items() if k != "p3"}, JudgeConfig("mock://j"), transport_with(length_judge()))


def test_sensitivity():
    base = WinRateTable("m", "g", {"en": (500, 500, 0), "de": (300, 700, 0)})
    assert judge_sensitivity(base, base).max_abs_delta == 0
    shifted = WinRateTable("m", "g", {"en": (593, 407, 0), "de": (300, 700, 0)})
    rep = judge_sensitivity(base, shifted)
    assert abs(rep.max_abs_delta - 0.093) <= 1e-12 and rep.deltas["de"] == 0
    with pytest.raises(ValueError):
        judge_sensitivity(base, WinRateTable("m", "g", {"en": (1, 0, 0)}))


def test_build_eval_set():
    en = [Prompt(f"q{i}", "en", f"question {i}") for i in range(5)]
    t = MockTransport({"mock://mt": mock_translator()})
    assert build_eval_set(en, "mock://mt", ["en"], t) == en
    rows = build_eval_set(en, "mock://mt", ["en", "ja", "de"], t)
    assert len(rows) == 15 and rows[5] == Prompt("q0-ja", "ja", "[ja] question 0")
    with pytest.raises(ValueError, match="duplicate"):
        build_eval_set(en + en[:1], "mock://mt", ["en"], t)
    with pytest.raises(ValueError):
        build_eval_set(en, "mock://mt", ["xx"], t)
