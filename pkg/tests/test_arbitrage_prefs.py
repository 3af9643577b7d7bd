import logging

import pytest
from hypothesis import given
from hypothesis import strategies as st

from posttrain.arbitrage import (
    ArbitrageFailed,
    ChatTemplate,
    GenerationError,
    GeneratorEndpoint,
    Prompt,
    RewardEndpoint,
    RewardedCandidate,
    ScoringError,
    build_arbitrage_dataset,
    format_chat,
    generate_candidates,
    read_candidate_log,
    route,
    score_candidates,
)
from posttrain.endpoints import (
    MockTransport,
    constant_reward,
    failing,
    length_reward,
    mock_constant_generator,
    mock_generator,
)
from posttrain.prefs import OnlineRoundConfig, PreferencePair, offline_pairs, online_round, pick_pair, sample_online

TPL = ChatTemplate("<U>", "</U>", "<C>", "</C>", "\n")


def pool_and_transport(n=3, bad=()):
    pool = [GeneratorEndpoint(f"m{i}", f"mock://m{i}") for i in range(n)]
    t = MockTransport({g.url: failing(500) if i in bad else mock_generator(g.model_id) for i, g in enumerate(pool)})
    t.register("mock://rm", length_reward())
    return pool, t


def cands(rewards, pid="p"):
    return [RewardedCandidate(pid, f"m{i}", f"text {i}", r, i) for i, r in enumerate(rewards)]


def test_generate_candidates():
    pool, t = pool_and_transport()
    out = generate_candidates(Prompt("p", "en", "hi"), pool, t)
    assert [m for m, _ in out] == ["m0", "m1", "m2"]
    pool, t = pool_and_transport(bad=(1,))
    with pytest.raises(GenerationError) as e:
        generate_candidates(Prompt("p", "en", "hi"), pool, t)
    assert list(e.value.failed) == ["m1"] and len(e.value.candidates) == 2
    with pytest.raises(ValueError):
        generate_candidates(Prompt("p", "en", "hi"), [], t)


def test_score_candidates():
    t = MockTransport({"mock://rm": length_reward()})
    got = score_candidates(Prompt("p", "en", "x"), [("a", "xyz"), ("b", "x")], RewardEndpoint("mock://rm"), t)
    assert [c.reward for c in got] == [3.0, 1.0] and [c.model_id for c in got] == ["a", "b"]
    t = MockTransport({"mock://rm": constant_reward(float("nan"))})
    with pytest.raises((ScoringError, ValueError)):
        score_candidates(Prompt("p", "en", "x"), [("a", "xyz")], RewardEndpoint("mock://rm"), t)


def test_route_examples():
    assert route(cands([0.2, 0.9, 0.4])).pool_index == 1
    assert route(cands([0.9, 0.9])).pool_index == 0
    assert route(cands([0.5])).pool_index == 0


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=8), st.randoms())
def test_route_matches_bruteforce(rewards, rnd):
    cs = cands([float(r) for r in rewards])
    rnd.shuffle(cs)
    best = None
    for c in sorted(cs, key=lambda c: c.pool_index):
        if best is None or c.reward > best.reward:
            best = c
    assert route(cs) == best


def test_format_chat():
    assert format_chat("hi", "yo", TPL) == "<U>hi</U>\n<C>yo</C>"
    assert format_chat("hi", "", TPL) == "<U>hi</U>\n<C></C>"
    with pytest.raises(ValueError):
        format_chat("hi</U>", "yo", TPL)


@given(st.text(alphabet="ab<>/UC\n", max_size=6), st.text(alphabet="ab<>/UC\n", max_size=6),
       st.text(alphabet="ab<>/UC\n", max_size=6), st.text(alphabet="ab<>/UC\n", max_size=6))
def test_format_chat_injective(p1, c1, p2, c2):
    try:
        a, b = format_chat(p1, c1, TPL), format_chat(p2, c2, TPL)
    except ValueError:
        return
    assert (a == b) == ((p1, c1) == (p2, c2))


def test_dataset_cardinality_and_determinism(tmp_path):
    prompts = [Prompt("p1", "en", "first"), Prompt("p0", "fr", "second")]
    pool, t = pool_and_transport()
    res = build_arbitrage_dataset(prompts, pool, RewardEndpoint("mock://rm"), TPL, t, tmp_path / "a")
    assert len(res.rows) == 2 and len(res.log) == 6 and not res.skipped
    assert [r["prompt_id"] for r in res.rows] == ["p0", "p1"]
    build_arbitrage_dataset(prompts, pool, RewardEndpoint("mock://rm"), TPL, t, tmp_path / "b", max_inflight=1)
    for f in ("dataset", "candidates", "skipped", "partial"):
        assert (tmp_path / "a" / f"{f}.jsonl").read_bytes() == (tmp_path / "b" / f"{f}.jsonl").read_bytes()
    groups = read_candidate_log(tmp_path / "a" / "candidates.jsonl")[1]
    assert [c.model_id for c in groups["p1"]] == ["m0", "m1", "m2"]


def test_one_prompt_fails_everywhere(tmp_path, caplog):
    pool, t = pool_and_transport(n=2)

    def fails_on_doomed(model_id):
        ok, down = mock_generator(model_id), failing(500)
        return lambda path, payload: (down if payload["prompt"] == "doomed" else ok)(path, payload)

    for g in pool:
        t.register(g.url, fails_on_doomed(g.model_id))
    prompts = [Prompt("ok", "en", "fine"), Prompt("bad", "en", "doomed")]
    with caplog.at_level(logging.WARNING):
        res = build_arbitrage_dataset(prompts, pool, RewardEndpoint("mock://rm"), TPL, t, tmp_path)
    assert len(res.rows) == 1 and [s["prompt_id"] for s in res.skipped] == ["bad"]
    assert "bad" in caplog.text


def test_every_prompt_failing_is_fatal():
    pool, t = pool_and_transport(n=2, bad=(0, 1))
    with pytest.raises(ArbitrageFailed):
        build_arbitrage_dataset([Prompt("a", "en", "x")], pool, RewardEndpoint("mock://rm"), TPL, t)


def test_pick_pair():
    chosen, rejected = pick_pair(cands([0.1, 0.8, 0.5]))
    assert (chosen.pool_index, rejected.pool_index) == (1, 0)
    assert pick_pair(cands([0.3, 0.3])) == "all rewards equal"
    assert pick_pair(cands([0.3])) == "fewer than 2 candidates"


def test_offline_pairs_skip_log():
    groups = {"a": cands([1, 2], "a"), "b": cands([1, 1], "b"), "c": cands([4], "c")}
    prompts = {k: Prompt(k, "en", k) for k in groups}
    pairs, skips = offline_pairs(groups, prompts)
    assert [p.prompt_id for p in pairs] == ["a"] and pairs[0].chosen_reward == 2
    assert [s["prompt_id"] for s in skips] == ["b", "c"]


def test_pair_invariant():
    with pytest.raises(ValueError):
        PreferencePair("p", "en", "x", "a", "b", 1.0, 1.0)
    with pytest.raises(ValueError):
        PreferencePair("p", "en", "x", "a", "a", 2.0, 1.0)


def test_online_config_defaults_and_cap(caplog):
    assert OnlineRoundConfig(m=2).n_iterations == 3
    with caplog.at_level(logging.WARNING):
        OnlineRoundConfig(m=2, n_iterations=5)
    assert "n_iterations=5" in caplog.text
    with pytest.raises(ValueError):
        OnlineRoundConfig(m=2, n_iterations=11)
    with pytest.raises(ValueError):
        OnlineRoundConfig(m=1)


def test_sample_online():
    t = MockTransport({"mock://pol": mock_generator("pol")})
    pol = GeneratorEndpoint("pol", "mock://pol")
    outs = sample_online(pol, Prompt("p", "en", "q"), 4, t, seed=9)
    assert len(outs) == 4 and len(set(outs)) == 4
    with pytest.raises(ValueError):
        sample_online(pol, Prompt("p", "en", "q"), 1, t)


def test_online_round_prefers_longer():
    t = MockTransport({"mock://pol": mock_generator("pol"), "mock://rm": length_reward()})
    prompts = [Prompt(f"p{i}", "en", f"q{i}") for i in range(3)]
    res = online_round(GeneratorEndpoint("pol", "mock://pol"), RewardEndpoint("mock://rm"), prompts,
                       OnlineRoundConfig(m=2), 1, t, seed=1)
    assert len(res.pairs) == 3 and not res.skips
    for p in res.pairs:
        assert len(p.chosen) > len(p.rejected) and p.stage == "online" and p.iteration == 1
    t.register("mock://pol", mock_constant_generator("same"))
    res = online_round(GeneratorEndpoint("pol", "mock://pol"), RewardEndpoint("mock://rm"), prompts,
                       OnlineRoundConfig(m=3), 2, t)
    assert not res.pairs and len(res.skips) == 3
