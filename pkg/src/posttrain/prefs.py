"""Offline and online preference-pair construction."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .arbitrage import GeneratorEndpoint, Prompt, RewardedCandidate, RewardEndpoint, ScoringError, score_candidates
from .endpoints import EndpointError, Transport
from .records import read_jsonl

log = logging.getLogger(__name__)

STAGES = ("offline", "online")
DEFAULT_ITERATIONS = 3
MAX_ITERATIONS = 10


@dataclass(frozen=True)
class PreferencePair:
    prompt_id: str
    language: str
    prompt_text: str
    chosen: str
    rejected: str
    chosen_reward: float
    rejected_reward: float
    stage: str = "offline"
    iteration: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not (math.isfinite(self.chosen_reward) and math.isfinite(self.rejected_reward)):
            raise ValueError(f"pair {self.prompt_id!r}: rewards must be finite")
        if not self.chosen_reward > self.rejected_reward:
            raise ValueError(f"pair {self.prompt_id!r}: chosen reward must exceed rejected reward")
        if self.chosen == self.rejected:
            raise ValueError(f"pair {self.prompt_id!r}: chosen and rejected texts are identical")
        if self.iteration < 0 or (self.stage == "offline" and self.iteration != 0):
            raise ValueError(f"pair {self.prompt_id!r}: bad iteration {self.iteration} for stage {self.stage}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PreferencePair":
        return cls(**d)


def read_pairs(path) -> list[PreferencePair]:
    return [PreferencePair.from_dict(r) for r in read_jsonl(path)]


@dataclass(frozen=True)
class OnlineRoundConfig:
    m: int
    n_iterations: int = DEFAULT_ITERATIONS
    beta: float = 0.1
    max_iterations: int = MAX_ITERATIONS

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"online sampling needs m >= 2, got {self.m}")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if self.n_iterations > self.max_iterations:
            raise ValueError(f"n_iterations {self.n_iterations} exceeds the cap of {self.max_iterations}")
        if self.n_iterations > DEFAULT_ITERATIONS:
            log.warning("n_iterations=%d: gains beyond %d rounds are usually small and reward hacking gets likelier",
                        self.n_iterations, DEFAULT_ITERATIONS)
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError("beta must be a positive finite number")


def pick_pair(cands: Sequence[RewardedCandidate]) -> tuple[RewardedCandidate, RewardedCandidate] | str:
    """Best vs worst by reward, lowest pool index on ties. Returns a skip reason when no pair exists."""
    if len(cands) < 2:
        return "fewer than 2 candidates"
    ordered = sorted(cands, key=lambda c: c.pool_index)
    chosen = min(ordered, key=lambda c: -c.reward)
    rejected = min(ordered, key=lambda c: c.reward)
    if chosen.reward == rejected.reward:
        return "all rewards equal"
    if chosen.completion == rejected.completion:
        return "chosen and rejected texts identical"
    return chosen, rejected


def _make_pair(prompt: Prompt, picked, stage: str, iteration: int) -> PreferencePair:
    chosen, rejected = picked
    return PreferencePair(prompt.id, prompt.language, prompt.text, chosen.completion, rejected.completion,
                          chosen.reward, rejected.reward, stage, iteration)


def offline_pairs(groups: Mapping[str, Sequence[RewardedCandidate]],
                  prompts: Mapping[str, Prompt]) -> tuple[list[PreferencePair], list[dict]]:
    """One pair per prompt from the arbitrage candidate log; degenerate prompts go to the skip log."""
    if not groups:
        raise ValueError("candidate log is empty")
    pairs, skips = [], []
    for pid in sorted(groups):
        picked = pick_pair(groups[pid])
        if isinstance(picked, str):
            skips.append({"prompt_id": pid, "reason": picked})
            continue
        pairs.append(_make_pair(prompts[pid], picked, "offline", 0))
    return pairs, skips


def sample_online(policy: GeneratorEndpoint, prompt: Prompt, m: int, transport: Transport, seed: int = 0) -> list[str]:
    """m completions, one per distinct sampling seed seed, seed+1, ..."""
    if m < 2:
        raise ValueError(f"online sampling needs m >= 2, got {m}")
    return [policy.generate(transport, prompt.text, seed=(seed + j) % 2**63) for j in range(m)]


@dataclass
class RoundResult:
    iteration: int
    pairs: list[PreferencePair] = field(default_factory=list)
    skips: list[dict] = field(default_factory=list)

    @property
    def stats(self) -> dict:
        n = len(self.pairs)
        return {
            "iteration": self.iteration,
            "pairs": n,
            "skipped": len(self.skips),
            "mean_chosen_reward": sum(p.chosen_reward for p in self.pairs) / n if n else None,
            "mean_rejected_reward": sum(p.rejected_reward for p in self.pairs) / n if n else None,
        }


def _prompt_seed(seed: int, iteration: int, prompt_id: str) -> int:
    h = hashlib.sha256(f"{seed}:{iteration}:{prompt_id}".encode()).digest()
    return int.from_bytes(h[:7], "little")


def online_round(policy: GeneratorEndpoint, rm: RewardEndpoint, prompts: Sequence[Prompt], cfg: OnlineRoundConfig,
                 iteration: int, transport: Transport, seed: int = 0, max_inflight: int = 4) -> RoundResult:
    if not 1 <= iteration <= cfg.n_iterations:
        raise ValueError(f"iteration must be in [1, {cfg.n_iterations}], got {iteration}")

    def one(prompt: Prompt):
        try:
            samples = sample_online(policy, prompt, cfg.m, transport, _prompt_seed(seed, iteration, prompt.id))
            order = [f"sample{j}" for j in range(cfg.m)]
            scored = score_candidates(prompt, list(zip(order, samples)), rm, transport, order)
        except (EndpointError, ScoringError) as e:
            return {"prompt_id": prompt.id, "reason": str(e)}
        picked = pick_pair(scored)
        if isinstance(picked, str):
            return {"prompt_id": prompt.id, "reason": picked}
        return _make_pair(prompt, picked, "online", iteration)

    with ThreadPoolExecutor(max_workers=max(1, max_inflight)) as ex:
        results = list(ex.map(one, prompts))
    res = RoundResult(iteration)
    for r in results:
        (res.skips if isinstance(r, dict) else res.pairs).append(r)
    res.pairs.sort(key=lambda p: p.prompt_id)
    res.skips.sort(key=lambda s: s["prompt_id"])
    if prompts and not res.pairs:
        log.warning("online round %d produced no pairs (%d skipped)", iteration, len(res.skips))
    return res
