"""Reward-based routing over a pool of generator endpoints."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .endpoints import EndpointError, Transport, require_field
from .languages import SUPPORTED_LANGUAGES
from .records import read_jsonl, write_jsonl

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prompt:
    id: str
    language: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("prompt id must be non-empty")
        if not self.text:
            raise ValueError(f"prompt {self.id!r}: text must be non-empty")

    def check_language(self, allowed: Sequence[str] = SUPPORTED_LANGUAGES) -> "Prompt":
        if self.language not in allowed:
            raise ValueError(f"prompt {self.id!r}: language {self.language!r} not in the configured language set")
        return self

    def to_dict(self) -> dict:
        return {"id": self.id, "language": self.language, "text": self.text}


def load_prompts(path, allowed: Sequence[str] = SUPPORTED_LANGUAGES) -> list[Prompt]:
    prompts = [Prompt(r["id"], r["language"], r["text"]).check_language(allowed) for r in read_jsonl(path)]
    ids = [p.id for p in prompts]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ValueError(f"duplicate prompt ids in {path}: {', '.join(dup)}")
    return prompts


@dataclass(frozen=True)
class GeneratorEndpoint:
    model_id: str
    url: str
    temperature: float = 0.7
    max_tokens: int = 512

    def __post_init__(self):
        if not (self.temperature >= 0):
            raise ValueError(f"{self.model_id}: temperature must be >= 0")
        if int(self.max_tokens) <= 0:
            raise ValueError(f"{self.model_id}: max_tokens must be positive")

    def generate(self, transport: Transport, prompt: str, seed: int | None = None) -> str:
        payload = {"prompt": prompt, "temperature": self.temperature, "max_tokens": int(self.max_tokens)}
        if seed is not None:
            payload["seed"] = int(seed)
        text = require_field(transport.post(self.url, "/generate", payload), "completion", str, self.url)
        if not text:
            raise EndpointError(f"{self.model_id} returned an empty completion", self.url, retryable=False)
        return text


@dataclass(frozen=True)
class RewardEndpoint:
    url: str

    def score(self, transport: Transport, prompt: str, completion: str) -> float:
        body = transport.post(self.url, "/score", {"prompt": prompt, "completion": completion})
        return require_field(body, "reward", float, self.url)


@dataclass(frozen=True)
class RewardedCandidate:
    prompt_id: str
    model_id: str
    completion: str
    reward: float
    pool_index: int = 0

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError(f"candidate {self.prompt_id}/{self.model_id}: reward {self.reward} is not finite")


@dataclass(frozen=True)
class ChatTemplate:
    user_open: str = "<|START_OF_TURN_TOKEN|><|USER_TOKEN|>"
    user_close: str = "<|END_OF_TURN_TOKEN|>"
    chatbot_open: str = "<|START_OF_TURN_TOKEN|><|CHATBOT_TOKEN|>"
    chatbot_close: str = "<|END_OF_TURN_TOKEN|>"
    turn_separator: str = "\n"

    def __post_init__(self):
        for name in ("user_open", "user_close", "chatbot_open", "chatbot_close", "turn_separator"):
            if not getattr(self, name):
                raise ValueError(f"chat template field {name} must be non-empty")

    def tokens(self) -> tuple[str, ...]:
        return self.user_open, self.user_close, self.chatbot_open, self.chatbot_close


def format_chat(prompt: Prompt | str, completion: str, tpl: ChatTemplate = ChatTemplate()) -> str:
    """Render one user/chatbot exchange.

    Texts containing a template token are rejected: they would make the
    rendering ambiguous.
    """
    text = prompt.text if isinstance(prompt, Prompt) else prompt
    for part, label in ((text, "prompt"), (completion, "completion")):
        for tok in tpl.tokens():
            if tok in part:
                raise ValueError(f"{label} contains template token {tok!r}")
    return tpl.user_open + text + tpl.user_close + tpl.turn_separator + tpl.chatbot_open + completion + tpl.chatbot_close


class GenerationError(RuntimeError):
    """Some pool members failed; ``candidates`` holds the ones that succeeded."""

    def __init__(self, prompt_id: str, failed: dict[str, str], candidates: list[tuple[str, str]]):
        self.prompt_id = prompt_id
        self.failed = failed
        self.candidates = candidates
        super().__init__(f"prompt {prompt_id!r}: generation failed for {', '.join(failed)}")


def generate_candidates(prompt: Prompt, pool: Sequence[GeneratorEndpoint], transport: Transport) -> list[tuple[str, str]]:
    if not pool:
        raise ValueError("generator pool is empty")
    ids = [g.model_id for g in pool]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate model_id in pool: {ids}")
    out, failed = [], {}
    for gen in pool:
        try:
            out.append((gen.model_id, gen.generate(transport, prompt.text)))
        except EndpointError as e:
            failed[gen.model_id] = str(e)
    if failed:
        raise GenerationError(prompt.id, failed, out)
    return out


class ScoringError(RuntimeError):
    pass


def score_candidates(prompt: Prompt, cands: Sequence[tuple[str, str]], rm: RewardEndpoint, transport: Transport,
                     pool_order: Sequence[str] | None = None) -> list[RewardedCandidate]:
    if not cands:
        raise ValueError("no candidates to score")
    order = list(pool_order) if pool_order is not None else [m for m, _ in cands]
    scored = []
    for model_id, completion in cands:
        reward = rm.score(transport, prompt.text, completion)
        if not math.isfinite(reward):
            raise ScoringError(f"prompt {prompt.id!r}, model {model_id!r}: non-finite reward {reward}")
        scored.append(RewardedCandidate(prompt.id, model_id, completion, reward, order.index(model_id)))
    return scored


def route(cands: Sequence[RewardedCandidate]) -> RewardedCandidate:
    """Highest reward wins; ties go to the lowest pool index."""
    if not cands:
        raise ValueError("cannot route an empty candidate list")
    if len({c.prompt_id for c in cands}) != 1:
        raise ValueError(f"mixed prompt ids: {sorted({c.prompt_id for c in cands})}")
    return min(cands, key=lambda c: (-c.reward, c.pool_index))


def candidate_row(prompt: Prompt, cand: RewardedCandidate, tpl: ChatTemplate) -> dict:
    return {
        "prompt_id": prompt.id,
        "language": prompt.language,
        "text": prompt.text,
        "model_id": cand.model_id,
        "pool_index": cand.pool_index,
        "completion": cand.completion,
        "reward": cand.reward,
        "formatted": format_chat(prompt, cand.completion, tpl),
    }


@dataclass
class ArbitrageResult:
    rows: list[dict] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    partial: list[dict] = field(default_factory=list)


class ArbitrageFailed(RuntimeError):
    pass


def _process(prompt: Prompt, pool, rm, tpl, transport):
    order = [g.model_id for g in pool]
    partial = None
    try:
        cands = generate_candidates(prompt, pool, transport)
    except GenerationError as e:
        if not e.candidates:
            return None, None, {"prompt_id": prompt.id, "reason": "all generators failed", "failed": e.failed}
        cands = e.candidates
        partial = {"prompt_id": prompt.id, "failed": e.failed}
    try:
        scored = score_candidates(prompt, cands, rm, transport, order)
        routed = route(scored)
        rows = [candidate_row(prompt, c, tpl) for c in scored]
        best = candidate_row(prompt, routed, tpl)
    except (EndpointError, ScoringError, ValueError) as e:
        return None, None, {"prompt_id": prompt.id, "reason": str(e)}
    return best, (rows, partial), None


def build_arbitrage_dataset(
    prompts: Sequence[Prompt],
    pool: Sequence[GeneratorEndpoint],
    rm: RewardEndpoint,
    tpl: ChatTemplate,
    transport: Transport,
    out_dir: str | Path | None = None,
    max_inflight: int = 4,
) -> ArbitrageResult:
    """Route every prompt through the pool; persist dataset, candidate log and skip list.

    Outputs are sorted by (prompt_id, pool_index), so scheduling never changes them.
    """
    if not pool:
        raise ValueError("generator pool is empty")
    with ThreadPoolExecutor(max_workers=max(1, max_inflight)) as ex:
        results = list(ex.map(lambda p: _process(p, pool, rm, tpl, transport), prompts))
    res = ArbitrageResult()
    for best, extra, skip in results:
        if skip is not None:
            res.skipped.append(skip)
            continue
        res.rows.append(best)
        rows, partial = extra
        res.log.extend(rows)
        if partial:
            res.partial.append(partial)
    res.rows.sort(key=lambda r: r["prompt_id"])
    res.log.sort(key=lambda r: (r["prompt_id"], r["pool_index"]))
    res.skipped.sort(key=lambda r: r["prompt_id"])
    res.partial.sort(key=lambda r: r["prompt_id"])
    for s in res.skipped:
        log.warning("skipped prompt %s: %s", s["prompt_id"], s["reason"])
    if prompts and not res.rows:
        raise ArbitrageFailed(f"every prompt failed ({len(res.skipped)} skipped)")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "dataset.jsonl", res.rows)
        write_jsonl(out / "candidates.jsonl", res.log)
        write_jsonl(out / "skipped.jsonl", res.skipped)
        write_jsonl(out / "partial.jsonl", res.partial)
    return res


def read_candidate_log(path) -> tuple[dict[str, Prompt], dict[str, list[RewardedCandidate]]]:
    """Group a candidate log by prompt, keeping pool order."""
    prompts: dict[str, Prompt] = {}
    groups: dict[str, list[RewardedCandidate]] = {}
    for r in read_jsonl(path):
        prompts.setdefault(r["prompt_id"], Prompt(r["prompt_id"], r["language"], r["text"]))
        groups.setdefault(r["prompt_id"], []).append(
            RewardedCandidate(r["prompt_id"], r["model_id"], r["completion"], float(r["reward"]), int(r["pool_index"]))
        )
    for g in groups.values():
        g.sort(key=lambda c: c.pool_index)
    return prompts, groups


def cluster_prompts(prompts: Iterable[Prompt], languages: Iterable[str]) -> list[Prompt]:
    keep = set(languages)
    return [p for p in prompts if p.language in keep]
