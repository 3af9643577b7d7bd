"""Pairwise LLM-judge evaluation: debiased verdicts, win-rate tables, judge sensitivity,
and multilingual evaluation-set construction."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .arbitrage import Prompt
from .chrf import chrf_pp, mean_sentence_chrf  # noqa: F401  (re-exported)
from .endpoints import EndpointError, Transport, require_field
from .languages import SUPPORTED_LANGUAGES

log = logging.getLogger(__name__)

PLACEHOLDERS = ("{instruction}", "{response_a}", "{response_b}")
WINNERS = ("A", "B", "tie")

DEFAULT_TEMPLATE = """You are comparing two assistant responses to the same user instruction.
Judge which response is more helpful, accurate and fluent in the language of the instruction.

[Instruction]
{instruction}
[End of Instruction]

[Response A]
{response_a}
[End of Response A]

[Response B]
{response_b}
[End of Response B]

Explain briefly, then give your verdict alone on the final line: A, B, or TIE."""

REPROMPT_SUFFIX = "\n\nYour last line must be exactly one of: A, B, TIE."


class JudgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class JudgeConfig:
    url: str
    prompt_template: str = DEFAULT_TEMPLATE
    both_orders: bool = True

    def __post_init__(self):
        for ph in PLACEHOLDERS:
            n = self.prompt_template.count(ph)
            if n != 1:
                raise ValueError(f"judge template must contain {ph} exactly once (found {n})")

    def render(self, instruction: str, response_a: str, response_b: str) -> str:
        # Single pass so placeholder-like text inside responses is left alone.
        out, rest = [], self.prompt_template
        values = {"{instruction}": instruction, "{response_a}": response_a, "{response_b}": response_b}
        while True:
            hits = [(rest.find(ph), ph) for ph in values if ph in rest]
            if not hits:
                out.append(rest)
                return "".join(out)
            pos, ph = min(hits)
            out.append(rest[:pos] + values[ph])
            rest = rest[pos + len(ph):]


@dataclass(frozen=True)
class Verdict:
    prompt_id: str
    language: str
    winner: str
    order_flipped_agreement: bool

    def __post_init__(self):
        if self.winner not in WINNERS:
            raise ValueError(f"winner must be one of {WINNERS}, got {self.winner!r}")
        if not self.order_flipped_agreement and self.winner != "tie":
            raise ValueError("a verdict whose presentation orders disagree must be a tie")

    def to_dict(self) -> dict:
        return {"prompt_id": self.prompt_id, "language": self.language, "winner": self.winner,
                "order_flipped_agreement": self.order_flipped_agreement}


def parse_verdict(text: str) -> str | None:
    """Read the constrained final line: 'A', 'B' or 'TIE' (case-insensitive)."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        return None
    last = lines[-1].strip(" .*[]\"'`").upper()
    return {"A": "A", "B": "B", "TIE": "tie"}.get(last)


def _ask(cfg: JudgeConfig, transport: Transport, prompt: str) -> str:
    for attempt in range(2):
        body = transport.post(cfg.url, "/judge", {"prompt": prompt if attempt == 0 else prompt + REPROMPT_SUFFIX})
        verdict = parse_verdict(require_field(body, "text", str, cfg.url))
        if verdict is not None:
            return verdict
    raise JudgeError(f"judge output unparseable after reprompt: {body.get('text', '')[-80:]!r}")


def judge_pair(prompt: Prompt, completion_a: str, completion_b: str, cfg: JudgeConfig, transport: Transport) -> Verdict:
    """Query the judge (in both presentation orders by default); disagreement is a tie."""
    if not completion_a or not completion_b:
        raise ValueError(f"prompt {prompt.id!r}: completions must be non-empty")
    first = _ask(cfg, transport, cfg.render(prompt.text, completion_a, completion_b))
    if not cfg.both_orders:
        return Verdict(prompt.id, prompt.language, first, True)
    swapped = _ask(cfg, transport, cfg.render(prompt.text, completion_b, completion_a))
    second = {"A": "B", "B": "A", "tie": "tie"}[swapped]
    if first == second:
        return Verdict(prompt.id, prompt.language, first, True)
    return Verdict(prompt.id, prompt.language, "tie", False)


@dataclass
class WinRateTable:
    """Per-language win/loss/tie counts of model A against model B.

    Ties count half, so table(A, B) and table(B, A) sum to exactly 1.
    """

    model_a: str
    model_b: str
    counts: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    def __post_init__(self):
        self.counts = {lang: tuple(int(x) for x in c) for lang, c in sorted(self.counts.items())}
        for lang, c in self.counts.items():
            if len(c) != 3 or min(c) < 0 or sum(c) == 0:
                raise ValueError(f"language {lang!r}: counts must be three non-negative integers, not all zero")

    @classmethod
    def from_verdicts(cls, verdicts: Sequence[Verdict], model_a: str = "A", model_b: str = "B") -> "WinRateTable":
        tallies: dict[str, list[int]] = {}
        for v in verdicts:
            t = tallies.setdefault(v.language, [0, 0, 0])
            t[WINNERS.index(v.winner)] += 1
        return cls(model_a, model_b, {k: tuple(v) for k, v in tallies.items()})

    @property
    def languages(self) -> list[str]:
        return list(self.counts)

    def exact_win_rate(self, lang: str) -> Fraction:
        w, l, t = self.counts[lang]
        return Fraction(2 * w + t, 2 * (w + l + t))

    def exact_macro_average(self) -> Fraction:
        if not self.counts:
            raise ValueError("empty win-rate table")
        return sum((self.exact_win_rate(k) for k in self.counts), Fraction(0)) / len(self.counts)

    def win_rate(self, lang: str) -> float:
        return float(self.exact_win_rate(lang))

    @property
    def win_rates(self) -> dict[str, float]:
        return {k: self.win_rate(k) for k in self.counts}

    @property
    def macro_average(self) -> float:
        return float(self.exact_macro_average())

    def swapped(self) -> "WinRateTable":
        return WinRateTable(self.model_b, self.model_a, {k: (l, w, t) for k, (w, l, t) in self.counts.items()})

    def to_dict(self) -> dict:
        return {
            "model_a": self.model_a,
            "model_b": self.model_b,
            "languages": {
                k: {"wins": w, "losses": l, "ties": t, "win_rate": self.win_rate(k)}
                for k, (w, l, t) in self.counts.items()
            },
            "macro_average": self.macro_average,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "WinRateTable":
        counts = {k: (v["wins"], v["losses"], v["ties"]) for k, v in d["languages"].items()}
        return cls(d["model_a"], d["model_b"], counts)

    def plot_rows(self) -> list[dict]:
        """Win/loss/tie percentages per language, ready for a stacked bar chart."""
        rows = []
        for k, (w, l, t) in self.counts.items():
            n = w + l + t
            rows.append({"language": k, "win": 100 * w / n, "loss": 100 * l / n, "tie": 100 * t / n})
        return rows


class MissingCompletions(ValueError):
    def __init__(self, missing: Mapping[str, list[str]]):
        self.missing = dict(missing)
        parts = [f"{side}: {', '.join(ids)}" for side, ids in self.missing.items() if ids]
        super().__init__("missing completions for prompt ids (" + "; ".join(parts) + ")")


def run_match(prompts: Sequence[Prompt], completions_a: Mapping[str, str], completions_b: Mapping[str, str],
              cfg: JudgeConfig, transport: Transport, model_a: str = "A", model_b: str = "B",
              max_inflight: int = 4) -> tuple[WinRateTable, list[Verdict]]:
    """Judge every prompt; verdicts come back sorted by (language, prompt_id)."""
    ids = [p.id for p in prompts]
    missing = {"A": sorted(set(ids) - set(completions_a)), "B": sorted(set(ids) - set(completions_b))}
    if missing["A"] or missing["B"]:
        raise MissingCompletions(missing)
    with ThreadPoolExecutor(max_workers=max(1, max_inflight)) as ex:
        verdicts = list(ex.map(lambda p: judge_pair(p, completions_a[p.id], completions_b[p.id], cfg, transport), prompts))
    verdicts.sort(key=lambda v: (v.language, v.prompt_id))
    return WinRateTable.from_verdicts(verdicts, model_a, model_b), verdicts


@dataclass(frozen=True)
class SensitivityReport:
    deltas: dict[str, float]
    max_abs_delta: float
    mean_abs_delta: float
    macro_delta: float

    def to_dict(self) -> dict:
        return {"deltas": dict(self.deltas), "max_abs_delta": self.max_abs_delta,
                "mean_abs_delta": self.mean_abs_delta, "macro_delta": self.macro_delta}


def judge_sensitivity(table_judge1: WinRateTable, table_judge2: WinRateTable) -> SensitivityReport:
    """Per-language win-rate shift (judge2 - judge1) for the same model pair."""
    t1, t2 = table_judge1, table_judge2
    if (t1.model_a, t1.model_b) != (t2.model_a, t2.model_b):
        raise ValueError(f"tables compare different model pairs: {t1.model_a} vs {t1.model_b} / {t2.model_a} vs {t2.model_b}")
    if set(t1.counts) != set(t2.counts):
        raise ValueError(f"language sets differ: {sorted(set(t1.counts) ^ set(t2.counts))}")
    exact = {k: t2.exact_win_rate(k) - t1.exact_win_rate(k) for k in t1.counts}
    abs_vals = [abs(v) for v in exact.values()]
    return SensitivityReport(
        deltas={k: float(v) for k, v in exact.items()},
        max_abs_delta=float(max(abs_vals)),
        mean_abs_delta=float(sum(abs_vals) / len(abs_vals)),
        macro_delta=float(t2.exact_macro_average() - t1.exact_macro_average()),
    )


def build_eval_set(english_prompts: Sequence[Prompt], mt_url: str, languages: Sequence[str], transport: Transport,
                   max_inflight: int = 4) -> list[Prompt]:
    """Translate each English prompt into every requested language.

    English rows pass through untouched; translated ids get a ``-<lang>`` suffix.
    """
    if not english_prompts:
        raise ValueError("no prompts to translate")
    bad = [lang for lang in languages if lang not in SUPPORTED_LANGUAGES]
    if bad:
        raise ValueError(f"unsupported languages: {', '.join(bad)}")
    ids = [p.id for p in english_prompts]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise ValueError(f"duplicate prompt ids: {', '.join(dup)}")

    def translate(job):
        p, lang = job
        if lang == p.language:
            return p
        body = transport.post(mt_url, "/translate", {"text": p.text, "source_lang": p.language, "target_lang": lang})
        text = require_field(body, "text", str, mt_url)
        if not text.strip():
            raise EndpointError(f"empty translation of {p.id!r} into {lang}", mt_url, retryable=False)
        return Prompt(f"{p.id}-{lang}", lang, text)

    jobs = [(p, lang) for lang in languages for p in english_prompts]
    with ThreadPoolExecutor(max_workers=max(1, max_inflight)) as ex:
        return list(ex.map(translate, jobs))
