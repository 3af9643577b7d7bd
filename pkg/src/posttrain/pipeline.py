"""Stage execution with a hash ledger for reproducibility and resume."""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import arbitrage as arb
from . import dpo, judge, merge, prefs
from .config import EndpointSpec, PipelineConfig, StageSpec
from .endpoints import (HttpTransport, MockTransport, Transport, build_mock, length_judge, length_reward,
                        mock_generator, mock_translator)
from .records import dumps, read_json, sha256_file, write_json, write_jsonl
from .tensorstore import Checkpoint, DType, Tensor, read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

LEDGER_NAME = "ledger.json"
TIMINGS_NAME = "timings.json"  # wall-clock data lives beside the ledger so the ledger bytes stay reproducible


class PipelineError(RuntimeError):
    def __init__(self, message: str, stage: str | None = None):
        self.stage = stage
        super().__init__(f"stage {stage!r}: {message}" if stage else message)


def derive_seed(global_seed: int, name: str, index: int) -> int:
    h = hashlib.sha256(f"{global_seed}:{index}:{name}".encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class LedgerEntry:
    index: int
    name: str
    type: str
    seed: int
    input_hash: str
    inputs: dict[str, str]
    outputs: dict[str, str]

    def to_dict(self) -> dict:
        return {"index": self.index, "name": self.name, "type": self.type, "seed": self.seed,
                "input_hash": self.input_hash, "inputs": dict(self.inputs), "outputs": dict(self.outputs)}


@dataclass
class RunLedger:
    entries: list[LedgerEntry] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stages": [e.to_dict() for e in self.entries],
            "fingerprint": self.fingerprint(),
            "last_invocation": {"executed": list(self.executed), "skipped": list(self.skipped)},
        }

    def fingerprint(self) -> str:
        """Digest over stage records only; timings and invocation bookkeeping are excluded."""
        return hashlib.sha256(dumps([e.to_dict() for e in self.entries]).encode()).hexdigest()

    def entry(self, name: str) -> LedgerEntry | None:
        return next((e for e in self.entries if e.name == name), None)

    @classmethod
    def load(cls, path: Path) -> "RunLedger":
        d = read_json(path)
        tpath = Path(path).with_name(TIMINGS_NAME)
        timings = read_json(tpath) if tpath.exists() else {}
        return cls([LedgerEntry(**e) for e in d["stages"]], dict(timings))

    def save(self, path: Path) -> None:
        write_json(path, self.to_dict())
        write_json(Path(path).with_name(TIMINGS_NAME), {k: round(v, 6) for k, v in self.timings.items()})


def check_stage_order(ledger: RunLedger) -> None:
    """Offline preferences must precede every online round."""
    seen_offline = False
    for e in ledger.entries:
        if e.type == "prefs_offline":
            seen_offline = True
        elif e.type == "prefs_online" and not seen_offline:
            raise PipelineError("online preference stage ran before offline preferences", e.name)


def build_transport(cfg: PipelineConfig, mock: bool) -> Transport:
    if not mock:
        return HttpTransport()
    t = MockTransport()
    defaults: dict[str, Callable[[EndpointSpec], Callable]] = {
        "reward": lambda e: length_reward(),
        "judge": lambda e: length_judge(),
        "translate": lambda e: mock_translator(),
        "policy": lambda e: mock_generator(e.model_id),
        "baseline": lambda e: mock_generator(e.model_id),
    }
    for g in cfg.generators:
        t.register(g.url, build_mock(g.mock) if g.mock else mock_generator(g.model_id))
    for role, e in cfg.endpoints.items():
        t.register(e.url, build_mock(e.mock) if e.mock else defaults[role](e))
    return t


def _generator(spec: EndpointSpec) -> arb.GeneratorEndpoint:
    return arb.GeneratorEndpoint(spec.model_id, spec.url, spec.temperature, spec.max_tokens)


class StageContext:
    def __init__(self, cfg: PipelineConfig, out_dir: Path, transport: Transport, max_inflight: int):
        self.cfg = cfg
        self.out_dir = out_dir
        self.transport = transport
        self.max_inflight = max_inflight
        self.stage_outputs: dict[str, dict[str, Path]] = {}

    def stage_dir(self, index: int, stage: StageSpec) -> Path:
        return self.out_dir / f"{index:02d}-{stage.name}"

    def rel(self, p: Path) -> str:
        p = Path(p)
        try:
            return p.resolve().relative_to(self.out_dir.resolve()).as_posix()
        except ValueError:
            return "ext:" + Path(os.path.relpath(p.resolve(), self.cfg.base_dir.resolve())).as_posix()

    def latest(self, types: tuple[str, ...], before: int, key: str) -> Path:
        for st in reversed(self.cfg.stages[:before]):
            if st.type in types:
                return self.stage_outputs[st.name][key]
        raise PipelineError(f"no earlier {'/'.join(types)} stage")

    def named(self, name: str, key: str) -> Path:
        return self.stage_outputs[name][key]

    def arbitrage_prompts(self, before: int) -> Path:
        for st in reversed(self.cfg.stages[:before]):
            if st.type == "arbitrage":
                return self.cfg.resolve_path(st.params["prompts"])
        raise PipelineError("no earlier arbitrage stage")

    def checkpoint_ref(self, ref: str) -> Path:
        if ref.startswith("stage:"):
            return self.stage_outputs[ref[6:]]["checkpoint"]
        return self.cfg.resolve_path(self.cfg.checkpoints[ref])


# Each planner returns (input files, params used for hashing, runner producing {key: path}).

def _plan_arbitrage(ctx: StageContext, i: int, st: StageSpec):
    prompts_path = ctx.cfg.resolve_path(st.params["prompts"])
    used = {"generators": [g.to_dict() for g in ctx.cfg.generators], "reward": ctx.cfg.endpoints["reward"].to_dict()}

    def run(out: Path):
        prompts = arb.load_prompts(prompts_path, ctx.cfg.languages)
        if "cluster" in st.params:
            prompts = arb.cluster_prompts(prompts, ctx.cfg.clusters.get(st.params["cluster"]).languages)
        arb.build_arbitrage_dataset(
            prompts, [_generator(g) for g in ctx.cfg.generators], arb.RewardEndpoint(ctx.cfg.endpoints["reward"].url),
            ctx.cfg.chat_template, ctx.transport, out, ctx.max_inflight)
        return {k: out / f"{k}.jsonl" for k in ("dataset", "candidates", "skipped", "partial")}

    return [prompts_path], used, run


def _plan_merge(ctx: StageContext, i: int, st: StageSpec, seed: int):
    rd = dict(st.params["recipe"])
    if rd["method"] == "dare_ties" and "seed" not in st.params["recipe"]:
        rd["seed"] = seed
    recipe = merge.MergeRecipe.from_dict(rd)
    inputs = [ctx.checkpoint_ref(r) for r in recipe.refs()]

    def run(out: Path):
        merged = merge.apply_recipe(recipe, lambda r: read_checkpoint(ctx.checkpoint_ref(r)))
        merged = merged.with_provenance(stage=st.name, recipe=dumps(recipe.to_dict()))
        path = out / "merged.ckpt"
        write_checkpoint(merged, path)
        return {"checkpoint": path}

    return inputs, {"recipe": recipe.to_dict()}, run


def _plan_prefs_offline(ctx: StageContext, i: int, st: StageSpec):
    log_path = ctx.named(st.params["from"], "candidates") if "from" in st.params else ctx.latest(("arbitrage",), i, "candidates")

    def run(out: Path):
        prompts, groups = arb.read_candidate_log(log_path)
        pairs, skips = prefs.offline_pairs(groups, prompts)
        write_jsonl(out / "pairs.jsonl", (p.to_dict() for p in pairs))
        write_jsonl(out / "skipped.jsonl", skips)
        return {"pairs": out / "pairs.jsonl", "skipped": out / "skipped.jsonl"}

    return [log_path], {}, run


def _plan_prefs_online(ctx: StageContext, i: int, st: StageSpec, seed: int):
    p = st.params
    prompts_path = ctx.cfg.resolve_path(p["prompts"]) if "prompts" in p else ctx.arbitrage_prompts(i)
    policy, rm = ctx.cfg.endpoints["policy"], ctx.cfg.endpoints["reward"]
    used = {"policy": policy.to_dict(), "reward": rm.to_dict()}

    def run(out: Path):
        rcfg = prefs.OnlineRoundConfig(p["m"], p["n_iterations"], p["beta"], p["max_iterations"])
        prompts = arb.load_prompts(prompts_path, ctx.cfg.languages)
        res = prefs.online_round(_generator(policy), arb.RewardEndpoint(rm.url), prompts, rcfg, p["iteration"],
                                 ctx.transport, seed, ctx.max_inflight)
        write_jsonl(out / "pairs.jsonl", (x.to_dict() for x in res.pairs))
        write_jsonl(out / "skipped.jsonl", res.skips)
        write_json(out / "stats.json", res.stats)
        return {"pairs": out / "pairs.jsonl", "skipped": out / "skipped.jsonl", "stats": out / "stats.json"}

    return [prompts_path], used, run


def policy_checkpoint(policy: dpo.TabularPolicy, **provenance: str) -> Checkpoint:
    return Checkpoint({"logits": Tensor.from_array(policy.logits, DType.F32)}, provenance)


def _plan_dpo(ctx: StageContext, i: int, st: StageSpec):
    p = st.params
    pairs_path = ctx.named(p["from"], "pairs") if "from" in p else ctx.latest(("prefs_offline", "prefs_online"), i, "pairs")

    def run(out: Path):
        pairs = prefs.read_pairs(pairs_path)
        idx, mapping = dpo.index_pairs(pairs)
        cfg = dpo.DPOConfig(p["beta"], p["learning_rate"], p["steps"])
        init = dpo.TabularPolicy(np.zeros((len(mapping["prompts"]), max(mapping["n_candidates"], 1))))
        trained, trace = dpo.train_dpo(init, idx, cfg)
        margins = dpo.implicit_margins(trained, init, idx, cfg.beta) if idx else np.zeros(0)
        write_checkpoint(policy_checkpoint(trained, stage=st.name), out / "policy.ckpt")
        write_json(out / "mapping.json", mapping)
        write_json(out / "trace.json", {
            "beta": cfg.beta, "learning_rate": cfg.learning_rate, "steps": cfg.steps,
            "initial_loss": dpo.mean_loss(init, init, idx, cfg.beta) if idx else None,
            "loss": [round(x, 12) for x in trace],
            "final_margins": [round(float(m), 12) for m in margins],
        })
        return {"checkpoint": out / "policy.ckpt", "mapping": out / "mapping.json", "trace": out / "trace.json"}

    return [pairs_path], {}, run


def _plan_eval(ctx: StageContext, i: int, st: StageSpec):
    p = st.params
    prompts_path = ctx.cfg.resolve_path(p["prompts"])
    eps = ctx.cfg.endpoints
    gens = {g.model_id: g for g in ctx.cfg.generators}

    def endpoint(ref: str) -> EndpointSpec:
        return eps[ref] if ref in eps else gens[ref]

    used = {"candidate": endpoint(p["candidate"]).to_dict(), "baseline": endpoint(p["baseline"]).to_dict(),
            "judge": eps["judge"].to_dict(), "translate": eps["translate"].to_dict() if "translate" in eps else None}

    def run(out: Path):
        english = [q for q in arb.load_prompts(prompts_path, ctx.cfg.languages)]
        langs = list(p["languages"])
        if langs == ["en"]:
            eval_set = [q for q in english if q.language == "en"]
        else:
            eval_set = judge.build_eval_set(english, eps["translate"].url, langs, ctx.transport, ctx.max_inflight)
        write_jsonl(out / "eval_prompts.jsonl", (q.to_dict() for q in eval_set))
        cand, base = _generator(endpoint(p["candidate"])), _generator(endpoint(p["baseline"]))
        comps_a = {q.id: cand.generate(ctx.transport, q.text) for q in eval_set}
        comps_b = {q.id: base.generate(ctx.transport, q.text) for q in eval_set}
        jcfg = judge.JudgeConfig(eps["judge"].url, p.get("judge_template") or judge.DEFAULT_TEMPLATE, p["both_orders"])
        table, verdicts = judge.run_match(eval_set, comps_a, comps_b, jcfg, ctx.transport, cand.model_id, base.model_id,
                                          ctx.max_inflight)
        write_jsonl(out / "verdicts.jsonl", (v.to_dict() for v in verdicts))
        write_json(out / "winrate.json", table.to_dict())
        write_jsonl(out / "winrate_plot.jsonl", table.plot_rows())
        return {k: out / f for k, f in (("eval_prompts", "eval_prompts.jsonl"), ("verdicts", "verdicts.jsonl"),
                                        ("winrate", "winrate.json"), ("plot", "winrate_plot.jsonl"))}

    return [prompts_path], used, run


def plan_stage(ctx: StageContext, i: int, st: StageSpec, seed: int):
    if st.type == "arbitrage":
        return _plan_arbitrage(ctx, i, st)
    if st.type == "merge":
        return _plan_merge(ctx, i, st, seed)
    if st.type == "prefs_offline":
        return _plan_prefs_offline(ctx, i, st)
    if st.type == "prefs_online":
        return _plan_prefs_online(ctx, i, st, seed)
    if st.type == "dpo":
        return _plan_dpo(ctx, i, st)
    if st.type == "eval":
        return _plan_eval(ctx, i, st)
    raise PipelineError(f"unknown stage type {st.type!r}", st.name)


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path, resume: bool = False, transport: Transport | None = None,
                 mock: bool = False, max_inflight: int | None = None, only: set[str] | None = None) -> RunLedger:
    """Execute stages in order, hashing every input and output into ``out_dir/ledger.json``.

    With ``resume``, a stage is skipped when its input hash matches the previous
    ledger and its recorded outputs are still on disk unchanged. A recorded
    output that exists with a different hash is treated as corruption.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ledger_path = out_dir / LEDGER_NAME
    previous = RunLedger.load(ledger_path) if (resume or only is not None) and ledger_path.exists() else RunLedger()
    transport = transport or build_transport(cfg, mock)
    ctx = StageContext(cfg, out_dir, transport, max_inflight or cfg.max_inflight)
    ledger = RunLedger()

    for i, st in enumerate(cfg.stages):
        seed = derive_seed(cfg.seed, st.name, i)
        sdir = ctx.stage_dir(i, st)
        try:
            if only is not None and st.name not in only and previous.entry(st.name) is None:
                continue
            inputs, used, runner = plan_stage(ctx, i, st, seed)
            missing = [str(p) for p in inputs if not Path(p).exists()]
            if missing:
                raise PipelineError(f"missing input file(s): {', '.join(missing)}", st.name)
            input_hashes = {ctx.rel(p): sha256_file(p) for p in inputs}
        except PipelineError:
            ledger.save(ledger_path)
            raise
        except (KeyError, ValueError, OSError) as e:
            ledger.save(ledger_path)
            raise PipelineError(f"cannot resolve inputs: {e}", st.name) from e
        input_hash = hashlib.sha256(dumps({"stage": st.to_dict(), "seed": seed, "inputs": input_hashes,
                                           "endpoints": used}).encode()).hexdigest()

        prev = previous.entry(st.name)
        if prev is not None and prev.input_hash == input_hash and _outputs_intact(prev, out_dir, st.name):
            ledger.entries.append(prev)
            ledger.skipped.append(st.name)
            ctx.stage_outputs[st.name] = _output_paths(prev, out_dir, st)
            if st.name in previous.timings:
                ledger.timings[st.name] = previous.timings[st.name]
            continue
        if only is not None and st.name not in only:
            # a dependency whose outputs are stale: leave it out, later stages fail to resolve it
            continue

        sdir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        log.info("running stage %d %s (%s)", i, st.name, st.type)
        try:
            outputs = runner(sdir)
        except Exception as e:
            ledger.save(ledger_path)
            raise PipelineError(f"failed: {e}", st.name) from e
        ledger.timings[st.name] = time.perf_counter() - t0
        ctx.stage_outputs[st.name] = outputs
        entry = LedgerEntry(i, st.name, st.type, seed, input_hash, input_hashes,
                            {k: f"{ctx.rel(p)}#{sha256_file(p)}" for k, p in sorted(outputs.items())})
        ledger.entries.append(entry)
        ledger.executed.append(st.name)
        ledger.save(ledger_path)

    check_stage_order(ledger)
    ledger.save(ledger_path)
    return ledger


def _split(ref: str) -> tuple[str, str]:
    rel, _, digest = ref.rpartition("#")
    return rel, digest


def _output_paths(entry: LedgerEntry, out_dir: Path, st: StageSpec) -> dict[str, Path]:
    return {k: out_dir / _split(v)[0] for k, v in entry.outputs.items()}


def _outputs_intact(entry: LedgerEntry, out_dir: Path, stage: str) -> bool:
    """True if every recorded output exists with its recorded hash; raises on corruption."""
    intact = True
    for key, ref in entry.outputs.items():
        rel, digest = _split(ref)
        path = out_dir / rel
        if not path.exists():
            intact = False
            continue
        actual = sha256_file(path)
        if actual != digest:
            raise PipelineError(f"hash mismatch for {rel} (recorded {digest[:12]}, found {actual[:12]}); "
                                "the file was modified after the stage ran", stage)
    return intact
