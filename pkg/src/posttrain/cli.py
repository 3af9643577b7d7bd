"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import arbitrage as arb
from . import dpo, judge, merge, prefs
from .config import ClusterError, ConfigError, parse_config
from .endpoints import EndpointError
from .pipeline import PipelineError, build_transport, policy_checkpoint, run_pipeline
from .records import read_json, write_json, write_jsonl
from .tensorstore import CheckpointError, IncompatibleCheckpoints, read_checkpoint, validate_compatible, write_checkpoint

log = logging.getLogger("posttrain")

VALIDATION_ERRORS = (ConfigError, ClusterError, CheckpointError, IncompatibleCheckpoints, merge.RecipeError,
                     ValueError, KeyError, IndexError)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    p.add_argument("--out-dir", type=Path, default=None, help="directory for stage artifacts")
    p.add_argument("--max-inflight", type=int, default=None, help="concurrent requests per stage")
    p.add_argument("--mock-endpoints", action="store_true", help="serve every endpoint from deterministic in-process mocks")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_cfg(args):
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args, default: str) -> Path:
    return args.out_dir if args.out_dir is not None else Path(default)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False))


def cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    ledger = run_pipeline(cfg, _out_dir(args, "runs/pipeline"), resume=args.action == "resume", mock=args.mock_endpoints,
                          max_inflight=args.max_inflight)
    _emit({"fingerprint": ledger.fingerprint(), "executed": ledger.executed, "skipped": ledger.skipped})
    return 0


def _run_stage_type(args, stype: str, default_out: str) -> int:
    """Run every stage up to the last selected one, reusing intact earlier outputs."""
    cfg = _load_cfg(args)
    names = [s.name for s in cfg.stages if s.type == stype]
    if getattr(args, "stage", None):
        if args.stage not in names:
            raise ConfigError(f"no {stype} stage named {args.stage!r}")
        names = [args.stage]
    if not names:
        raise ConfigError(f"config has no {stype} stage")
    last = max(i for i, s in enumerate(cfg.stages) if s.name in names)
    prefix = {s.name for s in cfg.stages[: last + 1]}
    ledger = run_pipeline(cfg, _out_dir(args, default_out), resume=True, mock=args.mock_endpoints,
                          max_inflight=args.max_inflight, only=prefix)
    _emit({"executed": ledger.executed, "skipped": ledger.skipped})
    return 0


def cmd_arbitrage(args) -> int:
    return _run_stage_type(args, "arbitrage", "runs/arbitrage")


def cmd_merge(args) -> int:
    raw = yaml.safe_load(Path(args.recipe).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError("recipe file must be a mapping", source=str(args.recipe))
    base_dir = Path(args.recipe).parent
    output = args.output or raw.get("output")
    if not output:
        raise ConfigError("no output path: pass --output or set 'output' in the recipe", source=str(args.recipe))
    recipe = merge.MergeRecipe.from_dict(raw)

    def resolve(ref: str):
        p = Path(ref)
        return read_checkpoint(p if p.is_absolute() else base_dir / p)

    merged = merge.apply_recipe(recipe, resolve)
    out = Path(output) if args.output else base_dir / output
    write_checkpoint(merged, out)
    _emit({"output": str(out), "tensors": len(merged), "method": recipe.method})
    return 0


def cmd_prefs(args) -> int:
    if args.action == "offline":
        prompts, groups = arb.read_candidate_log(args.candidates)
        pairs, skips = prefs.offline_pairs(groups, prompts)
        out = _out_dir(args, "runs/prefs-offline")
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "pairs.jsonl", (p.to_dict() for p in pairs))
        write_jsonl(out / "skipped.jsonl", skips)
        _emit({"pairs": len(pairs), "skipped": len(skips), "out_dir": str(out)})
        return 0
    return _run_stage_type(args, "prefs_online", "runs/prefs-online")


def _random_instance(P: int, K: int, seed: int):
    rng = np.random.default_rng(seed)
    pairs = []
    for row in range(P):
        c, r = rng.choice(K, size=2, replace=False)
        pairs.append((row, int(c), int(r)))
    return dpo.TabularPolicy(rng.normal(size=(P, K))), pairs


def cmd_dpo(args) -> int:
    cfg = dpo.DPOConfig(args.beta, args.lr, args.steps)
    if args.pairs:
        pairs = prefs.read_pairs(args.pairs)
        idx, mapping = dpo.index_pairs(pairs)
        policy = dpo.TabularPolicy(np.zeros((len(mapping["prompts"]), max(mapping["n_candidates"], 1))))
    else:
        policy, idx = _random_instance(args.prompts, args.candidates, args.seed or 0)
        mapping = None
    if args.action == "check":
        reference = dpo.TabularPolicy(policy.logits + np.random.default_rng(1).normal(0, 0.3, policy.shape))
        err = dpo.finite_diff_check(policy, idx, cfg, args.eps, reference=reference)
        _emit({"max_relative_error": err, "eps": args.eps, "ok": err <= args.tolerance})
        return 0 if err <= args.tolerance else 2
    trained, trace = dpo.train_dpo(policy, idx, cfg)
    out = _out_dir(args, "runs/dpo")
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(policy_checkpoint(trained, stage="dpo-cli"), out / "policy.ckpt")
    write_json(out / "trace.json", {"beta": cfg.beta, "learning_rate": cfg.learning_rate, "steps": cfg.steps,
                                    "loss": trace})
    if mapping is not None:
        write_json(out / "mapping.json", mapping)
    _emit({"steps": cfg.steps, "initial_loss": dpo.mean_loss(policy, policy, idx, cfg.beta) if idx else None,
           "final_loss": trace[-1] if trace else None, "out_dir": str(out)})
    return 0


def _read_text_arg(value: str) -> list[str]:
    p = Path(value)
    if p.is_file():
        return p.read_text(encoding="utf-8").splitlines()
    return [value]


def cmd_eval(args) -> int:
    if args.action == "chrf":
        hyps, refs = _read_text_arg(args.hyp), _read_text_arg(args.ref)
        kw = dict(char_order=args.char_order, word_order=args.word_order, beta=args.beta)
        if len(hyps) != len(refs):
            raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
        scores = [judge.chrf_pp(h, r, **kw) for h, r in zip(hyps, refs)]
        _emit({"segments": len(scores), "mean": sum(scores) / len(scores), "scores": scores})
        return 0
    if args.action == "sensitivity":
        t1 = judge.WinRateTable.from_dict(read_json(args.table1))
        t2 = judge.WinRateTable.from_dict(read_json(args.table2))
        _emit(judge.judge_sensitivity(t1, t2).to_dict())
        return 0
    return _run_stage_type(args, "eval", "runs/eval")


def _describe(ckpt) -> dict:
    tensors = {}
    for m in ckpt.metas():
        values = ckpt[m.name].to_float32()
        finite = values[np.isfinite(values)]
        tensors[m.name] = {
            "dtype": m.dtype.value, "shape": list(m.shape), "offsets": list(m.byte_range),
            "min": float(finite.min()) if finite.size else None, "max": float(finite.max()) if finite.size else None,
            "nonfinite": int(values.size - finite.size),
        }
    return {"tensors": tensors, "provenance": dict(ckpt.provenance)}


def cmd_ckpt(args) -> int:
    if args.action == "inspect":
        _emit(_describe(read_checkpoint(args.path)))
        return 0
    a, b = read_checkpoint(args.path), read_checkpoint(args.other)
    validate_compatible([a, b])
    diff = {}
    for name in a.names():
        x, y = a[name].to_float32().astype(np.float64), b[name].to_float32().astype(np.float64)
        d = np.abs(x - y)
        diff[name] = {"bit_identical": a[name] == b[name], "max_abs_diff": float(d.max()) if d.size else 0.0}
    _emit({"identical": all(v["bit_identical"] for v in diff.values()), "tensors": diff})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="posttrain", description="Multilingual post-training pipeline toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", parents=[common], help="run or resume a full pipeline")
    p.add_argument("action", choices=["run", "resume"])
    p.add_argument("--config", required=True, type=Path)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("arbitrage", parents=[common], help="reward-routed data generation")
    p.add_argument("action", choices=["run"])
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--stage", help="stage name (default: every arbitrage stage)")
    p.set_defaults(func=cmd_arbitrage)

    p = sub.add_parser("merge", parents=[common], help="merge checkpoints")
    p.add_argument("action", choices=["apply"])
    p.add_argument("recipe", type=Path, help="YAML recipe; input paths are relative to it")
    p.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("prefs", parents=[common], help="preference pairs")
    p.add_argument("action", choices=["offline", "online"])
    p.add_argument("--candidates", type=Path, help="arbitrage candidate log (offline)")
    p.add_argument("--config", type=Path, help="pipeline config (online)")
    p.add_argument("--stage", help="online stage name")
    p.set_defaults(func=cmd_prefs)

    p = sub.add_parser("dpo", parents=[common], help="tabular DPO training and gradient checks")
    p.add_argument("action", choices=["train", "check"])
    p.add_argument("--pairs", type=Path, help="preference pair file; omit for a random instance")
    p.add_argument("--prompts", type=int, default=2, help="rows of the random instance")
    p.add_argument("--candidates", type=int, default=3, help="columns of the random instance")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_dpo)

    p = sub.add_parser("eval", parents=[common], help="win-rates, chrF++, judge sensitivity")
    p.add_argument("action", choices=["winrate", "chrf", "sensitivity"])
    p.add_argument("--config", type=Path, help="pipeline config (winrate)")
    p.add_argument("--stage", help="eval stage name")
    p.add_argument("--hyp", help="hypothesis text or file (one segment per line)")
    p.add_argument("--ref", help="reference text or file")
    p.add_argument("--char-order", type=int, default=6)
    p.add_argument("--word-order", type=int, default=2)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("table1", nargs="?", type=Path)
    p.add_argument("table2", nargs="?", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ckpt", parents=[common], help="inspect or compare checkpoint files")
    p.add_argument("action", choices=["inspect", "diff"])
    p.add_argument("path", type=Path)
    p.add_argument("other", nargs="?", type=Path)
    p.set_defaults(func=cmd_ckpt)
    return parser


def _check_args(args) -> None:
    need = {
        ("pipeline", None): ["config"], ("arbitrage", None): ["config"], ("prefs", "offline"): ["candidates"],
        ("prefs", "online"): ["config"], ("eval", "winrate"): ["config"], ("eval", "chrf"): ["hyp", "ref"],
        ("eval", "sensitivity"): ["table1", "table2"], ("ckpt", "diff"): ["other"],
    }
    for key in ((args.command, None), (args.command, getattr(args, "action", None))):
        for attr in need.get(key, []):
            if getattr(args, attr, None) is None:
                raise ValueError(f"{args.command} {args.action}: --{attr.replace('_', '-')} is required")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_args(args)
        return args.func(args)
    except (PipelineError, EndpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything unexpected is a runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
