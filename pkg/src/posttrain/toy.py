"""A tiny self-contained pipeline setup: prompts, checkpoints and a mock-endpoint config."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from .records import write_jsonl
from .tensorstore import Checkpoint, DType, write_checkpoint

PROMPTS = [
    {"id": "p0", "language": "en", "text": "Explain why the sky looks blue."},
    {"id": "p1", "language": "es", "text": "Describe una receta sencilla de pan."},
    {"id": "p2", "language": "fr", "text": "Donne trois conseils pour bien dormir."},
    {"id": "p3", "language": "de", "text": "Wie funktioniert ein Kühlschrank?"},
]

EVAL_PROMPTS = [
    {"id": "e0", "language": "en", "text": "Write a haiku about autumn rain."},
    {"id": "e1", "language": "en", "text": "Summarise the rules of chess in two sentences."},
]


def toy_config(prompts="prompts.jsonl", eval_prompts="eval_prompts.jsonl", seed: int = 0) -> dict:
    return {
        "seed": seed,
        "max_inflight": 4,
        "languages": ["en", "es", "fr", "de", "nl"],
        "clusters": {"clusters": [{"name": "west", "languages": ["en", "es", "fr", "de", "nl"]}]},
        "endpoints": {
            "generators": [
                {"url": "mock://teacher-a", "model_id": "teacher-a"},
                {"url": "mock://teacher-b", "model_id": "teacher-b"},
            ],
            "reward": {"url": "mock://reward"},
            "policy": {"url": "mock://policy", "model_id": "policy", "temperature": 1.0},
            "baseline": {"url": "mock://baseline", "model_id": "baseline"},
            "judge": {"url": "mock://judge"},
            "translate": {"url": "mock://mt"},
        },
        "checkpoints": {"base": "ckpt/base.ckpt", "expert_a": "ckpt/expert_a.ckpt", "expert_b": "ckpt/expert_b.ckpt"},
        "stages": [
            {"type": "arbitrage", "name": "arbitrage", "prompts": prompts, "cluster": "west"},
            {"type": "merge", "name": "merge-sft",
             "recipe": {"method": "dare_ties", "base": "base", "inputs": ["expert_a", "expert_b"],
                        "drop_p": 0.5, "density": 0.5}},
            {"type": "prefs_offline", "name": "prefs-offline"},
            {"type": "dpo", "name": "dpo-offline", "steps": 50},
            {"type": "prefs_online", "name": "online-1", "iteration": 1, "m": 4},
            {"type": "dpo", "name": "dpo-online-1", "steps": 50},
            {"type": "merge", "name": "merge-online-1",
             "recipe": {"method": "linear", "inputs": ["stage:merge-sft", "expert_a"], "weights": [3, 1]}},
            {"type": "eval", "name": "eval", "prompts": eval_prompts, "candidate": "policy",
             "baseline": "baseline", "languages": ["en", "es", "fr"]},
        ],
    }


def toy_checkpoints(seed: int = 0) -> dict[str, Checkpoint]:
    rng = np.random.default_rng(seed)
    shapes = {"embed": (8, 4), "layer.0.w": (4, 4), "layer.0.b": (4,)}
    base = {k: rng.normal(size=s) for k, s in shapes.items()}
    out = {"base": Checkpoint.from_arrays(base, DType.F32, role="base")}
    for name in ("expert_a", "expert_b"):
        out[name] = Checkpoint.from_arrays({k: v + rng.normal(0, 0.1, v.shape) for k, v in base.items()}, DType.F32,
                                           role=name)
    return out


def write_toy_workspace(root: str | Path, seed: int = 0) -> Path:
    """Write prompts, checkpoints and ``pipeline.yaml`` under ``root``; returns the config path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_jsonl(root / "prompts.jsonl", PROMPTS)
    write_jsonl(root / "eval_prompts.jsonl", EVAL_PROMPTS)
    (root / "ckpt").mkdir(exist_ok=True)
    for name, ckpt in toy_checkpoints(seed).items():
        write_checkpoint(ckpt, root / "ckpt" / f"{name}.ckpt")
    cfg_path = root / "pipeline.yaml"
    cfg_path.write_text(yaml.safe_dump(toy_config(seed=seed), sort_keys=False), encoding="utf-8")
    return cfg_path
