import json

import pytest
import yaml

from posttrain.cli import main
from posttrain.config import parse_config
from posttrain.pipeline import PipelineError, RunLedger, derive_seed, run_pipeline
from posttrain.records import sha256_file
from posttrain.tensorstore import read_checkpoint

ALL = ["arbitrage", "merge-sft", "prefs-offline", "dpo-offline", "online-1", "dpo-online-1", "merge-online-1", "eval"]


def test_toy_run_is_deterministic(toy):
    cfg = parse_config(toy)
    a = run_pipeline(cfg, toy.parent / "a", mock=True)
    b = run_pipeline(cfg, toy.parent / "b", mock=True, max_inflight=1)
    assert a.executed == ALL and a.fingerprint() == b.fingerprint()
    assert sha256_file(toy.parent / "a" / "ledger.json") == sha256_file(toy.parent / "b" / "ledger.json")
    for e in a.entries:
        for ref in e.outputs.values():
            rel, digest = ref.split("#")
            assert sha256_file(toy.parent / "a" / rel) == digest


def test_ledger_ordering_and_seeds(toy):
    ledger = run_pipeline(parse_config(toy), toy.parent / "run", mock=True)
    types = [e.type for e in ledger.entries]
    assert types.index("prefs_offline") < types.index("prefs_online")
    assert len({e.seed for e in ledger.entries}) == len(ledger.entries)
    assert ledger.entries[0].seed == derive_seed(0, "arbitrage", 0)


def test_seed_changes_stochastic_stages(toy):
    cfg = parse_config(toy)
    a = run_pipeline(cfg, toy.parent / "a", mock=True)
    raw = yaml.safe_load(toy.read_text())
    raw["seed"] = 99
    toy.write_text(yaml.safe_dump(raw))
    b = run_pipeline(parse_config(toy), toy.parent / "b", mock=True)
    assert a.entry("merge-sft").outputs != b.entry("merge-sft").outputs
    assert a.entry("arbitrage").outputs == b.entry("arbitrage").outputs


def test_resume_is_idempotent(toy):
    cfg, out = parse_config(toy), toy.parent / "run"
    first = run_pipeline(cfg, out, mock=True)
    again = run_pipeline(cfg, out, resume=True, mock=True)
    assert again.executed == [] and again.skipped == ALL
    assert again.fingerprint() == first.fingerprint()
    assert run_pipeline(cfg, out, resume=True, mock=True).executed == []


def test_deleted_eval_artifact_reruns_only_eval(toy):
    cfg, out = parse_config(toy), toy.parent / "run"
    first = run_pipeline(cfg, out, mock=True)
    (out / "07-eval" / "winrate.json").unlink()
    again = run_pipeline(cfg, out, resume=True, mock=True)
    assert again.executed == ["eval"] and again.fingerprint() == first.fingerprint()


def test_corrupt_intermediate_names_stage(toy):
    cfg, out = parse_config(toy), toy.parent / "run"
    run_pipeline(cfg, out, mock=True)
    with open(out / "02-prefs-offline" / "pairs.jsonl", "a") as fh:
        fh.write("\n")
    with pytest.raises(PipelineError) as e:
        run_pipeline(cfg, out, resume=True, mock=True)
    assert e.value.stage == "prefs-offline"


def test_changed_input_reruns_downstream(toy):
    cfg, out = parse_config(toy), toy.parent / "run"
    run_pipeline(cfg, out, mock=True)
    with open(toy.parent / "prompts.jsonl", "a") as fh:
        fh.write(json.dumps({"id": "p9", "language": "en", "text": "One more question?"}) + "\n")
    again = run_pipeline(cfg, out, resume=True, mock=True)
    assert "arbitrage" in again.executed and "merge-sft" in again.skipped


def test_stage_failure_keeps_ledger(toy):
    raw = yaml.safe_load(toy.read_text())
    raw["endpoints"]["judge"]["mock"] = {"kind": "failing"}
    toy.write_text(yaml.safe_dump(raw))
    out = toy.parent / "run"
    with pytest.raises(PipelineError) as e:
        run_pipeline(parse_config(toy), out, mock=True)
    assert e.value.stage == "eval"
    saved = RunLedger.load(out / "ledger.json")
    assert [x.name for x in saved.entries] == ALL[:-1]


def test_dpo_stage_outputs(toy):
    out = toy.parent / "run"
    run_pipeline(parse_config(toy), out, mock=True)
    ckpt = read_checkpoint(out / "03-dpo-offline" / "policy.ckpt")
    mapping = json.loads((out / "03-dpo-offline" / "mapping.json").read_text())
    assert ckpt["logits"].shape == (len(mapping["prompts"]), mapping["n_candidates"])
    trace = json.loads((out / "03-dpo-offline" / "trace.json").read_text())
    assert trace["loss"][-1] < trace["initial_loss"]


def test_cli_exit_codes(toy, tmp_path, capsys):
    out = tmp_path / "cli"
    assert main(["pipeline", "run", "--config", str(toy), "--out-dir", str(out), "--mock-endpoints"]) == 0
    assert main(["pipeline", "resume", "--config", str(toy), "--out-dir", str(out), "--mock-endpoints"]) == 0
    assert '"executed": []' in capsys.readouterr().out
    assert main(["pipeline", "run", "--config", str(tmp_path / "missing.yaml")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("stages: [{type: nope}]\n")
    assert main(["pipeline", "run", "--config", str(bad)]) == 1
    (out / "00-arbitrage" / "dataset.jsonl").write_text("tampered\n")
    assert main(["pipeline", "resume", "--config", str(toy), "--out-dir", str(out), "--mock-endpoints"]) == 2
    assert "arbitrage" in capsys.readouterr().err


def test_cli_tools(toy, tmp_path, capsys):
    recipe = toy.parent / "recipe.yaml"
    recipe.write_text(yaml.safe_dump({"method": "slerp", "inputs": ["ckpt/base.ckpt", "ckpt/expert_a.ckpt"],
                                      "t": 0.3, "output": "slerp.ckpt"}))
    assert main(["merge", "apply", str(recipe)]) == 0
    assert main(["ckpt", "inspect", str(toy.parent / "slerp.ckpt")]) == 0
    capsys.readouterr()
    assert main(["ckpt", "diff", str(toy.parent / "slerp.ckpt"), str(toy.parent / "slerp.ckpt")]) == 0
    assert json.loads(capsys.readouterr().out)["identical"] is True
    assert main(["eval", "chrf", "--hyp", "ab", "--ref", "abb", "--char-order", "1", "--word-order", "0",
                 "--beta", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["mean"] == 80.0
    assert main(["dpo", "check", "--prompts", "3", "--candidates", "4", "--beta", "1"]) == 0
    assert main(["dpo", "train", "--out-dir", str(tmp_path / "dpo"), "--steps", "5"]) == 0
    (toy.parent / "broken.ckpt").write_bytes(b"\x00" * 3)
    assert main(["ckpt", "inspect", str(toy.parent / "broken.ckpt")]) == 1
    assert main(["eval", "sensitivity"]) == 1


def test_cli_stage_subcommands(toy, tmp_path, capsys):
    out = tmp_path / "stages"
    base = ["--config", str(toy), "--out-dir", str(out), "--mock-endpoints"]
    assert main(["arbitrage", "run", *base]) == 0
    assert main(["prefs", "online", *base]) == 0
    assert main(["eval", "winrate", *base]) == 0
    ledger = RunLedger.load(out / "ledger.json")
    assert [e.name for e in ledger.entries] == ALL
    assert main(["prefs", "offline", "--candidates", str(out / "00-arbitrage" / "candidates.jsonl"),
                 "--out-dir", str(tmp_path / "po")]) == 0
    assert (tmp_path / "po" / "pairs.jsonl").read_bytes() == (out / "02-prefs-offline" / "pairs.jsonl").read_bytes()
