"""Build the toy workspace and run the full pipeline against mock endpoints.

    python scripts/run_toy_pipeline.py --root /tmp/toy
"""

import argparse
import json
from pathlib import Path

from posttrain.config import parse_config
from posttrain.pipeline import run_pipeline
from posttrain.toy import write_toy_workspace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, default=Path("toy-run"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--resume", action="store_true", help="run a second, resumed pass afterwards")
    args = ap.parse_args()

    cfg_path = write_toy_workspace(args.root, seed=args.seed)
    out = args.root / "out"
    ledger = run_pipeline(parse_config(cfg_path), out, mock=True)
    print("executed:", ", ".join(ledger.executed))
    print("fingerprint:", ledger.fingerprint())
    if args.resume:
        again = run_pipeline(parse_config(cfg_path), out, resume=True, mock=True)
        print("resume executed:", again.executed or "nothing")
    winrate = next(out.glob("*-eval/winrate.json"), None)
    if winrate is not None:
        print(json.dumps(json.loads(winrate.read_text()), indent=2))


if __name__ == "__main__":
    main()
