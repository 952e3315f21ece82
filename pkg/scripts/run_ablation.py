"""Ablation grid (L1-L7 and the three feature rows) on synthetic data.

    python3 scripts/run_ablation.py --seeds 0,1,2 --epochs 3 --out results/ablation
"""

import argparse
from pathlib import Path

from diffnet.harness import format_table, rows_to_json, run_ablation
from diffnet.model import ModelConfig
from diffnet.text import generate_synthetic
from diffnet.train import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--cue-prob", type=float, default=0.7)
    ap.add_argument("--embed-dim", type=int, default=32)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--ids", default=None, help="comma-separated subset, e.g. full,L4,F1")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/ablation")
    args = ap.parse_args()

    data = generate_synthetic(args.n, seed=0, cue_position_prob=args.cue_prob)
    cut = int(len(data) * 0.8)
    seeds = [int(s) for s in args.seeds.split(",")]
    ids = args.ids.split(",") if args.ids else None
    rows = run_ablation(ModelConfig(embed_dim=args.embed_dim, hidden=args.hidden), data[:cut], data[cut:], seeds,
                        TrainConfig(epochs=args.epochs), ids, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(rows_to_json(rows))
    table = format_table(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)


if __name__ == "__main__":
    main()
