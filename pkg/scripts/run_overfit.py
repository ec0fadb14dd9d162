"""Overfit the small model on a synthetic corpus and dump loss and prosody curves.

Writes into --out:
  loss_history.csv       per-step losses
  final.ats              trained parameters
  <utt>_pitch.txt / _energy.txt   predicted vs target trajectories (trained model)
  summary.txt            before/after corpus l_mel, MCD and prosody RMSE
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np
import torch

from ema_ats.config import TrainConfig, small_config
from ema_ats.data import generate_synthetic_corpus
from ema_ats.evaluation import evaluate_corpus
from ema_ats.model import init_parameters
from ema_ats.training import loss_on_sample, train_loop, write_history


def corpus_l_mel(params, corpus, cfg):
    with torch.no_grad():
        return float(np.mean([loss_on_sample(params, s, cfg)[1].l_mel for s in corpus]))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    ap.add_argument("--speakers", type=int, default=2)
    ap.add_argument("--utterances", type=int, default=4)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=1e-4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = small_config(n_speakers=args.speakers)
    tcfg = TrainConfig(learning_rate=args.lr, max_steps=args.steps, checkpoint_every=args.steps)
    corpus = generate_synthetic_corpus(args.speakers, args.utterances, args.seed, cfg)
    args.out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    result = train_loop(corpus, cfg, tcfg, out_dir=args.out, progress=True)
    elapsed = time.perf_counter() - t0
    write_history(args.out / "loss_history.csv", result.history)

    init = init_parameters(cfg)
    before, after = evaluate_corpus(init, corpus, cfg), evaluate_corpus(result.params, corpus, cfg)
    for utt, traj in after.trajectories.items():
        traj.write(args.out / utt)

    lines = [f"{args.steps} steps in {elapsed:.1f} s",
             f"corpus l_mel      {corpus_l_mel(init, corpus, cfg):8.4f} -> {corpus_l_mel(result.params, corpus, cfg):8.4f}"]
    for col in ("mcd_db", "pitch_rmse_db", "energy_rmse_db"):
        lines.append(f"{col:<17} {before.mean(col):8.3f} -> {after.mean(col):8.3f}")
    text = "\n".join(lines)
    (args.out / "summary.txt").write_text(text + "\n")
    print(text)


if __name__ == "__main__":
    main()
