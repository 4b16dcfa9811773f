"""Train the image-to-word mapper at desk scale.

Runs the full toy recipe: 32 synthetic pairs, 300 AdamW steps with linear
warmup and gradient clipping, frozen toy encoders, everything in float64.
Takes a couple of minutes on a laptop CPU and leaves a checkpoint that the
retrieval demo loads.

Equivalent CLI:
    latentcir synth-data --n 32 --out demo_runs/data --seed 100
    latentcir train --config <toy config file> \
        --data demo_runs/data/manifest.jsonl --out demo_runs/mapper
"""

import json
from pathlib import Path

import numpy as np

from latentcir.config import toy_config
from latentcir.training import run_training
from latentcir.views import synth_dataset, write_dataset

out = Path("demo_runs")
manifest = write_dataset(synth_dataset(32, np.random.default_rng(100)), out / "data")
print(f"dataset: {manifest}")

cfg = toy_config(seed=0, checkpoint_every=100)
print(f"config: {cfg.predictor_blocks} predictor blocks x {cfg.predictor_dim} dims, "
      f"batch {cfg.batch_size}, lr {cfg.lr}, warmup {cfg.warmup_steps}, "
      f"{cfg.max_steps} steps")

checkpoint, metrics = run_training(cfg, manifest, out / "mapper")

records = [json.loads(line) for line in metrics.read_text().splitlines()]
print("\nloss trajectory (prediction loss shrinks fast, alignment follows,")
print("the gate opens from its zero init as the prediction branch earns trust):")
for step in (0, 50, 100, 200, 299):
    rec = records[step]
    print(f"  step {rec['step']:>3}: L_pred {rec['L_pred']:>9.3f}  "
          f"L_align {rec['L_align']:.3f}  gate {rec['gate_value']:+.4f}  lr {rec['lr']:.2e}")
print(f"\ncheckpoint: {checkpoint}")
