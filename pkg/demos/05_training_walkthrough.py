"""Train the toy denoiser for a few hundred steps and read the logs.

This is the whole loop in miniature: synthetic scenes, the biased
timestep sampler, gated feedback losses added to the denoise term, and
a checkpoint written at the end of each phase. Takes about half a
minute on a laptop CPU.
"""

import json
from pathlib import Path

from cuefeed.config import default_config
from cuefeed.train import Trainer

out_dir = Path(__file__).parent / "out" / "training_demo"
out_dir.mkdir(parents=True, exist_ok=True)

config = default_config()
config.seed = 3
config.batch_size = 4
config.phases[0].name = "warmup"
config.phases[0].steps = 400
config.phases[0].source.count = 32
config.phases[0].source.size = 48
config.phases[0].source.seed = 88
config = config.validate()

trainer = Trainer(config)
summary = trainer.run_phases(out_dir)
print(f"\ntrained {summary['steps']} steps under config {summary['config_hash']}")

records = [json.loads(line) for line in Path(summary["log"]).read_text().splitlines()]
denoise = [r["denoise"] for r in records]
print(f"denoise first 20 steps: {sum(denoise[:20]) / 20:.4f}")
print(f"denoise last 20 steps:  {sum(denoise[-20:]) / 20:.4f}")

active = [r for r in records if r["gaze"] > 0]
print(f"steps with a live gaze term: {len(active)} of {len(records)}")
print("(the gaze gate covers t in [0, 200] and batch items draw their own t)")

last = records[-1]
print(f"\nlast record: step {last['step']} phase {last['phase']!r}"
      f" t={last['t']} total={last['total']:.4f}")

print(f"checkpoints written: {[Path(p).name for p in summary['checkpoints']]}")

# Resuming from a checkpoint reproduces the run exactly, which is what
# the reproducibility guarantee in the test suite leans on.
resumed = Trainer(config)
resumed.load_checkpoint(out_dir / "checkpoint_warmup.pt")
print(f"resumed trainer reports global step {resumed.global_step}")
