"""Show the timestep gates and the biased timestep sampler.

Feedback losses only fire inside their timestep windows. Detectors
read reconstructions, and reconstructions are only trustworthy at low
t, so each loss is confined to the range where its detector has
something real to look at. The training sampler is biased the same
way: timesteps below 500 are drawn twice as often as those above.
"""

import numpy as np

from cuefeed.config import default_config
from cuefeed.policy import default_gates, default_sampler, sample_timestep

gates = default_gates(1000)
print("default gates (closed intervals):")
for name, gate in gates.items():
    print(f"  {name:<12} [{gate.t_min}, {gate.t_max}]")

print("\nactivation at a few timesteps:")
probes = (100, 250, 450, 600, 750, 900)
names = list(gates)
print("  t     " + "  ".join(f"{n:<11}" for n in names))
for t in probes:
    row = "  ".join(f"{'on' if gates[n].active(t) else '.':<11}" for n in names)
    print(f"  {t:<5} {row}")

spec = default_sampler(1000)
print(f"\nsampler segments: edges {spec.edges}, weights {spec.weights}")
print(f"P(t=100) = {spec.probability(100):.6f} (expect 1/750 = {1 / 750:.6f})")
print(f"P(t=800) = {spec.probability(800):.6f} (expect 1/1500 = {1 / 1500:.6f})")

rng = np.random.default_rng(0)
draws = np.array([sample_timestep(spec, rng) for _ in range(30_000)])
low = int((draws < 500).sum())
print(f"\n30k draws: {low} below 500, {len(draws) - low} at or above")
print(f"observed low/high ratio {low / (len(draws) - low):.3f} (expect about 2)")

# The gate windows are plain config. A loss can be disabled outright
# with the inert (-1, -1) window, or rescheduled freely.
config = default_config()
config.gates["pose"] = [-1, -1]
config.gates["boundary"] = [0, 300]
policy = config.validate().feedback_policy()
print(f"\nafter editing config: pose active at t=100? {policy.gates['pose'].active(100)}")
print(f"boundary active at t=100? {policy.gates['boundary'].active(100)}")
print(f"boundary active at t=500? {policy.gates['boundary'].active(500)}")
