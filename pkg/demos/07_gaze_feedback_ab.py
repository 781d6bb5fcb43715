"""Single-seed A/B run of the gaze feedback benchmark.

Trains one shared base model, branches it into a gaze-on arm and a
gaze-off arm, and scores both on held-out scenes by noising each scene
to a band of timesteps and reading the gaze detector on the one-shot
reconstruction. The gaze-on arm should land more predictions inside
the gazed-at object's box while giving up only a little denoising
accuracy.

The full three-seed run used by the acceptance tests takes a few
minutes; this single-seed version takes around 90 seconds.
"""

from cuefeed.benchmark import gaze_feedback_benchmark

report = gaze_feedback_benchmark(seeds=(0,))
print(report.render_text())

outcome = report.outcomes[0]
on, off = outcome.with_gaze, outcome.without_gaze
print(f"\npooled gaze cases, on arm:  {on.correct} correct / {on.incorrect} incorrect")
print(f"pooled gaze cases, off arm: {off.correct} correct / {off.incorrect} incorrect")
print(f"denoise cost of the feedback: {100 * outcome.denoise_regression:.1f}%")
