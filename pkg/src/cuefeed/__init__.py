"""Detector-feedback fine-tuning for denoising diffusion models.

The package provides a noise schedule plus clean-sample reconstruction
(:mod:`cuefeed.core`), differentiable feedback losses computed on the
reconstruction (:mod:`cuefeed.losses`), the timestep gating / sampling
policy that decides when each loss fires (:mod:`cuefeed.policy`),
reference toy detectors and synthetic scenes (:mod:`cuefeed.detectors`,
:mod:`cuefeed.scenes`), dataset plumbing (:mod:`cuefeed.data`), a small
trainer (:mod:`cuefeed.train`), post-hoc evaluation metrics
(:mod:`cuefeed.evaluation`), a loss-vs-timestep profiler
(:mod:`cuefeed.profiling`) and a command line front end
(:mod:`cuefeed.cli`).
"""

__version__ = "0.1.0"
