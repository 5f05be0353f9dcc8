"""Pose-free multi-view latent diffusion at desk scale.

Modules: geometry, synthdata, numcore, schedule, mvae, denoiser, training,
sampling, recon, metrics and the ``mvdxx`` command line.
"""

__version__ = "0.1.0"
