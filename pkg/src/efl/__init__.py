"""Egocentric action-frame generation pipeline: data curation, visual
instruction tuning, latent diffusion with dual-scale guidance, and a metric
harness, all sized to train from scratch on one CPU."""

__version__ = "0.1.0"
