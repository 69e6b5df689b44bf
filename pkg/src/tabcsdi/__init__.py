"""Diffusion-based missing-value imputation for mixed numerical/categorical tables."""
