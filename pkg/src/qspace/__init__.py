"""Lesion classification from multi-b-value diffusion MRI: kurtosis fitting, a small
autodiff CNN engine, synthetic phantoms and a cross-validated evaluation harness."""

__version__ = "0.1.0"
