"""Impedance-spectroscopy lesion classification: IIVV pattern masks, PCA
frequency ranking, classical classifiers and grouped cross-validation."""

__version__ = "0.1.0"
