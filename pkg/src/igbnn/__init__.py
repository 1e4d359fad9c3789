"""Adversarially trained SVGD particle ensembles with an information-gain penalty."""

__version__ = "0.1.0"
