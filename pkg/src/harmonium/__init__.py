"""Image harmonization toolkit: color-checker transfer, dataset construction,
GIFT networks with relation distillation, metrics and Bradley-Terry ranking."""

__version__ = "0.1.0"
