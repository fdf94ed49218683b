"""Continual low-parameter adaptation of an interactive segmentation model
inside a simulated annotation campaign."""
