"""Scale-selective inheritance learning for object counting, at desk scale.

A numpy reverse-mode autodiff core, a toy multi-resolution counting model
with FSIA fusion, PWSP scale routing with the masked selection/inheritance
loss, localization metrics, a synthetic multi-scale corpus and a CLI.
"""

__version__ = "0.1.0"
