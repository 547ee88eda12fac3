"""Interpretable two-stage SvdH score regression from dual-hand radiographs.

Two patch-sampling schemes feed a shared gated attention-based MIL regressor:
scheme 1 ranks grid tiles by a weakly supervised abnormality classifier;
scheme 2 crops joint-centered patches around 74 detected hand landmarks.
"""

__version__ = "0.1.0"
