"""SAC with a compressed predictive-information auxiliary objective.

Self-contained: a float64 reverse-mode autodiff core, toy continuous
control environments with state or tiny-pixel observations, uniform
replay with temporal-window sampling, and a CLI harness for sweeps,
ablations and oracle checks.
"""

__version__ = "0.1.0"
