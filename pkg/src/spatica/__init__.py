"""Subject-level independent component estimation with spatial priors.

Estimates subject IC maps from fMRI-style timeseries by combining an
empirical population template (mean and between-subject variance per IC)
with a sparse-precision spatial prior on subject deviations, fit by an
accelerated EM algorithm, plus joint-posterior excursion-set inference and
a simulation/evaluation harness.
"""

__version__ = "0.1.0"
