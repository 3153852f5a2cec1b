"""Rating-transition toolkit: cohort matrices, one-factor and macro-risk PD models."""

__version__ = "0.1.0"
