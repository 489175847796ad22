"""Numerical lab for invariant manifolds of semilinear parabolic problems on perturbed domains."""

__version__ = "0.1.0"
