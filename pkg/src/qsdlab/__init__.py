"""Monte Carlo laboratory for Brownian motion normalized by (1+t)^kappa and killed outside (-1, 1)."""

__version__ = "0.1.0"
