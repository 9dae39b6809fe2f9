"""driftk: adaptive sample sizes for slowly drifting stochastic optimization."""

__version__ = "0.1.0"
