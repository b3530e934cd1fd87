"""Sequential meta-learning of model retraining for matrix-factorization recommenders."""

__version__ = "0.1.0"
