"""In-context learning of energy functions with a causal transformer."""

__version__ = "0.1.0"
