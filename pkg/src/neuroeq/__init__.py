"""CNN channel equalizer and neural polar decoder with classical baselines."""

__version__ = "0.1.0"
