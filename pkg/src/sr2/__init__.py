"""Weight-shared recurrent transformer reasoning with reflection, self-refinement and periodic alignment."""

__version__ = "0.1.0"
