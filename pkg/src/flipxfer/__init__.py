"""flipxfer: model zoos, prediction-flip analysis, and knowledge transfer."""

__version__ = "0.1.0"
