"""Mixed-effects HodgeRank with linearized Bregman regularization paths."""

__version__ = "0.1.0"
