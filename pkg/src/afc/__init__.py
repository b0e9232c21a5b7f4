"""Jet-actuated flow control: lattice flow solver, oscillator surrogate,
shared-policy PPO and a blocking key-value exchange bus."""

__version__ = "0.1.0"
