"""Route-stable censorship probing and ECMP effect analysis on a
deterministic simulated network."""

__version__ = "0.1.0"
