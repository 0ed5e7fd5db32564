"""feedsim: deterministic robot-assisted feeding simulator and control service."""

__version__ = "0.1.0"
