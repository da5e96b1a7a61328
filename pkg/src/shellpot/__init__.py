"""shellpot: an SSH honeypot with a virtual-filesystem shell emulator,
an LLM response tier, and an evaluation harness for shell fidelity."""

__version__ = "0.1.0"
