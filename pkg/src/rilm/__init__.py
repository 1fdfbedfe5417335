"""Domain-adaptive hybrid CTC/attention ASR with a swappable internal LM."""

__version__ = "0.1.0"
