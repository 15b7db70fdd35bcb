"""Generate candidate molecular structures from fingerprints with a SELFIES seq2seq model."""

__version__ = "0.1.0"
