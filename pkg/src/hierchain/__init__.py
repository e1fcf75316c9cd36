"""Protocol library and deterministic simulator for a hierarchy of
merged-mined proof-of-work chains with cross-chain settlement."""

__version__ = "0.1.0"
