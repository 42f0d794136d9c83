"""Entity state tracking over procedural text.

Corpus ingestion, entity-conditioned transformer encodings, constrained
CRF decoding of state changes, rule-based baselines, metrics, gradient
attribution, and a training/evaluation harness with a CLI.
"""

__version__ = "0.1.0"
