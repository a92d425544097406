"""Federated unlearning by memorization pruning, at desk scale.

Subpackages:

- ``nn``: dense network engine on flat parameter vectors
- ``data``: synthetic datasets and client partitioning
- ``fedsim``: federated averaging runs and retraining ensembles
- ``unlearn``: memorization pruning and baseline unlearners
- ``memeval``: memorization scores, grouped evaluation, diagnostics
- ``cli``: experiment driver
"""

__version__ = "0.1.0"
