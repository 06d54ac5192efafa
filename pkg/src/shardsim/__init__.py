"""Discrete-event simulator for sharded blockchains.

Subpackages and modules follow the functional components: node selection,
epoch randomness, assignment, intra-shard consensus, cross-shard
processing, reconfiguration and incentives, composed by the scenario runner.
"""

__version__ = "0.1.0"
