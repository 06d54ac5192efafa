"""Intra-shard consensus engines: PBFT, chained HotStuff, synchronous echo and PoW chains."""
