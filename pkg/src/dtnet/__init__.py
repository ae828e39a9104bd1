"""Dense transformer networks: TPS spatial transformers with a scatter decoder sampler."""

__version__ = "0.1.0"
