"""Label-free network intrusion detection via non-contrastive pretraining."""

__version__ = "0.1.0"
