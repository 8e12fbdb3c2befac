"""Region-constrained contrastive view sampling (SAMCLR) on a SimCLR pipeline, at desk scale."""

__version__ = "0.1.0"
