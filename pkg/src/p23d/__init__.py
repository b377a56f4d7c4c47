"""Point-cloud-prior structure completion at desk scale."""

__version__ = "0.1.0"
