"""Federated flow matching with independent, local-OT and global semi-dual OT couplings."""

__version__ = "0.1.0"
