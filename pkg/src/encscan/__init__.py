"""Backdoor scanning for self-supervised image encoders via trigger inversion."""

__version__ = "0.1.0"
