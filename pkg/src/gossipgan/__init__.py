"""Gossip-trained GANs for low-overhead CSI feedback training, at desk scale."""

__version__ = "0.1.0"
