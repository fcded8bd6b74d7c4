"""Tracking-free retargeting toolkit.

A library plus deterministic multi-party simulator for cookie-less
retargeting ads: additively homomorphic product profiles, client-side
encrypted scoring, a trusted ranking service, and a second-price RTB
exchange with proxied, end-to-end-encrypted ad delivery.
"""

__version__ = "0.1.0"
