"""Closed-loop ultrasound needle-insertion workbench.

Pieces: a small float64 tape engine, a frozen patch-transformer encoder
with trainable register tokens, a cross-depth fusion tracking head, a
synthetic B-mode simulator, uncertainty-aware insertion policies, a
dual-rate asynchronous runtime, evaluation campaigns, and a websocket
gateway for browser clients.
"""

__version__ = "0.1.0"
