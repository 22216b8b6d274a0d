"""orderlab: a laboratory for comparing sequence-generation orders.

Five paradigms (autoregressive, masked denoising, blockwise denoising,
synchronized-offset "scatter", entropy-planned "jigsaw") share one
transformer backbone and are compared on three synthetic tasks with exact
forward-pass and FLOPs accounting.
"""

__version__ = "0.1.0"
