"""IR-UWB driver activity recognition toolkit.

Synthetic echo generation, range/frequency/range-Doppler maps, input-size
agnostic ViT adaptation, a small numpy transformer and a leave-one-subject-out
benchmark harness.
"""
__version__ = "0.1.0"
