"""
Adaptive activation functions (scaled activations and Adaptive Blending
Units) trained in small convolutional networks, with the instrumentation
and experiment tooling around them.
"""
__version__ = "1.0.0"
