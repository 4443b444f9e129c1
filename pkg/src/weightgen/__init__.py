"""On-the-fly convolution weight generation from two-level quantized bases.

Library for training convolutional networks whose kernels are generated on
the fly from small quantized factor sets (a shared basis per layer, per-kernel
mixing coefficients, and a cross-kernel mixer), plus the compression and
accelerator-latency calculators that motivate the scheme.
"""

__version__ = "0.1.0"
