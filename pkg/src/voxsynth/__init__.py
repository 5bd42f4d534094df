"""voxsynth: cross-modality CT synthesis with hand-rolled 3D U-Nets.

Volume I/O, preprocessing, patch-based training and inference, feature
prioritized losses and evaluation metrics, all on numpy with an optional
compiled convolution core.
"""

__version__ = "0.1.0"
