"""Multistage gated average fusion of per-modality CNN features.

Inertial windows and depth frames are encoded as 64x64 images, a small CNN
is trained per modality, the intermediate feature maps of all modalities
are fused stage by stage with a gated high-boost operator, and a linear SVM
classifies the concatenated fused stages.

Submodules are imported explicitly (``mgaf.pipeline``, ``mgaf.cli``, ...);
the package root stays import-light so the CLI can configure threading
before any numeric library loads.
"""

__version__ = "0.1.0"
