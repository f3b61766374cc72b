"""Feature-space transfer attacks on toy vision encoders.

Crafts L-inf bounded adversarial images against small differentiable
surrogate encoders (a toy ViT and a toy CNN) using per-token cosine
misalignment and baseline feature objectives, then measures how the
perturbations transfer to downstream heads trained on frozen backbones.
"""

__version__ = "0.1.0"
