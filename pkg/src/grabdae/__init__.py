"""GrabDAE: saliency masking, feature denoising and adversarial teacher-student adaptation."""

__version__ = "0.1.0"
