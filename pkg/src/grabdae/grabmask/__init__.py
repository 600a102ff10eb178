"""Saliency-directed foreground extraction (GMM colour models + graph cut)."""

from .gmm import GmmModel, InsufficientDataError, data_term, fit_gmm, log_likelihood
from .grabcut import (
    GrabMaskParams,
    Label,
    SegmentResult,
    apply_mask_blur,
    build_graph,
    estimate_sigma2,
    gaussian_blur,
    gibbs_energy,
    grab_mask,
    grabcut_segment,
    initial_trimap,
    neighbor_pairs,
    scaled_blur_sigma,
    seed_rectangle,
    smoothness_weight,
)
from .maxflow import FlowNetwork, cut_capacity, min_cut

__all__ = [
    "FlowNetwork", "GmmModel", "GrabMaskParams", "InsufficientDataError", "Label", "SegmentResult",
    "apply_mask_blur", "build_graph", "cut_capacity", "data_term", "estimate_sigma2", "fit_gmm",
    "gaussian_blur", "gibbs_energy", "grab_mask", "grabcut_segment", "initial_trimap",
    "log_likelihood", "min_cut", "neighbor_pairs", "scaled_blur_sigma", "seed_rectangle",
    "smoothness_weight",
]
