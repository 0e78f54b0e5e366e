"""Dual-modal single-object tracking: robust online filter plus accurate template correlation."""
from .geometry import AnchorGrid, Box, DenseBoxes, iou
from .correlation import FeaturePyramid, LayerWeights
from .features import FeatureProviderConfig, extract_template, image_features, synth_features
from .sim import SceneState, SimConfig, gen_sequence, render_frame
from .tracker import DualModalTracker, Frame, TrackerConfig, initialize, step

__version__ = "0.1.0"

__all__ = [
    "AnchorGrid", "Box", "DenseBoxes", "DualModalTracker", "FeaturePyramid", "FeatureProviderConfig",
    "Frame", "LayerWeights", "SceneState", "SimConfig", "TrackerConfig", "extract_template",
    "gen_sequence", "image_features", "initialize", "iou", "render_frame", "step", "synth_features",
]
