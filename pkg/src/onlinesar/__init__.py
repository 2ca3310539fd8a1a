"""Online SAR focusing: classical range-Doppler processing, a pulse-by-pulse
learned azimuth stage, training, downstream detection and cost benchmarks."""
from .sarcore import NormalizationSpec, RadarParams, Raster, Stage
from .simgen import PointTarget, SceneSpec, synth_raw
from .ssm import ModelConfig, OnlineProcessor, TinyModel

__all__ = ["NormalizationSpec", "RadarParams", "Raster", "Stage", "PointTarget", "SceneSpec",
           "synth_raw", "ModelConfig", "OnlineProcessor", "TinyModel"]
__version__ = "0.1.0"
