"""Parameter-efficient CT/PET segmentation and prognosis on a numpy autodiff core."""

from pemma.adaptation import AdaptationConfig, ParamLedger, adapt, inject_adapters, param_report
from pemma.backbone import ModelConfig, PrognosisHead, SegmentationModel, model_forward
from pemma.config import RunConfig, load_config
from pemma.estimators import (CTSegmenter, EarlyFusionSegmenter, LateFusionSegmenter, PEMMAAdapter,
                              PrognosisEstimator)
from pemma.exceptions import ConfigError, DataError, NumericError, PemmaError
from pemma.fusion import LateFusion, late_fusion_combine
from pemma.survival import antolini_cindex, deephit_loss, discretize_times

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig", "ParamLedger", "adapt", "inject_adapters", "param_report",
    "ModelConfig", "PrognosisHead", "SegmentationModel", "model_forward",
    "RunConfig", "load_config",
    "CTSegmenter", "EarlyFusionSegmenter", "LateFusionSegmenter", "PEMMAAdapter", "PrognosisEstimator",
    "ConfigError", "DataError", "NumericError", "PemmaError",
    "LateFusion", "late_fusion_combine",
    "antolini_cindex", "deephit_loss", "discretize_times",
]
