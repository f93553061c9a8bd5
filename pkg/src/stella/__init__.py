"""Decomposition-guided, prompt-conditioned time series forecasting at desk scale."""
from .backbone import Backbone, BackboneConfig
from .config import RunConfig, load_config, parse_config
from .model import ABLATIONS, ForecastBundle, ModelConfig, Stella

__all__ = ["ABLATIONS", "Backbone", "BackboneConfig", "ForecastBundle", "ModelConfig",
           "RunConfig", "Stella", "load_config", "parse_config"]
__version__ = "0.1.0"
