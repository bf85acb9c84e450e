"""Quality-aware part models for occluded person re-identification."""
from .backbone import BackboneConfig, extract_feature_map, partition_parts
from .errors import ConfigError, SamplingError, TrainingDivergedError, UncalibratedPredictorError
from .model import QPM, ModelConfig
from .retrieval import GalleryIndex, evaluate, search
from .training import TrainConfig, train

__version__ = "0.1.0"
