"""Correcting train/test class-distribution mismatch in probabilistic
classifiers: resampling, posterior thresholding, cost-sensitive training and
bagging, demonstrated on a from-scratch 3-turn conversation emotion model.
"""

__version__ = "0.1.0"

from .correction import (CorrectionSpec, PredictionVector, bag_ensemble,
                         class_weights, make_bags, resample, threshold_adjust)
from .data import (CLASSES, ClassDistribution, Conversation, GeneratorConfig,
                   Vocabulary, estimate_distribution, parse_tsv, synthesize,
                   tokenize, write_tsv)
from .errors import (ConfigError, ContractError, DimensionError, GraphError,
                     NumericsError, ParseError, PriorShiftError)
from .evaluation import (AggregateReport, EvalReport, aggregate_reports,
                         evaluate, micro_f1_all_classes, micro_f1_emotional,
                         tv_distance)
from .model import EmotionClassifier, Ensemble, ModelConfig
from .training import (AdamState, TrainConfig, TrainResult, adam_step,
                       clip_gradients, train, weighted_cross_entropy)
