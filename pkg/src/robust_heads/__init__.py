"""Multi-head robustness distillation with uncertainty-aware head selection."""

from .corruptions import AugmentationChain, CorruptionSpec, PerturbationSequence, corrupt, load_severity_tables
from .data import AugmentedDataset, AugmentedExample, ImageDataset
from .errors import (
    ConfigurationError,
    ContractViolationError,
    ImmutabilityError,
    TrainingDivergedError,
    UnsupportedCorruptionError,
    ValidationError,
)
from .inference import PredictiveDistribution, SelectionResult, select_head, select_head_variant
from .losses import DistillConfig, distillation_loss, classification_loss, loss_aug, loss_clean, loss_total
from .model import MultiHeadModel, PartitionConfig, build_multihead, forward_head
from .evaluation import RobustnessReport, TransferReport, mce, mfr

__version__ = "0.1.0"
