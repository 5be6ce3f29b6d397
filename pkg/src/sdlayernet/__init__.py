"""Layer segmentation with a differentiable topological engine, anatomical
prior losses and disentangled anatomy/style reconstruction."""

from .losses import LossBreakdown, LossWeights, PriorConstants, derive_constants, total_loss
from .networks import ModelConfig, SDLayerNet, load_checkpoint, save_checkpoint
from .synthdata import Sample, SynthConfig, generate_dataset, read_dataset, write_dataset
from .topo import AnatomyFactors
from .trainer import EvalReport, TrainConfig, evaluate, select_best, subset_labels, train

__version__ = "0.1.0"
