"""Teacher-student self-training for multi-class segmentation on synthetic
phantom volumes, with quality-classifier pseudo-label filtering and
pixel-wise knowledge distillation."""

from .config import ExperimentConfig, config_from_dict, load_config, save_config
from .losses import LossWeights, TemperedDistribution, cross_entropy, kd_loss, student_loss, tempered_softmax
from .metrics import ConfusionMatrix, dice_per_class, iou_per_class, mean_dice, mean_iou
from .models import Checkpoint, QualityModel, SegModel, init_from_checkpoint, load_checkpoint, save_checkpoint
from .optim import Adam
from .phantom import DatasetSplit, MaskVolume, PseudoLabelSet, Volume, generate_phantom, make_split
from .tensor import Tensor, Tape, backward

__version__ = "0.1.0"
