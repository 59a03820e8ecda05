"""Dense fusion classmate network for land-cover segmentation.

A small reverse-mode autodiff core (numpy, with compiled convolution
kernels), a densely connected encoder-decoder, pairwise dense feature
fusion, a land+road multi-task model, and the data, training, evaluation
and inference pieces around it.
"""
from .backbone import BackboneSpec, desk_spec, paper_spec
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import load_config
from .data import ClassPalette, deepglobe_palette
from .fusion import build_fusion_tree, fusion_forward
from .inference import ensemble_fuse, multiscale_fuse, tiled_predict
from .kernels import BACKEND
from .metrics import ConfusionMatrix, miou
from .model import DFCNet, make_model_spec, merge_batches, multitask_loss
from .optim import SGD, ScheduleSpec, poly_lr
from .train import Trainer, evaluate

__version__ = "0.1.0"
