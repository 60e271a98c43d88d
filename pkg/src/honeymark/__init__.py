"""Dataset ownership verification with honey images."""
from .datasets import Dataset, ImageSample, SplitPlan, generate_synthetic, load_idx, load_png_dir, make_split
from .diffnet import ArchDescriptor, Classifier, TrainConfig, load_checkpoint, save_checkpoint, train
from .errors import HoneymarkError
from .honeygen import HoneyGenConfig, HoneySet, generate_honey
from .verifier import calibrate_threshold, loss_gap, verify

__version__ = "0.1.0"
