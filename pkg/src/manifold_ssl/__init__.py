"""Semi-supervised classification with a learned manifold graph over
generated class prototypes, on top of a Pi-model + VAT consistency baseline."""

from .config import RunConfig
from .data import Dataset, SplitSpec, gen_blobs, gen_rings, gen_two_moons, load_csv, split_labeled
from .evaluation import evaluate, run_ablation, run_experiment
from .losses import LossWeights, Margins, VatConfig, total_loss
from .model import Model, ModelConfig
from .trainer import TrainConfig, schedule_at, train

__version__ = "0.1.0"
