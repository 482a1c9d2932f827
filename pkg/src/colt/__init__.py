"""Cyclic overlapping lottery tickets on a small numpy autograd engine."""

from .datasets import Dataset, partition_by_class, synthetic_blobs, load_idx
from .models import Model, ModelSpec, build_model
from .pruning import Mask, PruneSchedule, global_prune, intersect, rewind, sparsity, prune_rate
from .metrics import accuracy, layer_collapse_report, mask_similarity
from .tickets import (
    Seeds,
    Ticket,
    TrainConfig,
    evaluate_ticket,
    random_ticket,
    run_colt,
    run_dense,
    run_lth,
    transfer_ticket,
)

__version__ = "0.1.0"
