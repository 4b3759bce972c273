"""Sparse high rank adapters.

A SHiRA adapter finetunes a small, fixed set of weight entries (1-2% of a
tensor) and is stored as flat indices plus values, so switching it into a
model is an indexed overwrite rather than a dense matrix product.
"""

from .errors import CorruptAdapterError, FormatError, NumericError, ParameterError, ShapeError, ShiraError, TrainingError
from .masks import Mask, MaskRecipe, build_mask
from .model import LoraAdapter, TrainConfig, ToyModel, init_model, make_teacher_task, train_lora, train_shira
from .ortho import awom, awor
from .rank import adapter_rank_report, lora_approximation_of_shira, param_complexity
from .store import SparseAdapter, apply, extract, fuse_multi, load, load_all, save

__version__ = "0.1.0"
