"""Contour-aware nuclei instance segmentation, end to end on CPU.

Subpackages:
  tensor    -- NCHW arrays with recorded ops and reverse-mode gradients
  model     -- dense encoder + dual decoder network with cross-branch
               information aggregation
  losses    -- robust truncated loss family, soft Dice, deep supervision
  data      -- synthetic corpus, targets, label noise, augmentation,
               stain normalization, corpus I/O
  postproc  -- probability maps -> instance label maps
  metrics   -- aggregated Jaccard index and detection F1
  train     -- AdamW + warm-restart cosine schedule training loop
  cli       -- `cianet` command-line entry point
"""

from . import data, losses, metrics, model, postproc, tensor, train  # noqa: F401
from .errors import (  # noqa: F401
    CapacityError,
    CIANetError,
    ContractError,
    DataError,
    DomainError,
    NumericError,
    ParseError,
    ShapeError,
)

__version__ = "0.1.0"
