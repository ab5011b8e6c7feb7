"""Error-encoding networks: multimodal prediction by conditioning a forward
model on a learned code of its own residual error."""

from .datasets import DotWorldSpec, ModeOffsetSpec, gen_dot_world, gen_mode_offset, split
from .errors import (ConfigError, DataError, DegenerateBatchError, DimensionError, EENError, LatentError,
                     LifecycleError, NoTapeError, OptimizerError, RankError)
from .inference import EvalCurve, LatentBank, best_of_k, extract_latents, generate, psnr
from .model import ZERO_LATENT, ArchSpec, ModelBundle, encode_error, forward, residual, snapshot
from .training import (AltMinConfig, PhaseSchedule, TrainReport, train_alternating, train_conditional,
                       train_deterministic, train_joint)

__version__ = "0.1.0"
