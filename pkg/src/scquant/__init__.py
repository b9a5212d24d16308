"""Soft convex quantization and VQ bottlenecks on a minimal reverse-mode tape."""

from .autodiff import Node, Tape, grad_check
from .datasets import ingest_cifar, read_scqd, synthesize_images, write_scqd
from .errors import (
    CheckpointFormatError,
    DatasetFormatError,
    DegenerateActiveSetError,
    NotPositiveDefiniteError,
    ShapeMismatchError,
    SolverStallError,
    TrainingDivergedError,
)
from .estimator import (
    GumbelQuantizer,
    QuantizedAutoencoder,
    ResidualVectorQuantizer,
    SoftConvexQuantizer,
    VectorQuantizer,
)
from .linalg import Rng
from .models import AutoencoderParams, decoder_forward, encoder_forward
from .quantizers import (
    Codebook,
    QuantizeResult,
    gumbel_quantize,
    perplexity,
    rq_quantize,
    top_s_restrict,
    vq_quantize_ste,
)
from .scq import ScqConfig, scq_exact, scq_exact_quantize, scq_fast
from .trainer import TrainConfig, TrainResult, evaluate, read_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AutoencoderParams",
    "CheckpointFormatError",
    "Codebook",
    "DatasetFormatError",
    "DegenerateActiveSetError",
    "GumbelQuantizer",
    "Node",
    "NotPositiveDefiniteError",
    "QuantizeResult",
    "QuantizedAutoencoder",
    "ResidualVectorQuantizer",
    "Rng",
    "ScqConfig",
    "ShapeMismatchError",
    "SoftConvexQuantizer",
    "SolverStallError",
    "Tape",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "VectorQuantizer",
    "decoder_forward",
    "encoder_forward",
    "evaluate",
    "grad_check",
    "gumbel_quantize",
    "ingest_cifar",
    "perplexity",
    "read_checkpoint",
    "read_scqd",
    "rq_quantize",
    "scq_exact",
    "scq_exact_quantize",
    "scq_fast",
    "synthesize_images",
    "top_s_restrict",
    "train",
    "vq_quantize_ste",
    "write_scqd",
]
