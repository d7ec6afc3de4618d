"""Bidirectional inference networks.

A joint density p(V | X) over target variables is factorized into a chain of
conditionals, each modelled by a Gaussian natural-parameter network.  The
same trained model answers forward queries (one feedforward sweep) and
backward queries (gradient descent on the unknown variable values).
"""

from .autodiff import Adam, DivergenceError, DomainError, Tape, Tensor
from .data import Dataset, TaskSuite, gen_gaussian_chain, gen_shhs_surrogate, gen_toy_line, load_dermatology, metrics
from .inference import (
    ForwardPreconditionError,
    InferenceOptions,
    InferenceResult,
    forward_predict,
    general_infer,
    hybrid_infer,
    infer_batch,
    init_targets,
)
from .model import (
    Assignment,
    BinModel,
    CheckpointError,
    VariableSpec,
    joint_nll,
    load_checkpoint,
    marginal_nll,
    save_checkpoint,
)
from .npn import GaussianMoments, NpnLinearLayer, NpnSubnetwork, gaussian_nll, npn_linear
from .training import TrainConfig, TrainReport, bin_train, cbin_train, warmup_train

__version__ = "0.1.0"
