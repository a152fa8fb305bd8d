"""Complex-valued phase-associative memory language models and their real-valued ablation."""

from .analysis import (
    DensityMatrix,
    FitResult,
    PairRecord,
    decoherence_gap,
    example_state,
    fit_crossover,
    fit_power_law,
    floor_bound,
    phase_coherence,
    shannon_diag,
    von_neumann,
)
from .ccore import ComplexLinear, Tape, backward, complex_linear, conj_inner, orthogonal_init
from .exceptions import (
    CheckpointError,
    ContractError,
    DensityMatrixError,
    DimensionError,
    InputError,
    MetricUndefinedError,
    NonFiniteStateError,
    ParameterMatchError,
    PhaseMemError,
    TrainingDivergedError,
)
from .layers import ComplexGatedUnit, ComplexNorm, ModReLU, RopeTable, complex_norm, modrelu, rope_apply
from .model import ModelConfig, PhaseLM, count_params, match_sam_config
from .pam import PamLayer, PamState, SamLayer, effective_rank, pam_parallel, pam_step
from .train import Corpus, SamplerConfig, TrainConfig, Trainer, generate

__version__ = "0.1.0"
