"""Distributed split Gibbs sampling for imaging inverse problems.

Operators are viewed as hypergraphs (hyperedges are block rows, vertices are
block columns) and distributed over workers that exchange halo values and
adjoint partial sums. Noise streams are keyed by global indices so that a
distributed chain and a serial chain with the same summation order are
bitwise identical.
"""

from .deconv import DeconvSpec, build_problem, gaussian_kernel, generate_observations, step_bounds
from .hypergraph import (HypergraphPartition, OperatorStructure, build_partition,
                         grid_partition_2d, validate_partition)
from .kernels import AxdaParams
from .linops import (BlockSparseOperator, Conv2DOperator, Grad2DOperator, apply, apply_adjoint,
                     apply_local, adjoint_local, local_slice, operator_norm_sq)
from .rng import NoiseSource, sample_poisson
from .sampler import ChainState, ProblemSpec, potential, run_distributed, run_serial
from .stats import ChainSummary, quantile, snr, ssim

__all__ = [
    "AxdaParams", "BlockSparseOperator", "ChainState", "ChainSummary", "Conv2DOperator",
    "DeconvSpec", "Grad2DOperator", "HypergraphPartition", "NoiseSource", "OperatorStructure",
    "ProblemSpec", "adjoint_local", "apply", "apply_adjoint", "apply_local", "build_partition",
    "build_problem", "gaussian_kernel", "generate_observations", "grid_partition_2d",
    "local_slice", "operator_norm_sq", "potential", "quantile", "run_distributed", "run_serial",
    "sample_poisson", "snr", "ssim", "step_bounds", "validate_partition",
]
