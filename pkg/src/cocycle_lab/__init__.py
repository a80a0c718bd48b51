"""Numerics for quasi-periodic linear cocycles and their KAM reducibility."""

__version__ = "0.1.0"

from .cocycle import (
    Cocycle,
    LyapunovSpectrum,
    OperatorSpec,
    build_transfer,
    conjugate,
    group_multiplicities,
    iterate_block,
    lyapunov_spectrum,
    mean_log_det,
    transfer_cocycle,
)
from .errors import (
    BranchError,
    CocycleLabError,
    ConditioningError,
    ConfigError,
    DataError,
    DegenerateHoppingError,
    DivergenceError,
    DomainError,
    InsufficientResolutionError,
    IterationError,
    NumericalError,
    StateError,
)
from .fourier import (
    GOLDEN,
    DiophantineParams,
    FourierMap,
    FrequencyVector,
    TrigPolynomial,
    check_diophantine,
    cosine_potential,
    matrix_exp_map,
    matrix_inv_map,
    matrix_log_map,
    norm_h,
)
from .kam import (
    BlockStructure,
    KamSchedule,
    KamState,
    KamTrace,
    block_diagonalize,
    build_rotation,
    kam_iterate,
    kam_step,
    lyapunov_from_phases,
    remove_nonresonant,
    scan_resonances,
    solve_homological,
    sylvester_bound_check,
)
from .perturbation import check_normal_bound, holder_exponent_probe, pair_eigenvalues, phase_distance
from .spectral import (
    IdsCurve,
    assemble_finite_volume,
    duality_gap,
    finite_volume_eigenvalues,
    holder_fit,
    ids_curve,
    level_set_classify,
    level_set_eta,
    predicted_holder,
    thouless_check,
    widest_gap,
)
