"""Jacobian-guided anisotropic noise reshaping for local differential privacy.

The package identifies a public downstream model's task-critical
subspace from public data, reshapes isotropic LDP noise to attenuate it
along that subspace, and ships an experiment harness that measures the
resulting utility gain.
"""

from .linalg import SymEigResult, induced_norm, qr_complement, sym_eig
from .mechanisms import (
    AuditResult,
    PrivacyBudget,
    SensitivityBound,
    calibrate_agm,
    cw_inid_laplace,
    gaussian_agm,
    laplace_mechanism,
    ldp_audit,
    privunit2,
    privunitg,
)
from .models import (
    LinearModel,
    MlpModel,
    decompose_row_null,
    fit_ols,
    jacobian,
    load_model,
    save_model,
    train_classifier,
)
from .pipeline import (
    PipelineConfig,
    aggregate_mean,
    bound,
    calibrate,
    postprocess,
    preprocess,
    privatize_batch,
    randomize,
)
from .subspace import (
    JacobianAggregate,
    ReshapeTransform,
    ScaleAllocation,
    SubspaceBasis,
    aggregate_jacobians,
    allocate_scales,
    build_transform,
    extract_basis,
    identity_transform,
    load_transform,
    save_transform,
)
from .harness import (
    ExperimentConfig,
    SweepResult,
    TrialResult,
    accuracy,
    gen_synthetic_classification,
    gen_synthetic_regression,
    rmse,
    run_sweep,
)

__version__ = "0.1.0"
