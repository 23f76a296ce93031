from .kernels import (
    SECOND_PAIRS,
    KernelParams,
    gram,
    kernel_blocks,
    kernel_div_free,
    kernel_first_blocks,
    kernel_first_deriv,
    kernel_second_blocks,
    kernel_second_deriv,
)
from .rgp import (
    ConfigurationError,
    FieldArrays,
    FieldQuery,
    GPBelief,
    InducingSet,
    NumericalError,
    PredictResult,
    absorb,
    batch_infer,
    belief_from_dict,
    belief_to_dict,
    infer_arrays,
    infer_derivatives,
    init_belief,
    jittered_cholesky,
    load_belief,
    projection,
    rgp_infer,
    rgp_predict,
    rgp_update,
    rgp_update_block,
    save_belief,
)
