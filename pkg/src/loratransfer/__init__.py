"""Data-free transfer of LoRA adapters between base models.

Truncated SVDs of matching source and target weights give singular bases;
least-squares alignment carries the source bases into the target space and
each LoRA update is projected through them.
"""

__version__ = "0.1.0"

from .align import AlignmentMap, align_subspaces
from .diagnostics import SpectrumReport, fit_decay_rate, spectrum_report, tradeoff_table
from .linalg import (
    TruncatedSvd,
    energy_retained,
    frobenius_norm,
    geometric_decay_eta,
    min_norm_lstsq,
    truncated_svd,
)
from .shift import (
    Baseline,
    LoraFactorPair,
    Mode,
    NoTransferableKeys,
    Status,
    TransferConfig,
    TransferredAdapter,
    TransferReport,
    interpolate_resize,
    project_factor,
    project_full_update,
    refactor_update,
    transfer_adapter,
)
from .synth import SynthSpec, generate_lora, generate_model_pair
from .tensor_store import (
    DType,
    LoraKey,
    Side,
    Tensor,
    TensorFileError,
    TensorStore,
    cast_tensor,
    read_tensor_file,
    resolve_base_key,
    write_tensor_file,
)
