"""
Moving an adapter to a wider model
==================================

Source hidden size 64, target 96. Projection carries each update through
the aligned singular bases; the interpolation baseline just stretches the
factors to the new sizes. We compare how well each preserves the update's
action on the top singular directions, measured in matching coordinates:
source update in the source bases versus transferred update in the target
bases.
"""

import numpy as np

from loratransfer import (
    DType,
    SynthSpec,
    TransferConfig,
    generate_lora,
    generate_model_pair,
    transfer_adapter,
    truncated_svd,
)
from loratransfer.shift import Baseline

R = 24
source, target = generate_model_pair(SynthSpec(hidden_s=64, hidden_t=96, intermediate_s=128,
                                               intermediate_t=192, subspace_overlap=0.6, seed=3))
modules = ("q_proj", "v_proj", "up_proj", "down_proj")
adapter = generate_lora(source, modules, lora_rank=8, in_subspace_fraction=0.9,
                        subspace_rank=R, seed=4)

runs = {}
for baseline in (Baseline.NONE, Baseline.INTERPOLATE):
    cfg = TransferConfig(rank_r=R, target_modules=modules, baseline=baseline, out_dtype=DType.F32)
    runs[baseline] = transfer_adapter(source, target, adapter, cfg)

alpha = float(adapter.metadata["lora_alpha"])
print(f"{'key':45s} {'shape':>12s} {'projection':>11s} {'interpolate':>12s}")
for key, pair in runs[Baseline.NONE][0].entries.items():
    s = truncated_svd(source[key].matrix(), R)
    t = truncated_svd(target[key].matrix(), R)
    stem = key[: -len(".weight")]
    B = adapter[f"base_model.model.{stem}.lora_B.weight"].matrix()
    A = adapter[f"base_model.model.{stem}.lora_A.weight"].matrix()
    core_src = s.U.T @ ((alpha / 8) * B @ A) @ s.V
    errs = []
    for baseline in (Baseline.NONE, Baseline.INTERPOLATE):
        out = runs[baseline][0].entries[key].delta()
        core_tgt = t.U.T @ out @ t.V
        errs.append(np.linalg.norm(core_tgt - core_src) / np.linalg.norm(core_src))
    print(f"{key:45s} {str(pair.B.shape[0]) + 'x' + str(pair.A.shape[1]):>12s} "
          f"{errs[0]:11.2e} {errs[1]:12.3f}")

print("\nreport notes:", runs[Baseline.NONE][1].notes)
