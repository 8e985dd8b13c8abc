"""
Command-line transfer and rank sweep
====================================

Writes a synthetic model pair and adapter to a temporary directory, runs
one transfer through the CLI, then a refactored sweep over three ranks.
Refactored adapters store ``r * (m + n)`` numbers per weight, so file size
should grow linearly with the rank.
"""

import csv
import json
import tempfile
from pathlib import Path

from loratransfer import SynthSpec, generate_lora, generate_model_pair, write_tensor_file
from loratransfer.cli import main
from loratransfer.shift import DEFAULT_MODULES

work = Path(tempfile.mkdtemp(prefix="loratransfer-demo-"))
source, target = generate_model_pair(SynthSpec(layers=1, hidden_s=384, hidden_t=384,
                                               intermediate_s=512, intermediate_t=512,
                                               subspace_overlap=0.8))
write_tensor_file(source, work / "source.safetensors")
write_tensor_file(target, work / "target.safetensors")
write_tensor_file(generate_lora(source, DEFAULT_MODULES, 16, 0.7), work / "adapter.safetensors")

common = ["--source-base", str(work / "source.safetensors"),
          "--target-base", str(work / "target.safetensors"),
          "--adapter", str(work / "adapter.safetensors")]

code = main([*common, "--out", str(work / "single")])
manifest = json.loads((work / "single" / "manifest.json").read_text())
print("single run exit", code, "->", manifest["report"]["aggregate"]["counts"])

code = main([*common, "--out", str(work / "sweep"), "--sweep", "80,160,320"])
print("sweep exit", code)
with open(work / "sweep" / "sweep.csv") as f:
    rows = list(csv.DictReader(f))
sizes = {}
for row in rows:
    sizes[int(row["r"])] = int(row["output_bytes"])
base = sizes[80]
for r, size in sorted(sizes.items()):
    print(f"  r={r:4d}  {size / 1e6:6.2f} MB  ratio {size / base:.3f}")
q = [row for row in rows if row["base_key"].endswith("q_proj.weight")]
print("q_proj eta by rank:", [(row["r"], round(float(row["eta_target"]), 5)) for row in q])
print("outputs in", work)
