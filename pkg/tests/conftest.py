import numpy as np
import pytest

from loratransfer import SynthSpec, generate_lora, generate_model_pair, write_tensor_file
from loratransfer.shift import DEFAULT_MODULES
from loratransfer.tensor_store import resolve_base_key, Side


def effective_updates(store, alpha=None):
    """base_key -> scale * B @ A for every LoRA pair in an adapter store."""
    pairs = {}
    for name in store:
        key = resolve_base_key(name)
        if key is not None:
            pairs.setdefault(key.base_key, {})[key.side] = store[name].matrix()
    if alpha is None:
        alpha = float(store.metadata["lora_alpha"])
    out = {}
    for base_key, f in pairs.items():
        B, A = f[Side.LEFT], f[Side.RIGHT]
        out[base_key] = (alpha / A.shape[0]) * (B @ A)
    return out


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.fixture(scope="session")
def same_pair():
    return generate_model_pair(SynthSpec())


@pytest.fixture(scope="session")
def mismatch_pair():
    return generate_model_pair(SynthSpec(hidden_t=96, intermediate_t=160, subspace_overlap=0.6))


@pytest.fixture(scope="session")
def in_subspace_adapter(same_pair):
    return generate_lora(same_pair[0], DEFAULT_MODULES, 8, 1.0, seed=3, subspace_rank=32)


@pytest.fixture
def cli_files(tmp_path, same_pair):
    src, tgt = same_pair
    paths = {k: tmp_path / f"{k}.safetensors" for k in ("source", "target", "adapter")}
    write_tensor_file(src, paths["source"])
    write_tensor_file(tgt, paths["target"])
    write_tensor_file(generate_lora(src, DEFAULT_MODULES, 8, 1.0, seed=3, subspace_rank=32),
                      paths["adapter"])
    return paths


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
