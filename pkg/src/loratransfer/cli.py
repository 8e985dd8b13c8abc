"""Command-line entry point.

Usage::

    python -m loratransfer --source-base S.safetensors --target-base T.safetensors \\
        --adapter adapter_model.safetensors --out OUTDIR [--rank 320 --alpha 64 ...]

Adding ``--sweep 80,160,320`` runs one refactored transfer per rank instead.

Exit status is 0 when at least one key was transferred, 2 when every key
was skipped, and 1 on I/O or validation errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .diagnostics import write_rows_csv
from .shift import (
    DEFAULT_MODULES,
    Baseline,
    Mode,
    NoTransferableKeys,
    SvdCache,
    TransferConfig,
    transfer_adapter,
)
from .tensor_store import DType, TensorFileError, read_tensor_file, write_tensor_file

log = logging.getLogger("loratransfer")

ADAPTER_FILE = "adapter_model.safetensors"
CONFIG_FILE = "adapter_config.json"
MANIFEST_FILE = "manifest.json"
SWEEP_CSV = "sweep.csv"

EXIT_OK, EXIT_FAIL, EXIT_ALL_SKIPPED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="loratransfer", description="Transfer a LoRA adapter between base models.")
    p.add_argument("--source-base", required=True, type=Path, help="safetensors of the model the adapter was trained on")
    p.add_argument("--target-base", required=True, type=Path, help="safetensors of the model to transfer onto")
    p.add_argument("--adapter", required=True, type=Path, help="PEFT adapter_model.safetensors")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--rank", type=int, default=320, help="truncation rank of the base SVDs (default: %(default)s)")
    p.add_argument("--alpha", type=float, default=64, help="lora_alpha written to the output (default: %(default)s)")
    p.add_argument("--modules", default=",".join(DEFAULT_MODULES), help="comma-separated module tags (default: %(default)s)")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.FACTOR_PRESERVING.value,
                   help="keep the adapter rank or refactor at --rank (default: %(default)s)")
    p.add_argument("--baseline", choices=[b.value for b in Baseline], default=Baseline.NONE.value,
                   help="interpolate resizes factors without projection (default: %(default)s)")
    p.add_argument("--out-dtype", choices=["f16", "f32"], default="f16", help="default: %(default)s")
    p.add_argument("--seed", type=int, default=0, help="seed for the randomized SVD (default: %(default)s)")
    p.add_argument("--source-alpha", type=float, default=None,
                   help="alpha the adapter was trained with (default: adapter_config.json "
                        "next to the adapter, then file metadata, then its rank)")
    p.add_argument("--report", type=Path, default=None, help="also write the JSON report here")
    p.add_argument("--sweep", default=None, help="comma-separated ranks; writes OUT/r<rank>/ for each plus sweep.csv")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-key progress")
    return p


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _source_alpha(args) -> float | None:
    if args.source_alpha is not None:
        return args.source_alpha
    side_config = args.adapter.parent / CONFIG_FILE
    if side_config.is_file():
        with open(side_config) as f:
            alpha = json.load(f).get("lora_alpha")
        if alpha is not None:
            return float(alpha)
    return None


def _config(args, rank: int | None = None, mode: Mode | None = None) -> TransferConfig:
    modules = _csv(args.modules)
    if not modules:
        raise UsageError("--modules is empty")
    return TransferConfig(
        rank_r=args.rank if rank is None else rank,
        out_alpha=args.alpha,
        target_modules=tuple(modules),
        mode=mode or Mode(args.mode),
        baseline=Baseline(args.baseline),
        seed=args.seed,
        out_dtype=DType.F16 if args.out_dtype == "f16" else DType.F32,
        source_alpha=_source_alpha(args),
    )


def _echo_argv(args, rank: int, mode: str) -> list[str]:
    argv = [
        "--source-base", str(args.source_base), "--target-base", str(args.target_base),
        "--adapter", str(args.adapter),
        "--rank", str(rank), "--alpha", f"{args.alpha:g}", "--modules", args.modules,
        "--mode", mode, "--baseline", args.baseline, "--out-dtype", args.out_dtype,
        "--seed", str(args.seed),
    ]
    if args.source_alpha is not None:
        argv += ["--source-alpha", f"{args.source_alpha:g}"]
    return argv


def argv_from_manifest(manifest: dict, out) -> list[str]:
    """Flags that reproduce the run recorded in ``manifest``, writing to ``out``."""
    return [*manifest["argv"], "--out", str(out)]


def _load(args):
    stores = []
    for flag in ("source_base", "target_base", "adapter"):
        path = getattr(args, flag)
        if not path.is_file():
            raise FileNotFoundError(f"--{flag.replace('_', '-')}: no such file {path}")
        stores.append(read_tensor_file(path))
    digests = {
        flag: {"path": str(getattr(args, flag)), "sha256": sha256_file(getattr(args, flag))}
        for flag in ("source_base", "target_base", "adapter")
    }
    return (*stores, digests)


def _emit(out_dir: Path, cfg, stores, cache, digests, argv):
    """One transfer into ``out_dir``; returns (exit code, report, adapter bytes)."""
    source, target, adapter = stores
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    manifest = {
        "tool": "loratransfer",
        "version": __version__,
        "argv": argv,
        "config": cfg.to_dict(),
        "inputs": digests,
    }
    try:
        result, report = transfer_adapter(source, target, adapter, cfg, cache)
    except NoTransferableKeys as exc:
        log.error("%s", exc)
        manifest["report"] = exc.report.to_dict(wall_clock=False)
        manifest["outputs"] = {}
        manifest["wall_clock_seconds"] = time.perf_counter() - t0
        _dump_json(manifest, out_dir / MANIFEST_FILE)
        return EXIT_ALL_SKIPPED, exc.report, 0

    adapter_path = out_dir / ADAPTER_FILE
    write_tensor_file(result.to_store(), adapter_path)
    _dump_json(result.adapter_config(), out_dir / CONFIG_FILE)
    manifest["report"] = report.to_dict(wall_clock=False)
    manifest["outputs"] = {
        "adapter": {"path": ADAPTER_FILE, "sha256": sha256_file(adapter_path),
                    "bytes": adapter_path.stat().st_size},
        "adapter_config": {"path": CONFIG_FILE, "sha256": sha256_file(out_dir / CONFIG_FILE)},
    }
    manifest["wall_clock_seconds"] = time.perf_counter() - t0
    _dump_json(manifest, out_dir / MANIFEST_FILE)
    return EXIT_OK, report, adapter_path.stat().st_size


def _parse(argv):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args


def run_transfer(argv) -> int:
    """Single transfer run; see module docstring for exit codes."""
    try:
        args = _parse(argv)
        cfg = _config(args)
        *stores, digests = _load(args)
        code, report, _ = _emit(args.out, cfg, stores, SvdCache(), digests,
                                _echo_argv(args, cfg.rank_r, cfg.mode.value))
        if args.report is not None:
            _dump_json(report.to_dict(), args.report)
        return code
    except (UsageError, ValueError, OSError, TensorFileError) as exc:
        print(f"loratransfer: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def run_rank_sweep(argv) -> int:
    """Refactored transfer at each ``--sweep`` rank into ``OUT/r<rank>/``.

    Also writes ``OUT/sweep.csv`` with one row per (rank, key) and a
    top-level manifest listing every rank's outputs.
    """
    try:
        args = _parse(argv)
        if not args.sweep:
            raise UsageError("--sweep needs at least one rank")
        try:
            ranks = [int(r) for r in _csv(args.sweep)]
        except ValueError:
            raise UsageError(f"--sweep must be integers, got {args.sweep!r}") from None
        configs = [_config(args, rank=r, mode=Mode.REFACTORED) for r in ranks]
        *stores, digests = _load(args)
        cache = SvdCache()
        rows, runs, codes, reports = [], [], [], {}
        for cfg in configs:
            sub = args.out / f"r{cfg.rank_r}"
            code, report, nbytes = _emit(sub, cfg, stores, cache, digests,
                                         _echo_argv(args, cfg.rank_r, Mode.REFACTORED.value))
            codes.append(code)
            reports[str(cfg.rank_r)] = report.to_dict()
            runs.append({"rank": cfg.rank_r, "dir": sub.name, "exit": code, "adapter_bytes": nbytes})
            for k in report.per_key:
                rows.append({"r": cfg.rank_r, "base_key": k.base_key, "status": k.status.value,
                             "eta_source": k.eta_source, "eta_target": k.eta_target,
                             "output_bytes": nbytes})
        write_rows_csv(rows, args.out / SWEEP_CSV)
        _dump_json({"tool": "loratransfer", "version": __version__, "inputs": digests,
                    "ranks": ranks, "runs": runs}, args.out / MANIFEST_FILE)
        if args.report is not None:
            _dump_json(reports, args.report)
        return EXIT_OK if EXIT_OK in codes else EXIT_ALL_SKIPPED
    except (UsageError, ValueError, OSError, TensorFileError) as exc:
        print(f"loratransfer: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if any(a == "--sweep" or a.startswith("--sweep=") for a in argv):
        return run_rank_sweep(argv)
    return run_transfer(argv)


if __name__ == "__main__":
    sys.exit(main())
