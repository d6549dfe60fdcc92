"""Run directories and the ``ldp-lab`` command line.

A run directory holds:

* ``config.json``: the resolved configuration (execution-only settings removed),
* ``summary.json``: results, the formulas exercised and all flags,
* one CSV per table, with its columns described in ``README.md``,
* ``.npy`` arrays for paths and densities.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import EXPERIMENTS, ConfigError, ExperimentConfig, load, resolved
from .experiments import ExperimentResult, execute, with_overrides
from .model import ModelError
from .simulate import SimulationError


@dataclass(frozen=True)
class RunArtifact:
    directory: Path
    summary: dict
    flags: list[str]

    @property
    def ok(self) -> bool:
        return not self.flags


def plain(obj):
    """JSON-safe copy: numpy scalars and arrays become Python values, non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(plain(data), indent=2, sort_keys=True) + "\n")


def _cell(v):
    v = plain(v)
    return v if not isinstance(v, float) else repr(v)


def _readme(cfg: ExperimentConfig, result: ExperimentResult) -> str:
    lines = [f"# {result.experiment} run", "", f"Seed {cfg.run.seed}.", ""]
    if result.formulas:
        lines += ["Formulas exercised:", ""] + [f"- {f}" for f in result.formulas] + [""]
    for t in result.tables:
        lines += [f"## {t.name}.csv", ""]
        if t.title:
            lines += [t.title[0].upper() + t.title[1:] + ".", ""]
        lines += ["| column | meaning |", "| --- | --- |"] + [f"| {c} | {m} |" for c, m in t.columns] + [""]
    if result.arrays:
        lines += ["## arrays", ""] + [f"- {name}.npy, shape {tuple(a.shape)}" for name, a in result.arrays.items()]
        lines.append("")
    return "\n".join(lines)


def write_run(cfg: ExperimentConfig, result: ExperimentResult, out: Path) -> RunArtifact:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved(cfg))
    summary = {
        "experiment": result.experiment, "seed": cfg.run.seed, "formulas": result.formulas,
        "results": result.summary, "flags": result.flags, "ok": not result.flags,
    }
    _write_json(out / "summary.json", summary)
    for t in result.tables:
        with open(out / f"{t.name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([c for c, _ in t.columns])
            w.writerows([[_cell(v) for v in row] for row in t.rows])
    for name, arr in result.arrays.items():
        np.save(out / f"{name}.npy", np.ascontiguousarray(arr))
    (out / "README.md").write_text(_readme(cfg, result))
    return RunArtifact(out, plain(summary), list(result.flags))


def run(cfg: ExperimentConfig, out: str | Path, threads: int | None = None) -> RunArtifact:
    """Execute the configured experiment and write its run directory."""
    return write_run(cfg, execute(cfg, threads), Path(out))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ldp-lab", description="Numerical experiments on interacting spin systems.")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="TOML configuration file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--threads", type=int, help="worker threads for replica blocks")
    args = parser.parse_args(argv)
    try:
        cfg = load(args.config)
        if cfg.experiment != args.experiment:
            raise ConfigError(f"experiment: config is for {cfg.experiment!r}, not {args.experiment!r}")
        cfg = with_overrides(cfg, args.seed, args.threads)
        art = run(cfg, args.out)
    except (ConfigError, ModelError, SimulationError, OSError) as exc:
        print(f"ldp-lab: error: {exc}", file=sys.stderr)
        return 2
    for f in art.flags:
        print(f"flag: {f}", file=sys.stderr)
    print(f"{cfg.experiment}: {'ok' if art.ok else f'{len(art.flags)} flag(s)'} -> {art.directory}")
    return 0 if art.ok else 1


if __name__ == "__main__":
    sys.exit(main())
