"""Distributed AC optimal power flow on partitioned grids.

Parses MATPOWER-style cases, partitions the grid graph with several
strategies, splits the OPF into linearly coupled sub-problems and solves
them with an augmented-Lagrangian distributed scheme built on an
interior-point sub-problem solver.  The ``opfbench`` CLI sweeps
case/strategy/partition-count combinations and writes CSV reports.
"""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_case_path(name: str) -> Path:
    """Path of a bundled case file, e.g. ``case9`` or ``case9.m``."""
    if not name.endswith(".m"):
        name += ".m"
    path = resources.files("opfbench") / "cases" / name
    if not path.is_file():
        raise FileNotFoundError(f"no bundled case {name!r}")
    return Path(str(path))


def bundled_case_names() -> list[str]:
    """Names of all bundled cases, sorted by bus count."""
    case_dir = resources.files("opfbench") / "cases"
    names = [entry.name[:-2] for entry in case_dir.iterdir() if entry.name.endswith(".m")]
    return sorted(names, key=lambda s: (len(s), s))
