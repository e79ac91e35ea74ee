import hashlib
import json
import platform
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

TRACKED_PACKAGES = ("numpy", "scipy", "sympy", "pandas", "pyyaml", "click", "loguru")


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, complex):
        return {"real": value.real, "imag": value.imag}
    return value


def canonical_json(data) -> str:
    return json.dumps(_plain(data), indent=2, sort_keys=True)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(_plain(config), sort_keys=True).encode()).hexdigest()


def package_versions() -> dict:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


class ReportGenerator:
    """Writes the artifacts of one run into ``output_dir`` and keeps the list of files it wrote."""

    def __init__(self, output_dir: str | Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.written = []

    def _path(self, name: str) -> Path:
        path = self.output_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(path.name)
        return path

    def save_json(self, data, name: str) -> Path:
        path = self._path(name)
        path.write_text(canonical_json(data) + "\n")
        logger.info(f"Saved {path}")
        return path

    def save_table(self, rows: list[dict] | pd.DataFrame, name: str) -> Path:
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows)
        path = self._path(name)
        frame.to_csv(path, index=False, float_format="%.17g")
        logger.info(f"Saved table with {len(frame)} rows to {path}")
        return path

    def save_trajectory(self, trajectory, sys, name: str, count: int | None = None) -> Path:
        return self.save_table(trajectory.to_frame(sys, count), name)

    def generate_run_summary(self, title: str, actions: list, results: dict | None = None) -> str:
        """Markdown summary of the run's action ledger and headline numbers."""
        summary = f"# {title} Summary\n\n"
        summary += "## Actions\n"
        for action in actions:
            summary += f"- {action}\n"
        if results:
            summary += "\n## Results\n"
            for key in sorted(results):
                summary += f"- {key}: {results[key]}\n"
        logger.info("Generated run summary")
        return summary

    def save_report(self, content: str, name: str = "summary.md") -> Path:
        path = self._path(name)
        path.write_text(content)
        logger.info(f"Saved report to {path}")
        return path

    def write_manifest(self, config: dict, command: str, seeds: dict) -> Path:
        manifest = {
            "command": command,
            "config_sha256": config_hash(config),
            "versions": package_versions(),
            "python": platform.python_version(),
            "seeds": seeds,
            "files": sorted(set(self.written)),
        }
        return self.save_json(manifest, "manifest.json")
