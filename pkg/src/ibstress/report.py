"""Delimited and JSON output with reproducibility metadata, plus figure rendering.

Output files are byte-deterministic for a fixed sweep: metadata keys are
sorted, values JSON-encoded, and floats printed with 17 significant digits
(round-trip safe).  Figures are side outputs written next to the data file.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .experiments import SweepResult  # noqa: E402

SWEEP_COLUMNS = ("axis", "mc_mean", "mc_stderr", "theory", "ratio", "n_diverged")


def fmt(x) -> str:
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, int):
        return str(x)
    return format(float(x), ".17g")


def _ratios(result: SweepResult) -> list[float]:
    return [
        m / th if th != 0 else math.nan
        for m, th in zip(result.mc_mean, result.theory)
    ]


_CSV_MAX_LIST = 16  # longer lists (e.g. per-matrix scatter data) stay JSON-only


def _metadata_lines(metadata: dict) -> list[str]:
    return [
        f"# {key}={json.dumps(value, sort_keys=True)}"
        for key, value in sorted(metadata.items())
        if not (isinstance(value, list) and len(value) > _CSV_MAX_LIST)
    ]


def sweep_to_csv(result: SweepResult) -> str:
    lines = _metadata_lines(result.metadata)
    lines.append(",".join(SWEEP_COLUMNS))
    for axis, mean, se, th, ratio, div in zip(
        result.axis, result.mc_mean, result.mc_stderr, result.theory,
        _ratios(result), result.n_diverged,
    ):
        lines.append(",".join([fmt(axis), fmt(mean), fmt(se), fmt(th), fmt(ratio), str(div)]))
    return "\n".join(lines) + "\n"


def sweep_to_json(result: SweepResult) -> str:
    payload = {
        "metadata": result.metadata,
        "rows": [
            dict(zip(SWEEP_COLUMNS, row))
            for row in zip(result.axis, result.mc_mean, result.mc_stderr,
                           result.theory, _ratios(result), result.n_diverged)
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=True) + "\n"


def record_to_csv(record: dict, metadata: dict) -> str:
    lines = _metadata_lines(metadata)
    keys = [k for k, v in record.items() if not isinstance(v, (list, dict))]
    lines.append(",".join(keys))
    lines.append(",".join(fmt(record[k]) for k in keys))
    return "\n".join(lines) + "\n"


def record_to_json(record: dict, metadata: dict) -> str:
    return json.dumps(
        {"metadata": metadata, "result": record},
        sort_keys=True, indent=2, allow_nan=True,
    ) + "\n"


def read_metadata(path) -> dict:
    """Recover the metadata header of a CSV output (round-trip of the run parameters)."""
    meta = {}
    for line in Path(path).read_text().splitlines():
        if not line.startswith("# "):
            break
        key, _, raw = line[2:].partition("=")
        meta[key] = json.loads(raw)
    return meta


def read_sweep_csv(path) -> tuple[dict, dict[str, list]]:
    """Parse a sweep CSV back into (metadata, column lists)."""
    meta = {}
    rows = []
    header: list[str] | None = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, raw = line[2:].partition("=")
            meta[key] = json.loads(raw)
        elif header is None:
            header = line.split(",")
        elif line:
            rows.append(line.split(","))
    if header is None:
        raise ValueError(f"{path} has no header row")
    columns = {
        name: [int(v) if name == "n_diverged" else float(v) for v in values]
        for name, values in zip(header, zip(*rows))
    }
    return meta, columns


def write_output(text: str, path) -> None:
    Path(path).write_text(text)


# ---------------------------------------------------------------------------
# figures


def render_sweep_figure(result: SweepResult, png_path) -> None:
    """Render the sweep to a PNG next to its data file."""
    experiment = result.metadata.get("experiment", "sweep")
    if experiment == "figA1":
        _render_eigen_scatter(result, png_path)
        return
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    ax.errorbar(
        result.axis, result.mc_mean, yerr=[3 * s for s in result.mc_stderr],
        fmt="o", capsize=3, label="Monte Carlo (3 SE)",
    )
    finite_theory = [th for th in result.theory if not math.isnan(th)]
    if finite_theory:
        ax.plot(result.axis, result.theory, "k--", label="theory")
    if experiment == "fig2":
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("interaction strength")
        ax.set_ylabel("interaction correction")
    elif experiment == "fig3":
        ax.set_xlabel("exposure sensitivity")
        ax.set_ylabel("interaction correction")
    elif experiment == "variance-check":
        ax.set_xlabel("horizon")
        ax.set_ylabel("across-matrix variance")
    else:
        ax.set_xlabel("axis")
        ax.set_ylabel("value")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)


def _render_eigen_scatter(result: SweepResult, png_path) -> None:
    meta = result.metadata
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.0))
    pairs = [
        ("lambda_mean", "term_gamma", "mean eigenvalue", "first-order term"),
        ("lambda_variance", "term_gamma2", "eigenvalue variance", "second-order term"),
    ]
    for ax, (kx, ky, lx, ly), r in zip(axes, pairs, result.mc_mean):
        ax.scatter(meta[kx], meta[ky], s=6, alpha=0.5)
        ax.set_xlabel(lx)
        ax.set_ylabel(ly)
        ax.set_title(f"Pearson r = {r:.3f}")
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
