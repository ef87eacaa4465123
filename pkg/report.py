"""
Run report: per-stage blocks collected while the pipeline runs, emitted as a
schema-versioned JSON document and a human-readable text rendering laid out
like published MELR tables (odds ratios with CI, p, Random Effects block).
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

import settings
from stopsafe.glmm import FitSummary, LrtResult

logger = logging.getLogger(__name__)

FORMATS = ("structured", "human")


@dataclass
class RunReport:
    stages: list[str] = field(default_factory=list)
    inputs: dict[str, int] = field(default_factory=dict)
    blocks: dict[str, dict] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    schema_version: str = settings.REPORT_SCHEMA_VERSION

    def record(self, stage: str, block: dict):
        self.blocks[stage] = block
        if stage not in self.stages:
            self.stages.append(stage)

    def warn(self, message: str):
        logger.warning(message)
        self.warnings.append(message)

    def to_dict(self, include_timings: bool = settings.REPORT_TIMINGS) -> dict:
        document = {
            "schema_version": self.schema_version,
            "stages": list(self.stages),
            "inputs": dict(self.inputs),
            "blocks": self.blocks,
            "warnings": list(self.warnings),
        }
        if include_timings:
            document["timings"] = dict(self.timings)
        return _plain(document)


def _plain(value):
    """Converts numpy scalars and containers to JSON-native types."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


# ---------------- Blocks ----------------
def fit_block(summary: FitSummary) -> dict:
    return {
        "predictors": [
            {
                "name": row.name,
                "beta": row.beta,
                "se": row.se,
                "odds_ratio": row.odds_ratio,
                "ci_low": row.ci_low,
                "ci_high": row.ci_high,
                "p": row.p,
            }
            for row in summary.or_table
        ],
        "random_effects": {
            "sigma2": summary.sigma2,
            "tau": dict(summary.tau),
            "icc": summary.icc,
            "n_groups": dict(summary.n_groups),
            "observations": summary.n_obs,
            "r2_marginal": summary.r2_marginal,
            "r2_conditional": summary.r2_conditional,
        },
        "loglik": summary.loglik,
        "converged": summary.converged,
    }


def lrt_block(result: LrtResult, alpha: float) -> dict:
    return {
        "chi2": result.chi2,
        "df": result.df,
        "p": result.p,
        "alpha": alpha,
        "significant": result.p < alpha,
    }


# ---------------- Human rendering ----------------
def format_p(p: float) -> str:
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def format_or(predictor: dict) -> str:
    return (
        f"{predictor['odds_ratio']:.2f} "
        f"({predictor['ci_low']:.2f}-{predictor['ci_high']:.2f})"
    )


def _heading(title: str) -> list[str]:
    return ["", f"== {title} =="]


def _key_values(block: dict, skip: Iterable[str] = ()) -> list[str]:
    lines = []
    for key, value in block.items():
        if key in skip or isinstance(value, (dict, list)):
            continue
        if isinstance(value, float):
            value = f"{value:.4f}"
        lines.append(f"{key:<36}{value}")
    return lines


def _table(records: list[dict]) -> list[str]:
    if not records:
        return ["(none)"]
    return pd.DataFrame(records).to_string(index=False, float_format="%.2f").splitlines()


def render_fit(title: str, block: dict) -> list[str]:
    lines = [f"--- {title} ---", f"{'Predictor':<36}{'Odds Ratio (95% CI)':<24}p"]
    for predictor in block["predictors"]:
        lines.append(
            f"{predictor['name']:<36}{format_or(predictor):<24}{format_p(predictor['p'])}"
        )
    effects = block["random_effects"]
    lines.append("Random Effects")
    lines.append(f"{'σ²':<36}{effects['sigma2']:.2f}")
    for factor, tau in effects["tau"].items():
        lines.append(f"{'τ00 ' + factor:<36}{tau:.2f}")
    lines.append(f"{'ICC':<36}{effects['icc']:.2f}")
    for factor, n in effects["n_groups"].items():
        lines.append(f"{'N ' + factor:<36}{n}")
    lines.append(f"{'Observations':<36}{effects['observations']}")
    lines.append(
        f"{'Marginal R² / Conditional R²':<36}"
        f"{effects['r2_marginal']:.3f} / {effects['r2_conditional']:.3f}"
    )
    if not block["converged"]:
        lines.append("(did not converge)")
    return lines


def _render_models(block: dict) -> list[str]:
    lines = []
    for name, partition in block["partitions"].items():
        lines += ["", f"-- Partition {name}: {partition['description']} --"]
        if partition.get("error"):
            lines.append(f"not fitted: {partition['error']}")
            continue
        lines += _table(partition["levels"])
        for label, fit in partition["fits"].items():
            marker = " [selected]" if label == partition["selected"] else ""
            lines += render_fit(f"{name} / {label}{marker}", fit)
        if lrt := partition.get("lrt"):
            lines.append(
                f"LRT participant vs participant+intersection: "
                f"χ²({lrt['df']}) = {lrt['chi2']:.2f}, p = {format_p(lrt['p'])}"
            )
    return lines


def _render_influence(block: dict) -> list[str]:
    lines = []
    for name, partition in block["partitions"].items():
        for grouping, result in partition["groupings"].items():
            lines += ["", f"-- Cook's distance, {name} by {grouping} --"]
            lines += _table(
                [
                    {
                        "group": group,
                        "cooks_d": "failed" if d is None else f"{d:.4f}",
                        "flagged": group in result["flagged"],
                    }
                    for group, d in result["cooks_d"].items()
                ]
            )
            for group, omitted in result["omitted"].items():
                if "error" in omitted:
                    lines.append(f"refit without [{group}] failed: {omitted['error']}")
                    continue
                lines += render_fit(f"{name} preliminary", partition["preliminary"])
                lines += render_fit(f"{name} without {grouping} [{group}]", omitted)
    return lines


def render_human(document: dict) -> str:
    lines = [
        f"Stop intersection behavior report (schema {document['schema_version']})",
        f"Stages: {', '.join(document['stages']) or '(none)'}",
    ]
    if document["inputs"]:
        lines += _heading("Inputs") + _key_values(document["inputs"])

    blocks = document["blocks"]
    if "intersections" in blocks:
        lines += _heading("Intersections") + _key_values(blocks["intersections"])
    if "cgm" in blocks:
        lines += _heading("CGM") + _key_values(blocks["cgm"]["compliance"])
        lines += _key_values(blocks["cgm"])
    if "fusion" in blocks:
        lines += _heading("Fusion") + _key_values(blocks["fusion"])
    if "encounters" in blocks:
        encounters = blocks["encounters"]
        lines += _heading("Encounters") + _key_values(encounters)
        lines += ["Excluded by reason"] + _key_values(encounters["excluded_by"])
        lines += ["Skipped by reason"] + _key_values(encounters["skipped_by"])
        lines += ["Behavior by episode"] + _table(
            [{"episode": k, **v} for k, v in encounters["behavior_by_episode"].items()]
        )
        lines += ["Encounters per participant"] + _key_values(encounters["per_participant"])
        lines += ["Selection variables"] + _table(
            [
                {
                    "variable": variable,
                    "status": status,
                    **{
                        column: f"{cell['n']} ({cell['pct']:.1f}%)"
                        for column, cell in cells.items()
                    },
                }
                for variable, statuses in encounters["selection"].items()
                for status, cells in statuses.items()
            ]
        )
    if "models" in blocks:
        lines += _heading("Models") + _render_models(blocks["models"])
    if "influence" in blocks:
        lines += _heading("Influence") + _render_influence(blocks["influence"])

    lines += _heading("Warnings") + (document["warnings"] or ["(none)"])
    if "timings" in document:
        lines += _heading("Timings (s)") + _key_values(document["timings"])
    return "\n".join(lines) + "\n"


def emit_report(
    report: RunReport,
    output_path: Path,
    formats: Iterable[str] = FORMATS,
    include_timings: bool = settings.REPORT_TIMINGS,
) -> list[Path]:
    """
    Writes report.json (structured) and/or report.txt (human) to output_path.

    :raises ValueError: For an unknown format.
    :raises OSError: If the files cannot be written.
    """
    formats = list(formats)
    if unknown := set(formats) - set(FORMATS):
        raise ValueError(f"Unknown report formats {sorted(unknown)}; expected {FORMATS}")

    document = report.to_dict(include_timings=include_timings)
    output_path = Path(output_path)
    output_path.mkdir(parents=True, exist_ok=True)

    written = []
    if "structured" in formats:
        path = output_path / "report.json"
        path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n")
        written.append(path)
    if "human" in formats:
        path = output_path / "report.txt"
        path.write_text(render_human(document), encoding="utf-8")
        written.append(path)

    for path in written:
        logger.info(f"Saved report to [{path}]")
    return written


# ---------------- Golden comparison ----------------
def compare_reports(actual, expected, tolerance: float = 1e-6, path: str = "$") -> list[str]:
    """
    Lists the differences between two structured report documents.

    Floats are statistics and match within ``tolerance`` (absolute or
    relative). Counts, flags, names and warnings must be equal.
    """
    if isinstance(actual, dict) and isinstance(expected, dict):
        differences = [
            f"{path}.{key}: {'missing' if key in expected else 'unexpected'}"
            for key in sorted(set(actual) ^ set(expected))
        ]
        for key in sorted(set(actual) & set(expected)):
            differences += compare_reports(actual[key], expected[key], tolerance, f"{path}.{key}")
        return differences
    if isinstance(actual, list) and isinstance(expected, list):
        if len(actual) != len(expected):
            return [f"{path}: {len(actual)} items, expected {len(expected)}"]
        differences = []
        for i, (a, e) in enumerate(zip(actual, expected)):
            differences += compare_reports(a, e, tolerance, f"{path}[{i}]")
        return differences
    if isinstance(actual, float) and isinstance(expected, float):
        if np.isclose(actual, expected, rtol=tolerance, atol=tolerance, equal_nan=True):
            return []
        return [f"{path}: {actual!r}, expected {expected!r} within {tolerance}"]
    if actual != expected or type(actual) is not type(expected):
        return [f"{path}: {actual!r}, expected {expected!r}"]
    return []