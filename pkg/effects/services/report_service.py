"""Service to turn a pipeline run into a structured text report and its JSON sidecar."""
import json
import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy

import effects
from effects.exceptions import DataValidationError
from effects.services.analysis_service import TraditionalReport, config_digest, format_estimate, format_p

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
TEXT_NAME = "report.txt"
JSON_NAME = "report.json"


def _traditional_block(traditional: TraditionalReport) -> Dict[str, Any]:
    columns = []
    for column in traditional.columns:
        columns.append({
            "label": column.label,
            "n": column.n,
            "risk_difference": asdict(column.measures.risk_difference),
            "risk_ratio": asdict(column.measures.risk_ratio),
            "odds_ratio_unadjusted": asdict(column.measures.odds_ratio),
            "odds_ratio_adjusted": asdict(column.adjusted_odds_ratio),
            "flags": list(column.measures.flags),
        })
    block: Dict[str, Any] = {"stratum": traditional.stratum, "columns": columns, "flags": list(traditional.flags)}
    if traditional.heterogeneity is not None:
        block["cochran_q"] = asdict(traditional.heterogeneity)
    return block


def _decisions(report) -> List[str]:
    notes = []
    bart = report.methods.get("bart")
    if bart is not None:
        notes.append(f"bart: {bart.extras['diagnostics']['link']} link, ITEs back-transformed to the additive scale")
    bcf = report.methods.get("bcf")
    if bcf is not None and "gaussian_bcf_on_binary" in bcf.flags:
        notes.append("bcf: Gaussian model fit to a binary outcome; effects are risk differences")
    if bcf is not None:
        notes.append("bcf: propensity from logistic regression on all covariates, response scale")
    return notes


def build_document(report) -> Dict[str, Any]:
    """JSON-ready content shared by the text report and the sidecar."""
    config = report.config
    data = report.data
    methods: Dict[str, Any] = {}
    for name, result in report.methods.items():
        block = {
            "method": name,
            "seed": result.seed,
            "config_digest": result.ites.config_digest,
            "flags": list(result.flags),
            "ite_summary": result.ites.summary(),
            "ate": result.ate,
            "truth_correlation": result.truth_correlation,
            "fit_the_fit": result.tree.to_dict(),
            "subgroups": [s.to_dict() for s in result.subgroups],
            "ites": [float(v) for v in result.ites.estimates],
        }
        block.update(result.extras)
        methods[name] = block
    document: Dict[str, Any] = {
        "format_version": REPORT_FORMAT_VERSION,
        "provenance": {
            "seed": config.seed,
            "method_seeds": dict(report.method_seeds),
            "config_digest": config_digest(config),
            "config": asdict(config),
            "versions": {"effects": effects.__version__, "numpy": np.__version__, "scipy": scipy.__version__},
            "decisions": _decisions(report),
        },
        "data": {
            "source": config.source,
            "n": data.n,
            "p": data.p,
            "outcome_kind": data.outcome_kind,
            "covariates": list(data.covariate_names),
        },
        "dataset_summary": report.summary.to_dict(orient="records"),
        "methods": methods,
        "failures": list(report.failures),
    }
    if report.traditional is not None:
        document["traditional"] = _traditional_block(report.traditional)
    return document


def _num(value: Any, digits: int = 4) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float) and (math.isnan(value) or math.isinf(value)):
        return str(value)
    return f"{value:.{digits}f}"


def _tree_lines(tree: Dict[str, Any]) -> List[str]:
    nodes = {node["id"]: node for node in tree["nodes"]}
    lines: List[str] = []

    def walk(node_id: int, indent: int, prefix: str) -> None:
        node = nodes[node_id]
        body = f"mean ITE {100 * node['mean_ite']:.1f}%, share {node['share']:.1f}%"
        lines.append(f"{'  ' * indent}{prefix}{body}")
        if node["feature"] is not None:
            rule = f"{node['feature']} <= {node['threshold']:g}"
            walk(node["left"], indent + 1, f"[{rule}] ")
            walk(node["right"], indent + 1, f"[{node['feature']} > {node['threshold']:g}] ")

    walk(0, 1, "")
    return lines


def _method_lines(name: str, block: Dict[str, Any]) -> List[str]:
    ate = block["ate"]
    summary = block["ite_summary"]
    lines = [
        f"[{name}]",
        f"  seed: {block['seed']}  config: {block['config_digest']}",
        f"  ATE: {format_estimate(ate['estimate'], ate['ci_lower'], ate['ci_upper'], 4)}  SE {_num(ate['std_error'])}",
        f"  ITE: mean {_num(summary['mean'])}  sd {_num(summary['sd'])}  "
        f"median {_num(summary['median'])}  range [{_num(summary['min'])}, {_num(summary['max'])}]",
    ]
    if block.get("truth_correlation") is not None:
        lines.append(f"  correlation with true ITE: {_num(block['truth_correlation'])}")
    if "calibration" in block:
        cal = block["calibration"]
        lines.append(f"  calibration: mean forest prediction {_num(cal['mean_coef'])} (p {format_p(cal['mean_p'])}), "
                     f"differential forest prediction {_num(cal['diff_coef'])} (p {format_p(cal['diff_p'])})")
    if "variable_importance" in block:
        ranked = ", ".join(f"{n} {_num(s, 3)}" for n, s in block["variable_importance"])
        lines.append(f"  variable importance: {ranked}")
    if "best_linear_projection" in block:
        blp = block["best_linear_projection"]
        rows = [blp["intercept"]] + list(blp["rows"])
        lines.append("  best linear projection:")
        for row in rows:
            lines.append(f"    {row['name']}: {format_estimate(row['coef'], row['ci_lower'], row['ci_upper'], 4)}")
    if "diagnostics" in block:
        diag = ", ".join(f"{k}={v}" for k, v in sorted(block["diagnostics"].items()))
        lines.append(f"  diagnostics: {diag}")
    if block["flags"]:
        lines.append(f"  flags: {', '.join(block['flags'])}")
    lines.append("  fit-the-fit tree:")
    lines.extend(_tree_lines(block["fit_the_fit"]))
    for subgroup in block["subgroups"]:
        lines.append(f"  subgroups by {subgroup['covariate']}:")
        for level in subgroup["levels"]:
            lines.append(f"    {subgroup['covariate']}={level['level']:g}: n {level['n']}  "
                         f"mean {_num(level['mean'])}  sd {_num(level['sd'])}")
    return lines


def _traditional_lines(block: Dict[str, Any]) -> List[str]:
    lines = [f"[traditional] stratified by {block['stratum']}"]
    for column in block["columns"]:
        rd, rr, orr = column["risk_difference"], column["risk_ratio"], column["odds_ratio_adjusted"]
        lines.append(f"  {column['label']} (n={column['n']})")
        lines.append(f"    Risk Difference (95% CI): {format_estimate(rd['estimate'], rd['lower'], rd['upper'])}")
        lines.append(f"    Risk Ratio (95% CI): {format_estimate(rr['estimate'], rr['lower'], rr['upper'])}")
        lines.append(f"    Adjusted Odds Ratio (95% CI): {format_estimate(orr['estimate'], orr['lower'], orr['upper'])}")
    if "cochran_q" in block:
        q = block["cochran_q"]
        lines.append(f"  Cochran's chi-squared test: {q['q']:.3f} on {q['df']} df ({format_p(q['p_value'])})")
    if block["flags"]:
        lines.append(f"  flags: {', '.join(block['flags'])}")
    return lines


def render_text(document: Dict[str, Any]) -> str:
    prov = document["provenance"]
    data = document["data"]
    lines = [
        "Effect measure modification report",
        f"format {document['format_version']}  seed {prov['seed']}  config {prov['config_digest']}",
        "versions: " + ", ".join(f"{k} {v}" for k, v in sorted(prov["versions"].items())),
        f"data: {data['source']}, n={data['n']}, p={data['p']}, outcome {data['outcome_kind']}",
    ]
    for note in prov["decisions"]:
        lines.append(f"decision: {note}")
    lines.append("")
    lines.append("Descriptive statistics")
    summary = document["dataset_summary"]
    if summary:
        headers = list(summary[0].keys())
        widths = [max(len(h), *(len(str(row[h])) for row in summary)) for h in headers]
        lines.append("  " + "  ".join(h.ljust(w) for h, w in zip(headers, widths)))
        for row in summary:
            lines.append("  " + "  ".join(str(row[h]).ljust(w) for h, w in zip(headers, widths)))
    for name in sorted(document["methods"]):
        lines.append("")
        lines.extend(_method_lines(name, document["methods"][name]))
    if "traditional" in document:
        lines.append("")
        lines.extend(_traditional_lines(document["traditional"]))
    if document["failures"]:
        lines.append("")
        lines.append("Failures")
        for failure in document["failures"]:
            lines.append(f"  {failure['method']}: {failure['error']}: {failure['message']}")
    return "\n".join(lines) + "\n"


def json_safe(value: Any, path: str = "", replaced: Optional[List[str]] = None) -> Any:
    """
    Copy of value with NaN and infinite floats replaced by None.

    Dotted paths of replaced entries are appended to replaced when given.
    """
    if isinstance(value, dict):
        return {k: json_safe(v, f"{path}.{k}" if path else str(k), replaced) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v, f"{path}.{i}" if path else str(i), replaced) for i, v in enumerate(value)]
    if isinstance(value, (float, np.floating)) and not math.isfinite(value):
        if replaced is not None:
            replaced.append(path)
        return None
    return value


def write_json(document: Dict[str, Any], path: Path) -> Path:
    """Strict JSON: non-finite numbers become null and are listed under non_finite_values."""
    replaced: List[str] = []
    safe = json_safe(document, replaced=replaced)
    if replaced:
        logger.warning(f"{len(replaced)} non-finite value(s) written as null")
        safe["non_finite_values"] = replaced
    path.write_text(json.dumps(safe, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    return path


def write_report(report, out: Path) -> Tuple[Path, Path]:
    """Write report.txt and report.json into out; both are pure functions of the run."""
    document = build_document(report)
    text_path = Path(out) / TEXT_NAME
    json_path = Path(out) / JSON_NAME
    text_path.write_text(render_text(document), encoding="utf-8")
    write_json(document, json_path)
    logger.info(f"Report written to {text_path} and {json_path}")
    return text_path, json_path


def read_document(path: str) -> Dict[str, Any]:
    """Load a JSON sidecar written by write_report."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError as exc:
        raise DataValidationError(f"report not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"report is not valid JSON: {path}") from exc
    if document.get("format_version") != REPORT_FORMAT_VERSION:
        raise DataValidationError(f"unsupported report format version: {document.get('format_version')}")
    return document
