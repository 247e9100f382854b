"""Service to export fit-the-fit trees and subgroup plot data."""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import pandas as pd

from effects.exceptions import ConfigError
from effects.services.analysis_service import SubgroupSummary
from effects.services.report_service import build_document

logger = logging.getLogger(__name__)

DOT = "dot"
TREE_DOC = "tree-doc"
PLOTDATA = "plotdata"
FORMATS = (DOT, TREE_DOC, PLOTDATA)


def render_dot(tree: Dict[str, Any]) -> str:
    """
    Graphviz source for a fit-the-fit tree document. Internal nodes show
    their split rule; every node shows mean ITE in percent and its share.
    """
    lines = ["digraph fit_the_fit {", "  node [shape=box];"]
    for node in tree["nodes"]:
        label = f"mean ITE {100 * node['mean_ite']:.1f}%\\nshare {node['share']:.1f}%"
        if node["feature"] is not None:
            label = f"{node['feature']} <= {node['threshold']:g}\\n" + label
        lines.append(f'  n{node["id"]} [label="{label}"];')
    for node in tree["nodes"]:
        if node["feature"] is not None:
            lines.append(f'  n{node["id"]} -> n{node["left"]} [label="yes"];')
            lines.append(f'  n{node["id"]} -> n{node["right"]} [label="no"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def render_tree_document(tree: Dict[str, Any]) -> str:
    return json.dumps(tree, sort_keys=True, indent=2) + "\n"


def subgroup_frame(subgroup: Dict[str, Any]) -> pd.DataFrame:
    return SubgroupSummary.from_dict(subgroup).plot_frame()


def density_frame(subgroup: Dict[str, Any]) -> pd.DataFrame:
    rows = []
    for level in subgroup["levels"]:
        for x, density in zip(subgroup["density_grid"], level["density"]):
            rows.append({"level": level["level"], "x": x, "density": density})
    return pd.DataFrame(rows, columns=["level", "x", "density"])


def _document(report: Any) -> Dict[str, Any]:
    if isinstance(report, dict):
        return report
    return build_document(report)


def export_artifacts(report: Union[Dict[str, Any], Any], formats: Iterable[str], out: Union[str, Path]) -> List[Path]:
    """
    Write per-method tree exports and subgroup plot data into out.

    report is an EmmReport or a JSON document read back from a sidecar.
    """
    formats = list(formats)
    unsupported = [f for f in formats if f not in FORMATS]
    if unsupported:
        raise ConfigError(f"unsupported export format(s): {', '.join(unsupported)}; expected {', '.join(FORMATS)}")
    document = _document(report)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for method in sorted(document["methods"]):
        block = document["methods"][method]
        if DOT in formats:
            path = out / f"{method}_fit_the_fit.dot"
            path.write_text(render_dot(block["fit_the_fit"]), encoding="utf-8")
            written.append(path)
        if TREE_DOC in formats:
            path = out / f"{method}_fit_the_fit.json"
            path.write_text(render_tree_document(block["fit_the_fit"]), encoding="utf-8")
            written.append(path)
        if PLOTDATA in formats:
            for subgroup in block["subgroups"]:
                path = out / f"{method}_subgroup_{subgroup['covariate']}.csv"
                subgroup_frame(subgroup).to_csv(path, index=False, lineterminator="\n")
                written.append(path)
                path = out / f"{method}_density_{subgroup['covariate']}.csv"
                density_frame(subgroup).to_csv(path, index=False, lineterminator="\n")
                written.append(path)
            path = out / f"{method}_ites.csv"
            pd.DataFrame({"unit": range(len(block["ites"])), "ite": block["ites"]}).to_csv(
                path, index=False, lineterminator="\n"
            )
            written.append(path)
    logger.info(f"Exported {len(written)} file(s) to {out}")
    return written


def write_posterior_draws(draws, path: Union[str, Path]) -> Path:
    """Posterior draws in (iteration, unit, value) columns."""
    path = Path(path)
    draws.to_frame().to_csv(path, index=False, lineterminator="\n")
    return path
