"""
Report writers: robustness tables, clean-only rows and cross-run comparisons
"""
from pathlib import Path
from typing import Dict, List, Sequence, Union

import pandas as pd
import plotly.graph_objects as go

from corruptions import CorruptionKind
from errors import DatasetError
from logger import app_logger
from metrics import RobustnessReport

ROBUSTNESS_CSV = "robustness.csv"
SUMMARY_CSV = "robustness_summary.csv"
CLEAN_CSV = "clean.csv"

# Column order of the standard ISTD robustness tables; impulse noise is appended
TABLE_KINDS: List[CorruptionKind] = [
    CorruptionKind.GAUSSIAN_NOISE,
    CorruptionKind.SHOT_NOISE,
    CorruptionKind.DEFOCUS_BLUR,
    CorruptionKind.MOTION_BLUR,
    CorruptionKind.GAUSSIAN_BLUR,
    CorruptionKind.BRIGHTNESS,
    CorruptionKind.CONTRAST,
    CorruptionKind.PIXELATE,
    CorruptionKind.JPEG_COMPRESSION,
]
EXTRA_KINDS: List[CorruptionKind] = [CorruptionKind.IMPULSE_NOISE]


def kind_label(kind: CorruptionKind) -> str:
    label = kind.value
    return f"{label} (extra)" if kind in EXTRA_KINDS else label


def robustness_table(report: RobustnessReport, method: str = "model") -> pd.DataFrame:
    """One row, (IOU, RCE) column pairs per kind in percent, then the grid average"""
    averages = report.kind_averages()
    row: Dict[str, object] = {"method": method}
    for kind in TABLE_KINDS + EXTRA_KINDS:
        if kind not in averages:
            continue
        record = averages[kind]
        row[f"{kind_label(kind)} IOU"] = 100.0 * record.iou_cor
        row[f"{kind_label(kind)} RCE"] = record.rce
    grid = report.grid_average()
    if grid is not None:
        row["Average IOU"] = 100.0 * grid.iou_cor
        row["Average RCE"] = grid.rce
    return pd.DataFrame([row])


def _chart(frame: pd.DataFrame, x: str, bars: Sequence[str], title: str, path: Path) -> Path:
    fig = go.Figure()
    for column in bars:
        fig.add_trace(go.Bar(name=column, x=frame[x], y=frame[column]))
    fig.update_layout(barmode="group", title=title, template="plotly_white")
    fig.write_html(path, include_plotlyjs="cdn")
    return path


def write_robustness_report(report: RobustnessReport, out_dir: Union[str, Path],
                            method: str = "model") -> Dict[str, Path]:
    """CSV data rows, CSV aggregates, Markdown table and an HTML chart"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_dir / ROBUSTNESS_CSV,
        "summary": out_dir / SUMMARY_CSV,
        "markdown": out_dir / "robustness.md",
        "html": out_dir / "robustness.html",
    }
    report.to_frame().to_csv(paths["csv"], index=False)
    summary = report.summary_frame()
    summary.to_csv(paths["summary"], index=False)

    lines = [
        f"# Robustness on {report.dataset}",
        "",
        f"- architecture: {report.arch or 'n/a'}",
        f"- corruption table: {report.table_digest}",
        f"- seed: {report.seed}",
        f"- clean IOU: {100.0 * report.clean.iou_clean:.2f}",
        "",
        "IOU in percent, RCE in percent relative to the clean IOU.",
        "",
        robustness_table(report, method).to_markdown(index=False, floatfmt=".2f"),
        "",
    ]
    groups = summary[summary["scope"] != "kind"]
    if not groups.empty:
        view = groups[["name", "iou_cor", "rce", "pd", "fa_e6"]].copy()
        view["iou_cor"] *= 100.0
        view["pd"] *= 100.0
        view.columns = ["group", "IOU", "RCE", "Pd", "Fa (1e-6)"]
        lines += ["## Corruption groups", "", view.to_markdown(index=False, floatfmt=".2f"), ""]
    paths["markdown"].write_text("\n".join(lines))

    kinds = summary[summary["scope"] == "kind"].copy()
    if not kinds.empty:
        kinds["IOU"] = 100.0 * kinds["iou_cor"]
        kinds["RCE"] = kinds["rce"]
        _chart(kinds, "name", ["IOU", "RCE"], f"Per-corruption IOU and RCE ({report.dataset})", paths["html"])
    else:
        paths.pop("html")
    app_logger.info(f"robustness report written to {out_dir}", rows=report.row_count)
    return paths


def clean_table(report: RobustnessReport, method: str = "model") -> pd.DataFrame:
    """Clean-data row: IOU and Pd in percent, Fa in units of 1e-6"""
    return pd.DataFrame([{
        "method": method,
        "dataset": report.dataset,
        "IOU": 100.0 * report.clean.iou_clean,
        "Pd": 100.0 * report.clean.pd,
        "Fa": report.clean.fa * 1e6,
    }])


def write_clean_report(report: RobustnessReport, out_dir: Union[str, Path],
                       method: str = "model") -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = clean_table(report, method)
    paths = {"csv": out_dir / CLEAN_CSV, "markdown": out_dir / "clean.md"}
    frame.to_csv(paths["csv"], index=False)
    paths["markdown"].write_text(frame.to_markdown(index=False, floatfmt=".2f") + "\n")
    app_logger.info(f"clean report written to {out_dir}")
    return paths


def _run_row(run_dir: Path) -> Dict[str, object]:
    data_path = run_dir / ROBUSTNESS_CSV
    if not data_path.exists():
        raise DatasetError(f"{run_dir} has no {ROBUSTNESS_CSV}; run eval there first")
    data = pd.read_csv(data_path)
    clean = data[data["kind"] == "clean"]
    if clean.empty:
        raise DatasetError(f"{data_path} has no clean row")
    clean = clean.iloc[0]
    corrupted = data[data["kind"] != "clean"]
    clean_iou = float(clean["iou_clean"])
    avg_iou = float(corrupted["iou_cor"].mean()) if not corrupted.empty else float("nan")
    avg_rce = 100.0 * (clean_iou - avg_iou) / clean_iou if clean_iou > 0 else float("nan")
    return {
        "method": run_dir.name,
        "clean IOU": 100.0 * clean_iou,
        "corrupted IOU": 100.0 * avg_iou,
        "RCE": avg_rce,
        "Pd": 100.0 * float(clean["pd"]),
        "Fa": float(clean["fa_e6"]),
    }


def compare_runs(run_dirs: Sequence[Union[str, Path]], out_dir: Union[str, Path]) -> pd.DataFrame:
    """Ablation table over several eval output directories"""
    if not run_dirs:
        raise DatasetError("no run directories given")
    frame = pd.DataFrame([_run_row(Path(d)) for d in run_dirs])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / "comparison.csv", index=False)
    (out_dir / "comparison.md").write_text(frame.to_markdown(index=False, floatfmt=".2f") + "\n")
    _chart(frame, "method", ["clean IOU", "corrupted IOU"], "Clean vs corruption-averaged IOU",
           out_dir / "comparison.html")
    app_logger.info(f"compared {len(frame)} runs", out_dir=str(out_dir))
    return frame
