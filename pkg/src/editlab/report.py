"""Report writers: JSON, markdown, delimited CSV, plot data, and figures.

Report JSON is fully deterministic for a given run (sorted keys, no
timestamps), so identical configs produce byte-identical files. Figures are
rendered with the Agg backend alongside the delimited output.
"""

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

METRIC_ROWS = [
    ("Edit Succ.", "edit_success"),
    ("Portability", "portability"),
    ("Locality", "locality"),
    ("Fluency", "fluency"),
]


def build_report(metrics_report, outcomes, method: str, run_config: dict, pretrain_info: dict) -> dict:
    cycles = [o.cycles_used for o in outcomes]
    steps = [o.total_steps for o in outcomes]
    drifts = [o.param_l2_drift for o in outcomes]
    edits = {
        "count": len(outcomes),
        "convergence_rate": (sum(1 for o in outcomes if o.converged) / len(outcomes)) if outcomes else None,
        "mean_cycles": (sum(cycles) / len(cycles)) if cycles else None,
        "mean_steps": (sum(steps) / len(steps)) if steps else None,
        "mean_param_l2_drift": (sum(drifts) / len(drifts)) if drifts else None,
    }
    return {
        "method": method,
        "metrics": metrics_report.to_dict(),
        "edits": edits,
        "run_config": run_config,
        "pretrain": pretrain_info,
    }


def write_report_files(out_dir, metrics_report, outcomes, method, run_config, pretrain_info) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(metrics_report, outcomes, method, run_config, pretrain_info)

    report_json = out / "report.json"
    with open(report_json, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")

    report_md = out / "report.md"
    with open(report_md, "w", encoding="utf-8") as f:
        f.write(render_markdown(report))

    report_csv = out / "report.csv"
    with open(report_csv, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", method])
        for label, key in METRIC_ROWS:
            writer.writerow([label, _fmt(report["metrics"][key])])

    plot_data = out / "plot_data.json"
    with open(plot_data, "w", encoding="utf-8") as f:
        json.dump(
            {"methods": {method: {key: report["metrics"][key] for _, key in METRIC_ROWS}}},
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")

    figures = write_figures(out / "figures", report, outcomes)
    return {
        "report_json": report_json.name,
        "report_md": report_md.name,
        "report_csv": report_csv.name,
        "plot_data": plot_data.name,
        "figures": figures,
    }


def render_markdown(report: dict) -> str:
    formulas = report["metrics"]["formulas"]
    lines = [
        f"# Sequential edit report ({report['method']})",
        "",
        "Scoring conventions: "
        f"{formulas['match_rule']}; locality vs {formulas['locality_reference']}; "
        f"entropy base {formulas['entropy_base']}; fluency = {formulas['fluency']}.",
        "",
        "| Metric | " + report["method"] + " |",
        "| --- | --- |",
    ]
    for label, key in METRIC_ROWS:
        lines.append(f"| {label} | {_fmt(report['metrics'][key])} |")
    edits = report["edits"]
    lines += [
        "",
        f"Edits: {edits['count']}, convergence rate {_fmt(edits['convergence_rate'])}, "
        f"mean cycles {_fmt(edits['mean_cycles'])}, mean steps {_fmt(edits['mean_steps'])}, "
        f"mean parameter drift (L2) {_fmt(edits['mean_param_l2_drift'])}.",
        "",
    ]
    return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_figures(fig_dir, report: dict, outcomes) -> list[str]:
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []

    written.append(_radar_figure(fig_dir, {report["method"]: report["metrics"]}))
    loss_fig = _loss_figure(fig_dir, outcomes)
    if loss_fig:
        written.append(loss_fig)
    return written


def radar_axes_values(metrics: dict, gen_len: int = 20) -> list[float]:
    """Metrics normalized to [0, 1] for the radar plot; fluency by its cap."""
    cap = (math.log2(gen_len - 1) + math.log2(gen_len - 2)) / 2.0
    vals = []
    for _, key in METRIC_ROWS:
        v = metrics.get(key)
        if v is None:
            vals.append(0.0)
        elif key == "fluency":
            vals.append(min(v / cap, 1.0))
        else:
            vals.append(v)
    return vals


def _radar_figure(fig_dir: Path, method_metrics: dict) -> str:
    labels = [label for label, _ in METRIC_ROWS]
    angles = np.linspace(0, 2 * np.pi, len(labels), endpoint=False).tolist()
    angles += angles[:1]

    fig, ax = plt.subplots(figsize=(5, 5), subplot_kw={"polar": True})
    for method, metrics in method_metrics.items():
        vals = radar_axes_values(metrics)
        vals += vals[:1]
        ax.plot(angles, vals, label=method)
        ax.fill(angles, vals, alpha=0.15)
    ax.set_xticks(angles[:-1])
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1)
    ax.set_title("Post-sequence metrics (fluency scaled to its cap)")
    ax.legend(loc="lower right", fontsize=8)
    path = fig_dir / "metrics_radar.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return f"figures/{path.name}"


def _loss_figure(fig_dir: Path, outcomes) -> str | None:
    curves = []
    for i, outcome in enumerate(outcomes):
        losses = [v for cycle in outcome.cycles for v in cycle.losses]
        if losses:
            curves.append((i, losses))
    if not curves:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, losses in curves:
        ax.plot(losses, alpha=0.5, linewidth=0.9)
    ax.set_xlabel("optimizer step within edit")
    ax.set_ylabel("loss")
    ax.set_title(f"Per-edit loss trajectories ({len(curves)} edits)")
    path = fig_dir / "edit_losses.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return f"figures/{path.name}"


def write_comparison(out_dir, method_reports: dict) -> dict:
    """Multi-method comparison: shared table, CSV, plot data, and radar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = list(method_reports)

    plot_payload = {
        "methods": {
            m: {key: r["metrics"][key] for _, key in METRIC_ROWS} for m, r in method_reports.items()
        }
    }
    with open(out / "plot_data.json", "w", encoding="utf-8") as f:
        json.dump(plot_payload, f, indent=2, sort_keys=True)
        f.write("\n")

    with open(out / "report.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric"] + methods)
        for label, key in METRIC_ROWS:
            writer.writerow([label] + [_fmt(method_reports[m]["metrics"][key]) for m in methods])

    lines = ["# Method comparison", "", "| Metric | " + " | ".join(methods) + " |"]
    lines.append("| --- |" + " --- |" * len(methods))
    for label, key in METRIC_ROWS:
        row = " | ".join(_fmt(method_reports[m]["metrics"][key]) for m in methods)
        lines.append(f"| {label} | {row} |")
    lines.append("")
    with open(out / "report.md", "w", encoding="utf-8") as f:
        f.write("\n".join(lines))

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    radar = _radar_figure(fig_dir, {m: r["metrics"] for m, r in method_reports.items()})
    return {"plot_data": "plot_data.json", "report_csv": "report.csv", "report_md": "report.md", "figures": [radar]}
