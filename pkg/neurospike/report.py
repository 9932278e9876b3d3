import csv
import json
import os
from pathlib import Path

from jinja2 import Environment, FileSystemLoader

from neurospike.harness import METRICS, ExperimentReport
from neurospike.utils import info

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
TEMPLATE_DIR = os.path.join(BASE_DIR, "templates")

CSV_COLUMNS = [
    "model",
    "threshold",
    *[f"{metric}_{stat}" for metric in METRICS for stat in ("mean", "sd")],
    "epochs_mean",
    "epochs_sd",
    *[f"p_{metric}" for metric in METRICS],
]


def format_p(p) -> str:
    if p is None:
        return "-"
    if p < 0.001:
        return "< 0.001"
    return f"{p:.3f}"


def mean_sd(mean: float, sd: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ({sd:.{digits}f})"


def summary_rows(report: ExperimentReport) -> list[dict]:
    """One CSV row per model or threshold, reference row without p."""
    rows = []
    for model in report.models:
        row = {
            "model": model.name,
            "threshold": "" if model.threshold is None else model.threshold,
        }
        for metric in (*METRICS, "epochs"):
            row[f"{metric}_mean"] = round(getattr(model.mean, metric), 4)
            row[f"{metric}_sd"] = round(getattr(model.sd, metric), 4)
        for metric in METRICS:
            p = (model.p_vs_ref or {}).get(metric)
            row[f"p_{metric}"] = "" if p is None else f"{p:.6g}"
        rows.append(row)
    return rows


class ReportWriter:
    """
    Writes ``report.json``, ``report.csv`` and ``report.md`` for one
    experiment.
    """

    def __init__(self, report: ExperimentReport, output_dir: Path) -> None:
        self.report = report
        self.output_dir = Path(output_dir)

    def run(self) -> list[Path]:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return [
            self.write_json("report.json"),
            self.write_csv("report.csv"),
            self.render_and_write_template("report.md.jinja", "report.md"),
        ]

    def write_json(self, output_name: str) -> Path:
        output_path = self.output_dir / output_name
        output_path.write_text(
            json.dumps(
                self.report.model_dump(mode="json"), indent=2, sort_keys=True
            )
            + "\n",
            encoding="utf-8",
        )
        info(f"Report '{output_path}' was saved successfully!")
        return output_path

    def write_csv(self, output_name: str) -> Path:
        output_path = self.output_dir / output_name
        with open(output_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(summary_rows(self.report))
        info(f"Summary '{output_path}' was saved successfully!")
        return output_path

    def render_and_write_template(
        self, template_name: str, output_name: str
    ) -> Path:
        env = Environment(
            loader=FileSystemLoader(TEMPLATE_DIR),
            autoescape=False,
            trim_blocks=True,
            lstrip_blocks=True,
        )
        env.filters["p"] = format_p
        env.filters["mean_sd"] = mean_sd
        template = env.get_template(template_name)
        generated_content = template.render(
            report=self.report, metrics=METRICS
        )
        output_path = self.output_dir / output_name
        with open(output_path, "w", encoding="utf-8") as f:
            f.write(generated_content)
        info(f"Generated '{output_path}' was saved successfully!")
        return output_path
