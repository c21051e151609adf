import asyncio
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
from jinja2 import Environment, FileSystemLoader, select_autoescape

from utils.data_processor import QUANTILE_METHOD, DataProcessor
from utils.errors import PersistenceError, ReportError

try:
    from openpyxl import Workbook  # type: ignore
except Exception:  # pragma: no cover
    Workbook = None  # type: ignore

DEFAULT_FORMATS = ("csv", "json", "html")
BEST_PAIR_COLUMNS = [
    "cn0", "n_sup", "n_train", "lam", "sigma", "median_max_accuracy", "baseline_median", "gain", "gain_percent",
]

PLOT_COLUMNS: Dict[str, Dict[str, str]] = {
    "accuracy_vs_nsup.csv": {
        "cn0": "C/N0 in dBHz",
        "series": "baseline (lambda = 0), reference (fully supervised, n_train = n_sup) or best_ssl",
        "n_sup": "labelled training samples",
        "n_train": "training samples, labelled and unlabelled",
        "lam": "regularization weight",
        "sigma": "kernel bandwidth, empty for lambda = 0",
        "median_max_accuracy": "median over runs of the per-run maximum validation accuracy",
        "q1": "first quartile of the run maxima",
        "q3": "third quartile of the run maxima",
        "n_runs": "runs in the cell",
    },
    "quartiles_vs_sigma.csv": {
        "cn0": "C/N0 in dBHz",
        "n_sup": "labelled training samples",
        "n_train": "training samples",
        "lam": "regularization weight",
        "sigma": "kernel bandwidth",
        "q1": "first quartile of the run maxima",
        "q2": "median of the run maxima",
        "q3": "third quartile of the run maxima",
        "n_runs": "runs in the cell",
        "baseline_q1": "first quartile of the lambda = 0 cell at the same point",
        "baseline_q2": "median of the lambda = 0 cell at the same point",
        "baseline_q3": "third quartile of the lambda = 0 cell at the same point",
    },
}


def _to_csv(frame: pd.DataFrame, path: Path, column_docs: Optional[Dict[str, str]] = None) -> Path:
    """CSV without index; ``column_docs`` become leading ``# column: meaning`` lines."""
    docs = column_docs or {}
    header = "".join(f"# {name}: {docs[name]}\n" for name in frame.columns if name in docs)
    try:
        path.write_text(header + frame.to_csv(index=False, lineterminator="\n", na_rep=""), encoding="utf-8")
    except OSError as e:
        raise PersistenceError(f"cannot write {path}: {e}") from e
    return path


def _clean(value: Any) -> Any:
    if isinstance(value, float) and value != value:
        return None
    return value


def _records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    return [{k: _clean(v) for k, v in row.items()} for row in frame.to_dict(orient="records")]


class ReportGenerator:
    def __init__(self, output_dir: str, templates_dir: str, logger: Optional[logging.Logger] = None,
                 formats: Sequence[str] = DEFAULT_FORMATS) -> None:
        self.output_dir = Path(output_dir)
        self.templates_dir = Path(templates_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.env = Environment(
            loader=FileSystemLoader(str(self.templates_dir)),
            autoescape=select_autoescape(["html", "xml"]),
        )
        self.logger = logger or logging.getLogger("ot-ssl-gnss")
        self.formats = set(formats)
        self.processor = DataProcessor()

    def best_pairs_report(self, table: pd.DataFrame) -> Dict[str, Any]:
        """Winning (lambda, sigma) per operating point, its gain and the sigma breakdown."""
        pairs = self.processor.best_pairs(table)
        entries = []
        for p in pairs:
            breakdown = self.processor.sigma_breakdown(table, p)
            entries.append({
                "cn0": p.cn0,
                "n_sup": p.n_sup,
                "n_train": p.n_train,
                "lam": p.lam,
                "sigma": p.sigma,
                "median_max_accuracy": p.median_max_accuracy,
                "baseline_median": p.baseline_median,
                "gain": p.gain,
                "gain_percent": 100.0 * p.gain,
                "sigma_breakdown": _records(breakdown),
            })
        return {
            "quantile_method": QUANTILE_METHOD,
            "best_pairs": entries,
            "gain_distribution": self.processor.gain_distribution(pairs),
        }

    def emit_plot_data(self, table: pd.DataFrame) -> Dict[str, Path]:
        """Plot-ready CSVs, each headed by ``#`` lines documenting its columns."""
        if table.empty:
            raise ReportError("the statistics table is empty")
        frames = {
            "accuracy_vs_nsup": self.processor.accuracy_vs_nsup(table),
            "quartiles_vs_sigma": self.processor.quartiles_vs_sigma(table),
        }
        return {
            name: _to_csv(frame, self.output_dir / f"{name}.csv", PLOT_COLUMNS[f"{name}.csv"])
            for name, frame in frames.items()
        }

    async def generate_excel(self, table: pd.DataFrame, report: Dict[str, Any]) -> Optional[str]:
        if Workbook is None:
            self.logger.warning("openpyxl not available; skipping Excel export")
            return None
        wb = Workbook()
        ws = wb.active
        ws.title = "Statistics"
        ws.append(list(table.columns))
        for row in table.itertuples(index=False):
            ws.append([_clean(v) for v in row])
        best = wb.create_sheet("Best pairs")
        best.append(BEST_PAIR_COLUMNS)
        for e in report.get("best_pairs", []):
            best.append([e[c] for c in BEST_PAIR_COLUMNS])
        out_path = self.output_dir / "statistics.xlsx"
        await asyncio.to_thread(wb.save, str(out_path))
        return str(out_path)

    async def generate_html(self, table: pd.DataFrame, report: Dict[str, Any]) -> str:
        template = self.env.get_template("report_template.html")
        html = template.render(
            generated_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            title="OT-SSL grid report",
            cells=_records(table),
            report=report,
        )
        out_path = self.output_dir / "report.html"
        await asyncio.to_thread(out_path.write_text, html, "utf-8")
        return str(out_path)

    async def generate_all(self, table: pd.DataFrame) -> Dict[str, str]:
        """Statistics, plot data and the best-pairs report in the configured formats."""
        outputs: Dict[str, str] = {}
        report = self.best_pairs_report(table)
        report["plot_data_columns"] = PLOT_COLUMNS

        if "csv" in self.formats:
            outputs["statistics"] = str(_to_csv(table, self.output_dir / "statistics.csv"))
            best = pd.DataFrame(
                [{k: v for k, v in e.items() if k != "sigma_breakdown"} for e in report["best_pairs"]],
                columns=BEST_PAIR_COLUMNS,
            )
            outputs["best_pairs"] = str(_to_csv(best, self.output_dir / "best_pairs.csv"))
            outputs.update({k: str(v) for k, v in self.emit_plot_data(table).items()})
        if "json" in self.formats:
            path = self.output_dir / "report.json"
            payload = {"cells": _records(table), **report}
            await asyncio.to_thread(path.write_text, json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")
            outputs["json"] = str(path)

        tasks = []
        if "html" in self.formats:
            tasks.append(("html", self.generate_html(table, report)))
        if "excel" in self.formats:
            tasks.append(("excel", self.generate_excel(table, report)))
        results = await asyncio.gather(*(t for _, t in tasks))
        for (name, _), path in zip(tasks, results):
            if path:
                outputs[name] = path
        self.logger.info("report written | cells=%s outputs=%s dir=%s", len(table), len(outputs), self.output_dir)
        return outputs
