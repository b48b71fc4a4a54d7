"""
Functions to save and load run artifacts.
Each run gets a directory under the report directory holding the text report, the
report table, and the audit and trace logs the metrics can be recomputed from.
"""
from pathlib import Path
from typing import Dict, Optional

from config import config
from pksim.events import EventLog
from pksim.harness.report import Report
from pksim.logger import setup_logger

logger = setup_logger()

REPORT_FILE = "report.txt"
TABLE_FILE = "metrics.csv"
AUDIT_FILE = "audit.log"
TRACE_FILE = "trace.log"


def run_dir(name: str, report_dir: Optional[Path] = None) -> Path:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
    return Path(report_dir or config.harness.report_dir) / safe


def save_report(name: str, report: Report, logs: Optional[Dict[str, str]] = None,
                report_dir: Optional[Path] = None) -> Optional[Path]:
    """
    Saves report text, table and any extra log texts (file name -> text).

    Returns the directory written, or None if saving failed.
    """
    target = run_dir(name, report_dir)
    try:
        target.mkdir(parents=True, exist_ok=True)

        (target / REPORT_FILE).write_text(report.text(), encoding="utf-8")
        (target / TABLE_FILE).write_text(report.table(), encoding="utf-8")
        logger.debug(f"Saved report with {len(report.rows)} table rows to {target}")

        for file_name, text in (logs or {}).items():
            (target / file_name).write_text(text, encoding="utf-8")
            logger.debug(f"Saved {file_name} ({text.count(chr(10))} lines) to {target}")

        logger.info(f"Saved run artifacts to {target}")
        return target

    except Exception as e:
        logger.error(f"Error saving report for {name}: {e}", exc_info=True)
        return None


def load_log(path: Path, verdict_first: bool = False) -> EventLog:
    """
    Loads a saved audit or trace log.

    If the file does not exist, returns an empty log.
    """
    path = Path(path)
    try:
        if path.exists():
            lines = path.read_text(encoding="utf-8").splitlines()
            log = EventLog.from_lines(path.stem, lines, verdict_first)
            logger.info(f"Loaded {len(log)} events from {path}")
            return log
        logger.info(f"Log file not found ({path}), starting empty.")

    except Exception as e:
        logger.error(f"Error loading log {path}: {e}. Starting empty.", exc_info=True)

    return EventLog(path.stem, verdict_first)
