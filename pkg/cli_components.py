"""
CLI Components
Handles status lines, result tables and exit codes shared by every subcommand.
"""

from typing import List, Dict, Any

import pandas as pd

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_INFEASIBLE = 3
EXIT_CHECK_FAILED = 4

STATUS_MARKERS = {"success": "✅", "error": "❌", "warning": "⚠️", "result": "📊", "build": "🔧", "start": "🚀"}


# Print one status line with its marker
def render_status(message: str, kind: str = "success"):
    """Print a status line prefixed by the marker for kind."""
    print(f"{STATUS_MARKERS.get(kind, '')} {message}".strip())


# Print a titled table
def render_table(frame: pd.DataFrame, title: str, max_rows: int = 20):
    """Print a titled table, truncated to max_rows."""
    print(f"\n### 📊 {title}")
    if frame.empty:
        print("(no rows)")
        return
    print(frame.head(max_rows).to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    if len(frame) > max_rows:
        print(f"... {len(frame) - max_rows} more rows")


# Print key-value pairs of a summary dict
def render_summary(summary: Dict[str, Any], title: str):
    print(f"\n### {title}")
    for key, value in summary.items():
        if isinstance(value, dict):
            continue
        print(f"  {key}: {value:.6g}" if isinstance(value, float) else f"  {key}: {value}")


# Report acceptance checks and map them to an exit code
def render_check_result(failures: List[str]) -> int:
    """Print check failures; returns EXIT_CHECK_FAILED if any, EXIT_OK otherwise."""
    if not failures:
        render_status("All acceptance checks passed", "success")
        return EXIT_OK
    for failure in failures:
        render_status(f"Check failed: {failure}", "error")
    return EXIT_CHECK_FAILED
