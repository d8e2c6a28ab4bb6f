"""
Per-replication dump of Monte-Carlo statistics.

Each check writes one CSV under the output directory with the columns
replication, statistic, threshold, exceeded. Rows are held in memory and
written on flush, sorted by replication, so the file does not depend on
which worker finished first.
"""

import os
import threading
from typing import Dict, List, Optional, Sequence

import pandas as pd

from shared.protocol import REPLICATION_COLUMNS
from shared.utils import setup_logging


logger = setup_logging(__name__)


class ReplicationLogger:
    """
    Collects per-replication rows for every check and writes them as CSV.

    Layout:
      <root>/
          <check>.replications.csv
          ...
    """

    def __init__(self, root: str):
        self.root = root
        os.makedirs(self.root, exist_ok=True)
        self._rows: Dict[str, List[dict]] = {}
        self._lock = threading.Lock()
        logger.info(f"ReplicationLogger → {self.root}")

    def log(self, check: str, replication: int, statistic: float,
            threshold: Optional[float], exceeded: Optional[bool]) -> None:
        """Record one replication of one check."""
        row = {
            "replication": int(replication),
            "statistic": float(statistic),
            "threshold": None if threshold is None else float(threshold),
            "exceeded": None if exceeded is None else bool(exceeded),
        }
        with self._lock:
            self._rows.setdefault(check, []).append(row)

    def log_many(self, check: str, statistics: Sequence[float], threshold: Optional[float],
                 exceeded: Optional[Sequence[bool]] = None) -> None:
        for r, value in enumerate(statistics):
            self.log(check, r, value, threshold, None if exceeded is None else exceeded[r])

    def path_for(self, check: str) -> str:
        return os.path.join(self.root, f"{check}.replications.csv")

    def flush(self) -> List[str]:
        """Write every collected check; returns the paths written."""
        written = []
        with self._lock:
            for check, rows in sorted(self._rows.items()):
                table = pd.DataFrame(rows, columns=REPLICATION_COLUMNS).sort_values("replication")
                path = self.path_for(check)
                table.to_csv(path, index=False)
                written.append(path)
            self._rows.clear()
        for path in written:
            logger.info(f"Wrote {path}")
        return written

    def close(self) -> None:
        self.flush()
