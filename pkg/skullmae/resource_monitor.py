"""
System resource monitoring using psutil.
CPU, system RAM and the RSS of the training process.
"""

import os
import time
from typing import Any, Dict

import psutil


class ResourceMonitor:
    """Collects CPU and memory snapshots for progress lines."""

    def __init__(self):
        self._process = psutil.Process(os.getpid())
        # First cpu_percent call only primes the counters
        psutil.cpu_percent(interval=None)

    def get_snapshot(self) -> Dict[str, Any]:
        """Collect a resource snapshot."""
        mem = psutil.virtual_memory()
        return {
            "cpu_percent": psutil.cpu_percent(interval=None),
            "ram_used_gb": round(mem.used / (1024 ** 3), 2),
            "ram_total_gb": round(mem.total / (1024 ** 3), 2),
            "process_rss_gb": round(self._process.memory_info().rss / (1024 ** 3), 3),
            "timestamp": time.time(),
        }

    def describe(self) -> str:
        snap = self.get_snapshot()
        return (f"CPU {snap['cpu_percent']:.0f}% | RAM {snap['ram_used_gb']:.1f}/"
                f"{snap['ram_total_gb']:.1f} GB | process {snap['process_rss_gb']:.2f} GB")
