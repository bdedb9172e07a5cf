#!/usr/bin/env python3
"""
Runtime diagnostics for training and inference runs
"""

import logging
import platform
import sys
from datetime import datetime
from typing import Any, Dict, List, Optional

import numpy as np
import psutil
from PIL import __version__ as pillow_version

from .version import get_version_string


class RuntimeDiagnostics:
    """Host and process information logged at the start of long commands"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def get_system_info(self) -> Dict[str, Any]:
        """Get system information"""
        memory = psutil.virtual_memory()
        return {
            "platform": platform.platform(),
            "machine": platform.machine(),
            "python_version": sys.version.split()[0],
            "cpu_count_logical": psutil.cpu_count(),
            "cpu_count_physical": psutil.cpu_count(logical=False),
            "memory_total": f"{memory.total / (1024**3):.1f} GB",
            "memory_available": f"{memory.available / (1024**3):.1f} GB",
        }

    def get_process_info(self) -> Dict[str, Any]:
        """Get process information"""
        process = psutil.Process()
        return {
            "pid": process.pid,
            "memory_info": f"{process.memory_info().rss / (1024**2):.1f} MB",
            "num_threads": process.num_threads(),
        }

    def get_library_info(self) -> Dict[str, Any]:
        return {
            "numpy": np.__version__,
            "pillow": pillow_version,
        }

    def available_memory(self) -> int:
        return psutil.virtual_memory().available

    def estimate_inference_bytes(self, out_height: int, out_width: int, channels: int,
                                 itemsize: int = 4) -> int:
        """Rough peak for one image: a few channel-wide activations at output resolution"""
        return 4 * channels * out_height * out_width * itemsize

    def recommendations(self, required_bytes: Optional[int] = None) -> List[str]:
        """Generate recommendations based on diagnostics"""
        recs = []
        available = self.available_memory()
        if available < 1024**3:
            recs.append("Low available memory. Consider closing other applications")
        if required_bytes is not None and required_bytes > available:
            recs.append(
                f"Estimated peak of {required_bytes / (1024**3):.1f} GB exceeds available memory; "
                "lower --max-pixels or use a smaller input"
            )
        return recs

    def generate_report(self, required_bytes: Optional[int] = None) -> str:
        """Generate a plain-text diagnostics report"""
        report = ["=" * 60, f"{get_version_string()} - DIAGNOSTICS REPORT",
                  f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}", "=" * 60, ""]
        for title, info in (("SYSTEM INFORMATION", self.get_system_info()),
                            ("PROCESS INFORMATION", self.get_process_info()),
                            ("LIBRARIES", self.get_library_info())):
            report.append(title)
            report.append("-" * 30)
            for key, value in info.items():
                report.append(f"{key.replace('_', ' ').title()}: {value}")
            report.append("")
        recs = self.recommendations(required_bytes)
        if recs:
            report.append("RECOMMENDATIONS")
            report.append("-" * 30)
            report.extend(f"* {rec}" for rec in recs)
        return "\n".join(report)

    def log_summary(self, command: str) -> None:
        """One-line host summary at INFO, recommendations at WARNING"""
        try:
            system = self.get_system_info()
            process = self.get_process_info()
        except psutil.Error as e:
            self.logger.warning(f"Diagnostics unavailable: {e}")
            return
        self.logger.info(
            f"{command}: {system['platform']}, python {system['python_version']}, "
            f"{system['cpu_count_physical']} cores, {system['memory_available']} of {system['memory_total']} free, "
            f"rss {process['memory_info']}"
        )
        for rec in self.recommendations():
            self.logger.warning(rec)
