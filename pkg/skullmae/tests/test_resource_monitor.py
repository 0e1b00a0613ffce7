"""
Tests for the psutil resource snapshot
"""

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from skullmae.resource_monitor import ResourceMonitor


class TestResourceMonitor:
    """Tests for ResourceMonitor"""

    def test_snapshot_fields(self):
        """Test the snapshot reports CPU, RAM and process memory"""
        snap = ResourceMonitor().get_snapshot()

        assert set(snap) == {"cpu_percent", "ram_used_gb", "ram_total_gb", "process_rss_gb", "timestamp"}
        assert 0.0 < snap["ram_total_gb"]
        assert 0.0 <= snap["ram_used_gb"] <= snap["ram_total_gb"]
        assert snap["process_rss_gb"] > 0.0

    def test_describe(self):
        """Test the progress-line summary"""
        line = ResourceMonitor().describe()

        assert line.startswith("CPU ")
        assert "RAM" in line
        assert line.endswith("GB")
