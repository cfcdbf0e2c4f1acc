"""Flooding vs. rendezvous vs. delivery trees on a small broker overlay.

Every strategy must hand subscribers the same messages; they differ in how
many frames cross inter-broker links and in control overhead.

    python demos/strategy_tradeoff.py [scenario.json]
"""

import json
import sys
from pathlib import Path

from edgemesh import World

root = Path(__file__).resolve().parents[1] / "scenarios"
paths = [Path(p) for p in sys.argv[1:]] or [root / "triangle.json", root / "star.json"]

print(f"{'scenario':<12}{'strategy':<12}{'inter-broker':>13}{'control':>9}{'p95 ms':>9}  digest")
for path in paths:
    data = json.loads(path.read_text())
    for strategy in ("bridge", "rendezvous", "icn"):
        report = World({**data, "strategy": strategy}).run()
        print(f"{path.stem:<12}{strategy:<12}{report.inter_broker_msgs:>13}{report.control_msgs:>9}"
              f"{report.latency_p95:>9.1f}  {report.delivery_digest[:12]}")
