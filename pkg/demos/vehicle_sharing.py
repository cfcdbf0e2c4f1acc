"""Vehicle sharing at the edge: counting cars at an intersection.

Two cars report their location to nearby brokers. A traffic service on a
third broker asks for the number of distinct cars currently at the
intersection ``int_id``; a video analytics app keeps camera frames on the
car's own broker.

    python demos/vehicle_sharing.py
"""

import json
from pathlib import Path

from edgemesh import World, parse_subscription
from edgemesh.grammar import describe

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "vehicle_sharing.json"

data = json.loads(SCENARIO.read_text())

for client in data["clients"]:
    for action in client.get("script", []):
        if action["do"] == "subscribe":
            print(f"{client['id']:>10}: {action['expr']}")
            print(f"{'':>12}{describe(parse_subscription(action['expr']))}")

print()
for strategy in ("bridge", "rendezvous", "icn"):
    world = World({**data, "strategy": strategy})
    report = world.run()
    counts = [d.value for d in world.deliveries() if d.client == "traffic"]
    video = [d.value for d in world.deliveries() if d.client == "video_app"]
    print(f"{strategy:>10}: cars at int_id over time {counts}, "
          f"video results {video}, {report.inter_broker_msgs} inter-broker msgs")
