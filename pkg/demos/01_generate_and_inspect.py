"""Generate a small synthetic intersection dataset and poke at its contents.

Run:  python3 demos/01_generate_and_inspect.py
"""

import collections
import os
import tempfile

from trajdistill import scenegen as sg

out = os.path.join(tempfile.gettempdir(), "demo_scenes.jsonl")
cfg = sg.GenConfig(num_scenes=25, seed=7)
sg.write_dataset(cfg, out)
scenes = sg.load_dataset(out)
print(f"wrote and reloaded {len(scenes)} scenes from {out}\n")

# What does one scene look like?
scene = scenes[0]
print(f"scene {scene.scene_id}:")
print(f"  {len(scene.roadgraph)} road polylines "
      f"({collections.Counter(p.kind for p in scene.roadgraph)})")
print(f"  {len(scene.signals)} signals, current states "
      f"{[s.states[-1] for s in scene.signals]}")
print(f"  {len(scene.agents)} agents, "
      f"{len(scene.prediction_targets())} prediction targets")

# Intent multimodality is the whole point of a mixture output: most targets
# approach the intersection with several feasible maneuvers.
counts = collections.Counter()
for s in scenes:
    for agent in s.prediction_targets():
        dist = sg.true_intent_distribution(s, agent.id)
        live = sum(1 for p in dist.values() if p > 0)
        counts[live] += 1
print("\nfeasible-intent count per target:", dict(sorted(counts.items())))

agent = scene.prediction_targets()[0]
print(f"\ntarget {agent.id}: realized intent {agent.realized_intent!r}, "
      f"intent distribution {sg.true_intent_distribution(scene, agent.id)}")
print(f"history shape {agent.history.shape}, future shape {agent.future.shape}")
