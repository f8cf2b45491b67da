"""Why distill at all? Latency scaling of the two model families.

The teacher re-encodes the scene once per agent, so full-scene inference
cost grows superlinearly in the agent count (each agent also attends to all
the others). The student encodes the scene once and decodes each agent from
a feature-map patch, so its cost is nearly flat in the agent count.

Run:  python3 demos/03_latency_scaling.py   (takes a minute or two)
"""

import os
import tempfile

import numpy as np

from trajdistill import benchlat as bl
from trajdistill import models as md

agents = [4, 8, 16, 32, 64]
m_road = 16
sizes = [(n, m_road) for n in agents]

teacher_cfg = md.TeacherConfig(max_neighbors=max(agents), max_polylines=m_road)
teacher = md.init_params(teacher_cfg, np.random.default_rng(0))
student = md.init_params(md.StudentConfig(), np.random.default_rng(0))

points = bl.run_bench("teacher", teacher, sizes, reps=5)
points += bl.run_bench("student", student, sizes, reps=5)

print(f"{'model':<9} {'agents':>6} {'median ms':>10} {'est. Mflop':>11}")
for p in points:
    print(f"{p.model:<9} {p.n_agents:>6} {p.median_s * 1e3:>10.2f} {p.flops / 1e6:>11.1f}")

for kind in ("teacher", "student"):
    sub = [p for p in points if p.model == kind]
    slope, r2 = bl.fit_scaling([p.n_agents for p in sub], [p.median_s for p in sub])
    print(f"\n{kind}: latency ~ agents^{slope:.2f} (R^2 {r2:.3f})")

svg = os.path.join(tempfile.gettempdir(), "scaling_demo.svg")
bl.render_scaling_svg(points, svg)
print(f"\nlog-log plot written to {svg}")
