"""Tour of the synthetic driving scenes and the scene normalization."""

# %%
from collections import Counter
from pathlib import Path

import numpy as np

from laneattn import synthetic
from laneattn.mapgeom import heading_change

data = synthetic.generate_synthetic(synthetic.GeneratorConfig.preset("tiny"), seed=0)
print(len(data.scenes), "scenes,", len(data.graph.lanes), "lanes")
print(Counter(s.behavior for s in data.scenes))

# %% every scene lives in its own agent frame: last observed point at the origin, heading +x
s = data.scenes[0]
print(s.scene_id, s.behavior, "obs end", s.obs_pos[-1], "lanes", s.lane_ids)

# %% the non-straight flag: turns and lane changes, not straight keeps
for behavior in synthetic.BEHAVIORS:
    group = [x for x in data.scenes if x.behavior == behavior]
    if group:
        turn = np.mean([heading_change(np.vstack([x.obs_pos, x.future])) for x in group])
        print(f"{behavior:18s} NS {np.mean([x.ns_flag for x in group]):.2f}  heading change {turn:6.1f} deg")

# %% the on-disk layout matches what the CLI reads
out = data.write(Path("demo_data"))
print(sorted(p.name for p in out.iterdir()))
