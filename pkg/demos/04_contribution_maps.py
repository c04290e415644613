"""Which atoms shape the molecular feature?

Before aggregation every atom holds a scalar and a vector feature
stack.  Under sum aggregation an atom's influence is its share of the
total feature mass; under max aggregation it is the fraction of
channels the atom wins.  The resulting per-atom weights sum to one and
are ready for heat-map rendering.
"""

import os
import sys

from molgraph3d.analyze import contribution_map, write_contributions
from molgraph3d.chemper import build_graph_tensors
from molgraph3d.gcn3d import forward
from molgraph3d.train import load_checkpoint
from _common import CHECKPOINT, OUT_DIR, synthetic_records

if not os.path.exists(CHECKPOINT):
    sys.exit("run 02_train_regression.py first to produce the demo checkpoint")

params, _, _ = load_checkpoint(CHECKPOINT)
records = synthetic_records(n=60, seed=5)[:4]

maps = []
for rec in records:
    res = forward(build_graph_tensors(rec.molecule), params)
    cmap = contribution_map(res, molecule_id=rec.molecule.id)
    maps.append(cmap)
    elems = [a.element for a in rec.molecule.atoms]
    print(f"{rec.molecule.id} ({''.join(elems)}):")
    for k, (e, sw, vw) in enumerate(zip(elems, cmap.scalar_weights,
                                        cmap.vector_weights)):
        bar = "#" * int(round(40 * sw))
        print(f"  atom {k} {e}: scalar {sw:.3f} vector {vw:.3f}  {bar}")
    total = sum(cmap.scalar_weights)
    print(f"  (scalar weights sum to {total:.9f})\n")

out_path = os.path.join(OUT_DIR, "contributions.json")
write_contributions(maps, out_path)
print(f"marked-up weights written to {out_path} for external rendering")
