"""
The synthetic corpus and its planted alignments
===============================================

"""

import numpy as np

from aga.corpus import CorpusConfig, build_world, make_splits

world = build_world(seed=0, config=CorpusConfig())
cfg = world.config
for c in range(cfg.num_classes):
    toks = [world.concepts[k].tokens for k in world.class_concepts[c]]
    print(f"class {c}: concepts {world.class_concepts[c]} tokens {toks}")

train, val, test = make_splits(world)
print("split sizes", len(train), len(val), len(test))
print("labels", np.bincount([p.label for p in train]))

# one sample: the report and where each concept token's patches are
pair = train[0]
ids = pair.text.token_ids[pair.text.mask]
print("label", pair.label, "report", ids.tolist())
grid = np.full((cfg.grid_rows, cfg.grid_cols), ".")
for pos, cells in pair.planted:
    for cell in cells:
        grid.flat[cell] = str(pos % 10)
print("\n".join(" ".join(r) for r in grid))

# planted patches carry the concept signature, the rest is noise
pos, cells = pair.planted[0]
k = next(i for i, c in enumerate(world.concepts) if ids[pos] in c.tokens)
print("signature", np.round(world.concepts[k].signature, 2))
print("a planted patch", np.round(pair.image.patches[min(cells)], 2))
