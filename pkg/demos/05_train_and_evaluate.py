"""
Short training run, evaluation and heatmaps
===========================================

"""

import os
import tempfile

import numpy as np

from aga.corpus import build_world, make_splits
from aga.evaluation import evaluate, export_heatmap, token_alphas
from aga.trainer import TrainConfig, TrainState, fit

world = build_world(seed=0)
train, val, test = make_splits(world)

untrained = TrainState.fresh(TrainConfig(), world.config.channels, world.config.vocab)
before = evaluate(untrained, world, train, test)

out = tempfile.mkdtemp(prefix="aga_demo_")
state = fit(TrainConfig(epochs=5), train, out_dir=out, vocab=world.config.vocab)
after = evaluate(state, world, train, test)

for key in ("prec@1", "prec@5", "fidelity"):
    print(f"{key:9s} {before[key]:.3f} -> {after[key]:.3f}")
print("zero-shot", after["zero_shot"])
print("probe AUC by label fraction", after["probe"])
print("gates", state.gate_tg.sigma, state.gate_vg.sigma)
print(open(os.path.join(out, "gates.csv")).read().splitlines()[-3:])

# heatmap for the first concept token of the first test pair
pair = test[0]
alpha = token_alphas(state.model, pair, state.gate_tg.sigma)
pos, cells = pair.planted[0]
pgm, table = export_heatmap(alpha[pos], world.config.grid_rows, world.config.grid_cols,
                            f"token {pair.text.token_ids[pos]}", os.path.join(out, "heatmap"))
print("planted cells", sorted(cells), "top cells", np.argsort(-alpha[pos])[:len(cells)].tolist())
print(open(pgm).read())
