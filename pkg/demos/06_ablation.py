"""
Variants side by side
=====================

Full model, global loss only, no cross-attention, and frozen thresholds,
each trained briefly on the same corpus.
"""

from aga.corpus import build_world, make_splits
from aga.evaluation import evaluate
from aga.trainer import TrainConfig, fit, parse_variant

world = build_world(seed=1)
train, val, test = make_splits(world)

for variant in ("full", "global-only", "no-bcga", "fixed"):
    cfg = TrainConfig(epochs=5, seed=1, **parse_variant(variant))
    state = fit(cfg, train, vocab=world.config.vocab)
    res = evaluate(state, world, train, test)
    print(f"{variant:12s} prec@5 {res['prec@5']:.3f}  fidelity {res['fidelity']:.3f}  "
          f"sigma_tg {res['sigma_tg']:.4f}")
