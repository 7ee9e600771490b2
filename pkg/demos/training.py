"""Training a block with Adam on two small tasks."""

import numpy as np

from uatformer.experiments import ExperimentConfig, moving_average, train_task

for tag in ("sin-train", "sort-train"):
    cfg = ExperimentConfig(experiment=tag).train_config()
    initial, final, history, _ = train_task(tag, seed=0, tcfg=cfg)
    ma = moving_average(history)
    print(f"{tag}: {cfg.steps} Adam steps at lr {cfg.learning_rate:g}")
    print(f"  loss {initial:.4f} -> {final:.4f} ({1 - final / initial:.1%} lower)")
    print("  moving average every 500 steps:", np.round(ma[::500], 4))
