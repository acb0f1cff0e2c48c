"""Does distilled history help, and only when there is history worth having?

Trains lightrdl, no-time and with-pred on two synthetic databases: one where
user activity is persistent (signal 0.9) and one where it is fresh noise each
tick (signal 0). Takes a couple of minutes on one core.
"""
import numpy as np

from relsnap import synth
from relsnap.features import build_dataset
from relsnap.gbdt import train_gbdt
from relsnap.pipeline import LIGHTRDL, NO_TIME, WITH_PRED_MODE, PipelineConfig, fit, test_metric
from relsnap.rgnn import GnnConfig
from relsnap.store import split_times

SEEDS = range(5)

for signal in (0.9, 0.0):
    db, churn, _ = synth.generate(synth.SynthConfig(
        n_users=1000, tx_per_tick=1000.0, latent_scale=1.5, temporal_signal=signal))
    cfg = PipelineConfig(window=1, split=(8, 4, 4), gnn=GnnConfig(epochs=20))
    train_t, _, _ = split_times(churn, *cfg.split)
    teacher = train_gbdt(build_dataset(db, churn, train_t, cfg.features), cfg.gbdt)

    print(f"temporal signal {signal}")
    for mode in (LIGHTRDL, NO_TIME, WITH_PRED_MODE):
        scores = [test_metric(db, churn, cfg, fit(db, churn, cfg, mode=mode, seed=s, teacher=teacher))
                  for s in SEEDS]
        print(f"  {mode:<10} ROCAUC {np.mean(scores):.4f} +- {np.std(scores):.4f}")
