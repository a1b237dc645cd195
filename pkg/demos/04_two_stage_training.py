"""
Two-stage training on synthetic faces
=====================================

Stage 1 fits the landmark branch alone. Stage 2 copies its first two parts into
E_f and trains everything jointly: each paired batch gets one discriminator
update (D_l, D_d on detached features) and one generator update under the
weighted joint objective. The best validation epoch is then fine-tuned at a
tenth of the learning rate.

The sizes here are tiny so the script finishes in under a minute; the
acceptance suite runs the full-size version.
"""

import tempfile

import numpy as np

from audsr.datapipe import FaceDataset, Geometry, SynthSpec, synth_dataset
from audsr.netblocks import BlockConfig
from audsr.trainer import (
    FinetuneConfig,
    MainConfig,
    PretrainConfig,
    TrainConfig,
    evaluate_au,
    pretrain_landmark_branch,
    select_and_finetune,
    train_main,
)

spec = SynthSpec(image_size=36, n_source_train=32, n_source_val=8, n_target_train=32,
                 n_target_val=8, n_target_test=8)
manifest = synth_dataset(spec, seed=0, out_dir=tempfile.mkdtemp(prefix="audsr_demo_"))
ds = FaceDataset(manifest, Geometry.for_crop(32))

cfg = TrainConfig(
    block=BlockConfig(widths=(4, 8, 8, 16, 16), in_channels=1, resolution=32, reduction=4,
                      fc_hidden=32, cbam_kernel=3, au_pool="max"),
    pretrain=PretrainConfig(lr=1e-3, batch_size=8, epochs=15),
    main=MainConfig(lr=1e-3, batch_size=8, epochs=4, decay_every=2),
    finetune=FinetuneConfig(epochs=1),
    seed=0,
)

stage1 = pretrain_landmark_branch(cfg, ds)
print(f"stage 1: best epoch {stage1.best_epoch}, validation landmark error {stage1.best_error:.3f}")

stage2 = train_main(cfg, ds, stage1.branch)
log = stage2.runlog
for name in ("c", "l", "adl", "adf", "au", "fl"):
    s = log.series(name)
    print(f"  L_{name:4s} first {s[0]:9.4f}  last {s[-1]:9.4f}")
print("  D_d score on reconstructions, last 4 steps:", np.round(log.series("score_recon")[-4:], 3))
for rec in log.epochs:
    print(f"  epoch {rec['epoch']}: lr {rec['lr']:.2e}, validation F1 {rec['val_f1']:.3f}")

final = select_and_finetune(cfg, log, stage2.checkpoints, ds)
kept = "fine-tuned" if final.chose_finetuned else "selected"
print(f"selected epoch {final.selected.epoch}; kept the {kept} model")
rep = evaluate_au(final.nets, ds, manifest.select("target", "test"))
print(rep.to_table(), end="")
