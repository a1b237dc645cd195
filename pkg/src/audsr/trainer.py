"""Two-stage training: landmark-branch pretraining, then joint adversarial
separation/reconstruction with alternating discriminator and generator updates,
followed by checkpoint selection and fine-tuning."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datapipe import Batch, FaceDataset, batches
from .diffcore import (
    CheckpointError,
    NonFiniteError,
    ParamStore,
    Tensor,
    load_checkpoint,
    save_checkpoint,
)
from .evalmod import ConfusionCounts, Report, report, update
from .losses import (
    ALL_PAIRS,
    FULL_RECONSTRUCTION_PAIRS,
    AuTarget,
    LandmarkTarget,
    LossError,
    LossWeights,
    au_class_weights,
    au_loss,
    contrastive_alignment_loss,
    domain_d_step,
    domain_g_step,
    landmark_feature_loss,
    landmark_loss,
    landmark_removal_d_step,
    landmark_removal_g_step,
    total_loss,
)
from .netblocks import (
    BlockConfig,
    LandmarkBranch,
    NetworkSet,
    build_landmark_branch,
    build_networks,
    full_graph_forward,
    transfer_init,
)

log = logging.getLogger(__name__)

ABLATIONS = {
    "BL": {"enable_ML": False, "enable_AS": False},
    "ML": {"enable_ML": True, "enable_AS": False},
    "AS-full": {"enable_ML": True, "enable_AS": True},
}


class TrainingAborted(RuntimeError):
    """A loss went non-finite; ``last_good`` holds the parameters before the failing step."""

    def __init__(self, message: str, stage: str, step: int, component: str,
                 last_good: dict[str, np.ndarray] | None = None):
        super().__init__(message)
        self.stage, self.step, self.component = stage, step, component
        self.last_good = last_good


# -- configuration ---------------------------------------------------------------------
@dataclass
class PretrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 20
    max_steps: int | None = None
    augment: bool = True


@dataclass
class MainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 12
    decay_every: int = 4
    lr_table: list[float] | None = None
    d_steps: int = 1
    g_steps: int = 1
    max_steps: int | None = None
    augment: bool = True


@dataclass
class FinetuneConfig:
    lr_mult: float = 0.1
    epochs: int = 1
    max_steps: int | None = None


@dataclass
class TrainConfig:
    block: BlockConfig = field(default_factory=BlockConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    main: MainConfig = field(default_factory=MainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    enable_ML: bool = True
    enable_AS: bool = True
    hard_tie: bool = False
    rule: str = "adam"
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        for lr in (self.pretrain.lr, self.main.lr):
            if not lr > 0:
                raise ValueError("learning rates must be positive")
        for n in (self.pretrain.epochs, self.main.epochs, self.finetune.epochs):
            if n < 0:
                raise ValueError("epoch counts must be >= 0")
        if self.main.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.main.lr_table is not None:
            table = list(self.main.lr_table)
            if any(b > a for a, b in zip(table, table[1:])) or any(v < 0 for v in table):
                raise ValueError("lr_table must be non-negative and non-increasing")
        if self.rule not in ("adam", "sgd"):
            raise ValueError(f"unknown update rule {self.rule!r}")
        if self.main.d_steps < 1 or self.main.g_steps < 1:
            raise ValueError("d_steps and g_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block"] = self.block.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kinds = {"block": BlockConfig, "weights": LossWeights, "pretrain": PretrainConfig,
                 "main": MainConfig, "finetune": FinetuneConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if k in kinds:
                sub_known = {f.name for f in fields(kinds[k])}
                bad = set(v) - sub_known
                if bad:
                    raise ValueError(f"unknown config keys {sorted(f'{k}.{b}' for b in bad)}")
                kwargs[k] = kinds[k](**v)
            else:
                kwargs[k] = v
        return cls(**kwargs)

    def with_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
        out = copy.deepcopy(self)
        for k, v in ABLATIONS[name].items():
            setattr(out, k, v)
        return out


def lr_for_epoch(epoch: int, cfg: MainConfig, base: float | None = None) -> float:
    """Learning rate of 1-based ``epoch``: constant for the first block of
    ``decay_every`` epochs, then stepping linearly toward zero at block boundaries."""
    base = cfg.lr if base is None else base
    if cfg.lr_table is not None:
        table = cfg.lr_table
        return float(table[min(epoch - 1, len(table) - 1)])
    n_blocks = max(1, math.ceil(cfg.epochs / cfg.decay_every))
    block = (epoch - 1) // cfg.decay_every
    return base * max(0.0, 1.0 - block / n_blocks)


# -- run log -------------------------------------------------------------------------
class RunLog:
    def __init__(self):
        self.steps: list[dict] = []
        self.epochs: list[dict] = []

    def log_step(self, step: int, stage: str, **values) -> None:
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError(f"step {step} does not increase past {self.steps[-1]['step']}")
        rec = {"step": step, "stage": stage}
        for k, v in values.items():
            v = float(v) if isinstance(v, (int, float, np.floating)) and not isinstance(v, bool) else v
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"non-finite value logged for {k} at step {step}")
            rec[k] = v
        self.steps.append(rec)

    def log_epoch(self, epoch: int, stage: str, **values) -> None:
        self.epochs.append({"epoch": epoch, "stage": stage, **values})

    def series(self, key: str, stage: str | None = None) -> np.ndarray:
        return np.array([r[key] for r in self.steps if key in r and (stage is None or r["stage"] == stage)])

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **rec}, sort_keys=True) + "\n")

    def extend(self, other: "RunLog") -> None:
        for rec in other.steps:
            self.log_step(**rec)
        self.epochs.extend(other.epochs)


# -- helpers ----------------------------------------------------------------------------
def _stores_arrays(stores: dict[str, ParamStore]) -> dict[str, np.ndarray]:
    out = {}
    for name, st in stores.items():
        for k, t in st.items():
            out[f"{name}/{k}"] = t.data.copy()
    return out


def _landmark_target(b: Batch) -> LandmarkTarget:
    return LandmarkTarget(b.landmarks, b.inter_ocular)


def landmark_error(pred: np.ndarray, target: np.ndarray, inter_ocular: np.ndarray) -> float:
    """Mean absolute per-coordinate error in units of the inter-ocular distance."""
    return float(np.mean(np.abs(pred - target) / inter_ocular[:, None]))


def evaluate_landmarks(branch: LandmarkBranch, dataset: FaceDataset, indices: Sequence[int],
                       batch_size: int = 16) -> float:
    errs, counts = [], []
    for b in dataset.batches(indices, batch_size, seed=0, augment_enabled=False,
                             shuffle=False, drop_last=False):
        pred = branch(Tensor(b.images)).data
        errs.append(landmark_error(pred, b.landmarks, b.inter_ocular))
        counts.append(len(b.indices))
    return float(np.average(errs, weights=counts)) if errs else float("nan")


def predict_au(nets: NetworkSet, images: np.ndarray) -> np.ndarray:
    return nets.E_au(nets.E_f(Tensor(images))).data


def evaluate_au(nets: NetworkSet, dataset: FaceDataset, indices: Sequence[int],
                threshold: float = 0.5, batch_size: int = 16) -> Report:
    counts = ConfusionCounts.zeros(nets.cfg.n_au)
    for b in dataset.batches(indices, batch_size, seed=0, augment_enabled=False,
                             shuffle=False, drop_last=False):
        if b.au is None:
            raise ValueError("evaluation records need AU labels")
        counts = update(counts, predict_au(nets, b.images), b.au, threshold)
    return report(counts, dataset.manifest.au_names)


# -- stage 1 -----------------------------------------------------------------------------
@dataclass
class PretrainResult:
    branch: LandmarkBranch
    runlog: RunLog
    best_epoch: int | None
    best_error: float | None


def pretrain_landmark_branch(config: TrainConfig, dataset: FaceDataset,
                             train_indices: Sequence[int] | None = None,
                             val_indices: Sequence[int] | None = None,
                             branch: LandmarkBranch | None = None) -> PretrainResult:
    """Fit the landmark branch with the raw landmark loss; keep the best validation epoch."""
    pc = config.pretrain
    man = dataset.manifest
    train_indices = list(man.select("source", "train") if train_indices is None else train_indices)
    if val_indices is None:
        val_indices = man.select("source", "val") or train_indices
    branch = branch or build_landmark_branch(config.block, seed=config.seed)
    runlog = RunLog()
    best = (None, float("inf"), _stores_arrays({"landmark": branch.params}))
    step = 0
    for epoch in range(1, pc.epochs + 1):
        for b in dataset.batches(train_indices, pc.batch_size, config.seed, epoch, pc.augment):
            if pc.max_steps is not None and step >= pc.max_steps:
                break
            last_good = _stores_arrays({"landmark": branch.params})
            branch.params.zero_grad()
            try:
                pred = branch(Tensor(b.images))
                loss = landmark_loss(pred, _landmark_target(b))
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingAborted(f"stage 1 step {step + 1}: {exc}", "pretrain", step + 1,
                                      "fl", last_good) from exc
            branch.params.step(config.rule, pc.lr)
            step += 1
            runlog.log_step(step, "pretrain", epoch=epoch, fl=loss.item(), lr=pc.lr,
                            error=landmark_error(pred.data, b.landmarks, b.inter_ocular))
        val_err = evaluate_landmarks(branch, dataset, val_indices)
        runlog.log_epoch(epoch, "pretrain", val_landmark_error=val_err)
        log.info("pretrain epoch %d: val landmark error %.4f", epoch, val_err)
        if val_err < best[1]:
            best = (epoch, val_err, _stores_arrays({"landmark": branch.params}))
        if pc.max_steps is not None and step >= pc.max_steps:
            break
    if best[0] is not None:
        for k, t in branch.params.items():
            t.data = best[2][f"landmark/{k}"].copy()
    return PretrainResult(branch, runlog, best[0], None if best[0] is None else best[1])


# -- stage 2 -----------------------------------------------------------------------------
@dataclass
class Checkpoint:
    epoch: int
    arrays: dict[str, np.ndarray]
    manifest: dict
    val_f1: float
    path: str | None = None


class MainTrainer:
    """Owns one NetworkSet and performs alternating discriminator/generator updates."""

    def __init__(self, config: TrainConfig, dataset: FaceDataset, nets: NetworkSet):
        self.config = config
        self.dataset = dataset
        self.nets = nets
        rates = dataset.manifest.au_rates
        if rates is None:
            raise ValueError("manifest has no labelled source training records")
        self.class_weights = au_class_weights(rates)
        self.mean_face = dataset.mean_face()
        self.pairs = ALL_PAIRS if config.enable_AS else FULL_RECONSTRUCTION_PAIRS
        if not config.enable_AS:
            nets.set_projector_identity(True)
        self.step_index = 0

    # parameter groups
    def d_stores(self) -> dict[str, ParamStore]:
        return self.nets.discriminator_stores()

    def g_stores(self) -> dict[str, ParamStore]:
        stores = self.nets.generator_stores()
        if not self.config.enable_ML:
            stores.pop("landmark")
        if not self.config.enable_AS or next(iter(self.nets.projectors.values())).identity:
            for p in self.nets.projectors.values():
                stores.pop(p.name)
        return stores

    def _targets(self, src: Batch, tgt: Batch):
        return (_landmark_target(src), _landmark_target(tgt),
                AuTarget(src.au, self.class_weights))

    def _guard(self, name: str, fn):
        try:
            value = fn()
        except NonFiniteError as exc:
            raise TrainingAborted(f"step {self.step_index + 1}: component {name!r}: {exc}", "main",
                                  self.step_index + 1, name) from exc
        if not np.isfinite(value.data).all():
            raise TrainingAborted(f"step {self.step_index + 1}: component {name!r} is not finite",
                                  "main", self.step_index + 1, name)
        return value

    def _forward(self, images_s: Tensor, images_t: Tensor):
        try:
            return full_graph_forward(self.nets, images_s, images_t)
        except NonFiniteError as exc:
            raise TrainingAborted(f"step {self.step_index + 1}: forward pass: {exc}", "main",
                                  self.step_index + 1, "forward") from exc

    def d_step(self, bundle, src_lm: LandmarkTarget, tgt_lm: LandmarkTarget, lr: float) -> dict:
        """One discriminator update on detached features; generator parameters are untouched."""
        nets, w = self.nets, self.config.weights
        stores = self.d_stores()
        for st in stores.values():
            st.zero_grad()
        adl = self._guard("adl_d", lambda: landmark_removal_d_step(nets.D_l, bundle.F_sb, bundle.F_tb,
                                                                   src_lm, tgt_lm))
        adf = self._guard("adf_d", lambda: domain_d_step(nets.D_d, bundle))
        coop = self._guard("l_d", lambda: landmark_feature_loss(
            nets.D_l, bundle.F_sl.detach(), bundle.F_tl.detach(), src_lm, tgt_lm))
        loss = self._guard("d_total", lambda: adl * w.adl + adf * w.adf + coop * w.l)
        loss.backward()
        for st in stores.values():
            st.step(self.config.rule, lr)
        return {"adl_d": adl.item(), "adf_d": adf.item(), "l_d": coop.item()}

    def g_step(self, bundle, images_s: Tensor, src_lm: LandmarkTarget, tgt_lm: LandmarkTarget,
               au_t: AuTarget, lr: float) -> dict:
        """One generator update under the weighted joint objective; discriminators are untouched."""
        nets, cfg = self.nets, self.config
        for st in nets.stores().values():
            st.zero_grad()
        projectors = nets.projectors if cfg.enable_AS else None
        comps: dict[str, Tensor] = {}
        comps["c"] = self._guard("c", lambda: contrastive_alignment_loss(bundle, projectors, self.pairs))
        comps["l"] = self._guard("l", lambda: landmark_feature_loss(nets.D_l, bundle.F_sl, bundle.F_tl,
                                                                    src_lm, tgt_lm))
        comps["adl"] = self._guard("adl", lambda: landmark_removal_g_step(
            nets.D_l, bundle.F_sb, bundle.F_tb, src_lm, tgt_lm, self.mean_face))
        scores = {}

        def _adf():
            loss, sc = domain_g_step(nets.D_d, bundle, return_scores=True)
            scores.update(sc)
            return loss

        comps["adf"] = self._guard("adf", _adf)
        comps["au"] = self._guard("au", lambda: au_loss(nets.E_au(bundle.F_s), au_t)
                                  + au_loss(nets.E_au(bundle.F_sltb), au_t))
        if cfg.enable_ML:
            comps["fl"] = self._guard("fl", lambda: landmark_loss(nets.landmark(images_s), src_lm))
        try:
            total = total_loss(cfg.weights, comps)
        except LossError as exc:
            raise TrainingAborted(str(exc), "main", self.step_index + 1, "total") from exc
        total.backward()
        for st in self.g_stores().values():
            st.step(cfg.rule, lr)
        out = {k: v.item() for k, v in comps.items()}
        out["total"] = total.item()
        out["score_sltb"] = float(scores["F_sltb"].mean())
        out["score_sbtl"] = float(scores["F_sbtl"].mean())
        out["score_recon"] = 0.5 * (out["score_sltb"] + out["score_sbtl"])
        return out

    def train_step(self, src: Batch, tgt: Batch, lr: float, runlog: RunLog, stage: str,
                   epoch: int) -> dict:
        src_lm, tgt_lm, au_t = self._targets(src, tgt)
        images_s, images_t = Tensor(src.images), Tensor(tgt.images)
        record: dict = {}
        # discriminator updates do not change the features, so one forward serves both
        bundle = self._forward(images_s, images_t)
        for _ in range(self.config.main.d_steps):
            record.update(self.d_step(bundle, src_lm, tgt_lm, lr))
        for k in range(self.config.main.g_steps):
            if k:
                bundle = self._forward(images_s, images_t)
            record.update(self.g_step(bundle, images_s, src_lm, tgt_lm, au_t, lr))
        self.step_index += 1
        runlog.log_step(self.step_index, stage, epoch=epoch, lr=lr, **record)
        return record

    def run_epoch(self, epoch: int, lr: float, runlog: RunLog, stage: str,
                  max_steps: int | None = None) -> int:
        done = 0
        mc = self.config.main
        for src, tgt in batches(self.dataset, mc.batch_size, self.config.seed, epoch,
                                augment_enabled=mc.augment):
            if max_steps is not None and done >= max_steps:
                break
            self.train_step(src, tgt, lr, runlog, stage, epoch)
            done += 1
        return done

    def validate(self, indices: Sequence[int]) -> Report:
        return evaluate_au(self.nets, self.dataset, indices, self.config.threshold)


def init_networks(config: TrainConfig, branch: LandmarkBranch | None) -> NetworkSet:
    """Fresh NetworkSet; with multi-task learning on, the pretrained branch is copied
    in and its parts 1-2 initialise E_f."""
    nets = build_networks(config.block, seed=config.seed + 1, tie_stem=config.hard_tie)
    if config.enable_ML:
        if branch is None:
            raise ValueError("multi-task learning needs a pretrained landmark branch")
        for k, t in nets.landmark.params.items():
            t.data = branch.params[k].data.copy()
        transfer_init(nets.E_f, branch)
    return nets


@dataclass
class TrainResult:
    nets: NetworkSet
    runlog: RunLog
    checkpoints: list[Checkpoint]
    trainer: MainTrainer


def train_main(config: TrainConfig, dataset: FaceDataset, branch: LandmarkBranch | None,
               val_indices: Sequence[int] | None = None, out_dir=None,
               nets: NetworkSet | None = None) -> TrainResult:
    """Joint training for ``config.main.epochs`` epochs with per-epoch validation snapshots."""
    mc = config.main
    nets = nets or init_networks(config, branch)
    trainer = MainTrainer(config, dataset, nets)
    if val_indices is None:
        val_indices = dataset.manifest.select("target", "val")
    runlog = RunLog()
    checkpoints: list[Checkpoint] = []
    out = Path(out_dir) if out_dir is not None else None
    for epoch in range(1, mc.epochs + 1):
        remaining = None if mc.max_steps is None else mc.max_steps - trainer.step_index
        if remaining is not None and remaining <= 0:
            break
        lr = lr_for_epoch(epoch, mc)
        trainer.run_epoch(epoch, lr, runlog, "main", remaining)
        rep = trainer.validate(val_indices) if len(val_indices) else None
        f1 = rep.mean_f1 if rep is not None else float("nan")
        runlog.log_epoch(epoch, "main", val_f1=f1, lr=lr, steps=trainer.step_index)
        log.info("main epoch %d: lr %.3g, val F1 %.4f", epoch, lr, f1)
        ck = Checkpoint(epoch, nets.arrays(), nets.manifest(), f1)
        if out is not None:
            ck.path = str(out / f"main_epoch{epoch:03d}.ckpt")
            save_networks(nets, ck.path, extra={"epoch": epoch, "val_f1": f1})
        checkpoints.append(ck)
    return TrainResult(nets, runlog, checkpoints, trainer)


def select_checkpoint(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Highest validation F1; the earlier epoch wins a tie."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    best = checkpoints[0]
    for ck in checkpoints[1:]:
        if ck.val_f1 > best.val_f1:
            best = ck
    return best


@dataclass
class FinetuneResult:
    nets: NetworkSet
    selected: Checkpoint
    finetuned_f1: float | None
    chose_finetuned: bool
    runlog: RunLog


def select_and_finetune(config: TrainConfig, runlog: RunLog | None, checkpoints: Sequence[Checkpoint],
                        dataset: FaceDataset, val_indices: Sequence[int] | None = None) -> FinetuneResult:
    """Pick the best checkpoint, fine-tune it at lr * lr_mult, keep whichever validates higher."""
    selected = select_checkpoint(checkpoints)
    nets = build_networks(BlockConfig.from_dict(selected.manifest["config"]), seed=0,
                          tie_stem=selected.manifest.get("tied", False))
    nets.load(selected.arrays, selected.manifest)
    ft_log = RunLog()
    fc = config.finetune
    if fc.epochs == 0:
        return FinetuneResult(nets, selected, None, False, ft_log)
    if val_indices is None:
        val_indices = dataset.manifest.select("target", "val")
    tuned = nets.clone()
    trainer = MainTrainer(config, dataset, tuned)
    if runlog is not None and runlog.steps:
        trainer.step_index = runlog.steps[-1]["step"]
    lr = config.main.lr * fc.lr_mult
    done = 0
    for epoch in range(1, fc.epochs + 1):
        remaining = None if fc.max_steps is None else fc.max_steps - done
        if remaining is not None and remaining <= 0:
            break
        done += trainer.run_epoch(selected.epoch + epoch, lr, ft_log, "finetune", remaining)
    f1 = trainer.validate(val_indices).mean_f1
    ft_log.log_epoch(selected.epoch, "finetune", val_f1=f1, lr=lr)
    if f1 > selected.val_f1:
        return FinetuneResult(tuned, selected, f1, True, ft_log)
    return FinetuneResult(nets, selected, f1, False, ft_log)


# -- checkpoint files --------------------------------------------------------------------
def save_networks(nets: NetworkSet, path, extra: dict | None = None) -> None:
    meta = {"kind": "networks", "networks": nets.manifest(), **(extra or {})}
    save_checkpoint(path, nets.arrays(), meta)


def load_networks(path) -> tuple[NetworkSet, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "networks":
        raise CheckpointError(f"{path}: not a network checkpoint")
    man = meta["networks"]
    nets = build_networks(BlockConfig.from_dict(man["config"]), seed=0, tie_stem=man.get("tied", False))
    nets.load(arrays, man)
    return nets, meta


def save_branch(branch: LandmarkBranch, path, extra: dict | None = None) -> None:
    meta = {"kind": "landmark_branch", "config": branch.cfg.to_dict(),
            "step_count": branch.params.step_count, **(extra or {})}
    save_checkpoint(path, branch.params.to_arrays(), meta)


def load_branch(path) -> tuple[LandmarkBranch, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "landmark_branch":
        raise CheckpointError(f"{path}: not a landmark-branch checkpoint")
    branch = build_landmark_branch(BlockConfig.from_dict(meta["config"]))
    branch.params.load_arrays(arrays, step_count=meta.get("step_count", 0))
    return branch, meta
