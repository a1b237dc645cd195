"""Command-line entry point: synth, pretrain, train, finetune, eval, gradcheck.

Configuration is resolved as defaults < ``--config`` YAML file < flags. Any
config key can be set with a dotted flag mirroring its path, for example
``--weights.c=100``, ``--main.epochs 4`` or ``--data.manifest runs/syn/manifest.jsonl``.
The resolved configuration is written to ``<out>/config.yaml``; passing that
file back with ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .datapipe import FaceDataset, Geometry, SynthSpec, load_manifest, synth_dataset
from .diffcore import CheckpointError, GradCheckReport, Tensor, grad_check, load_checkpoint
from .evalmod import Report
from .losses import (
    AuTarget,
    LandmarkTarget,
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
    pair_alignment,
    total_loss,
)
from .netblocks import N_POOLS, BlockConfig, FeatureBundle, build_networks, full_graph_forward
from .trainer import (
    ABLATIONS,
    Checkpoint,
    TrainConfig,
    TrainingAborted,
    evaluate_au,
    load_branch,
    load_networks,
    pretrain_landmark_branch,
    save_branch,
    save_networks,
    select_and_finetune,
    train_main,
)

log = logging.getLogger("audsr")

COMMANDS = ("synth", "pretrain", "train", "finetune", "eval", "gradcheck")

DATA_DEFAULTS = {
    "manifest": None,     # manifest.jsonl of a dataset
    "branch": None,       # stage-1 checkpoint consumed by train
    "train_dir": None,    # train run directory consumed by finetune
    "checkpoint": None,   # network checkpoint consumed by eval
    "eval_domain": "target",
    "eval_split": "test",
}
GRADCHECK_DEFAULTS = {"tol": 1e-4, "eps": 1e-5, "max_elements": 24}


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------------
def default_config() -> dict:
    cfg = TrainConfig().to_dict()
    cfg["data"] = dict(DATA_DEFAULTS)
    cfg["synth"] = SynthSpec().to_dict()
    cfg["gradcheck"] = dict(GRADCHECK_DEFAULTS)
    return cfg


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return yaml.safe_load(text)


def _coerce(value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, (list, tuple)) and isinstance(value, (list, tuple)):
        return list(value)
    if type(default) is not type(value):
        raise ConfigError(f"expected {type(default).__name__}, got {value!r}")
    return value


def set_dotted(cfg: dict, path: str, value) -> None:
    keys = path.split(".")
    node = cfg
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {'.'.join(keys[:i + 1])!r}")
        node = node[k]
    leaf = keys[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key {path!r}")
    try:
        node[leaf] = _coerce(value, node[leaf])
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def merge(cfg: dict, overrides: dict, prefix: str = "") -> None:
    for k, v in overrides.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            if not isinstance(cfg.get(k), dict):
                raise ConfigError(f"unknown config section {path!r}")
            merge(cfg[k], v, path + ".")
        else:
            _set_leaf(cfg, k, v, path)


def _set_leaf(node: dict, key: str, value, path: str) -> None:
    if key not in node:
        raise ConfigError(f"unknown config key {path!r}")
    try:
        node[key] = _coerce(value, node[key])
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_dotted(tokens: Sequence[str]) -> list[tuple[str, object]]:
    """``--a.b=v`` or ``--a.b v`` pairs from the tokens argparse did not consume."""
    out, i = [], 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, text = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag --{key} needs a value")
            text = tokens[i + 1]
            i += 2
        out.append((key, _parse_value(text)))
    return out


def resolve_config(args: argparse.Namespace, extra: Sequence[str]) -> dict:
    cfg = default_config()
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
        merge(cfg, loaded)
    if args.ablation is not None:
        cfg.update(ABLATIONS[args.ablation])
    for key, value in parse_dotted(extra):
        set_dotted(cfg, key, value)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    body = {k: copy.deepcopy(v) for k, v in cfg.items() if k not in ("data", "synth", "gradcheck")}
    try:
        return TrainConfig.from_dict(body)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def echo_config(cfg: dict, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False))
    return path


# -- gradient suite -----------------------------------------------------------------------
SUITE_BLOCK = BlockConfig(widths=(2, 3, 3, 3, 4), in_channels=1, reduction=2, n_land=3, n_au=2,
                          resolution=32, fc_hidden=5, cbam_kernel=3)


class _Probe:
    """Fixed random linear functional of a block output, so every output entry matters."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights: np.ndarray | None = None

    def __call__(self, out: Tensor) -> Tensor:
        if self.weights is None:
            self.weights = self.rng.normal(size=out.shape)
        return (out * self.weights).sum()


def gradient_suite(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], dict]]:
    """(name, closure, parameters) for every block and every loss at small shapes."""
    rng = np.random.default_rng(seed)
    cfg = SUITE_BLOCK
    nets = build_networks(cfg, seed=seed)
    c, side = cfg.feature_channels, 4
    chain = [cfg.resolution] + cfg.spatial_chain()
    chans = (cfg.in_channels,) + cfg.widths
    cases = []

    def leaf(shape, low=None, high=None):
        data = rng.uniform(low, high, shape) if low is not None else rng.normal(size=shape)
        return Tensor(data, requires_grad=True)

    branch = nets.landmark
    for i, part in enumerate(branch.parts):
        x = leaf((2, chans[i], chain[i], chain[i]))
        store = nets.E_f.params if branch.tied and i < 2 else branch.params
        prefix = f"part{i + 1}."
        params = {k: t for k, t in store.items() if k.startswith(prefix)}
        params["input"] = x
        cases.append((f"landmark.part{i + 1}", lambda p=part, x=x, r=_new_probe(rng): r(p(x)), params))
    x = leaf((2, cfg.widths[-1], chain[-1] + 2, chain[-1] + 2))
    cases.append(("CBAM", lambda x=x, r=_new_probe(rng): r(branch.cbam(x)),
                  {**dict(branch.cbam.params.items()), "input": x}))
    img = leaf((2, cfg.in_channels, cfg.resolution, cfg.resolution))
    cases.append(("landmark", lambda r=_new_probe(rng): r(branch(img)), dict(branch.params.items())))
    cases.append(("E_f", lambda r=_new_probe(rng): r(nets.E_f(img)), dict(nets.E_f.params.items())))
    feat = leaf((2, c, side, side))
    feat2 = leaf((2, c, side, side))
    for name in ("E_l", "G_b"):
        blk = getattr(nets, name)
        cases.append((name, lambda b=blk, r=_new_probe(rng): r(b(feat)),
                      {**dict(blk.params.items()), "input": feat}))
    cases.append(("G_st", lambda r=_new_probe(rng): r(nets.G_st(feat, feat2)),
                  {**dict(nets.G_st.params.items()), "landmark_input": feat, "background_input": feat2}))
    for name in ("D_l", "D_d", "E_au"):
        blk = getattr(nets, name)
        cases.append((name, lambda b=blk, r=_new_probe(rng): r(b(feat)),
                      {**dict(blk.params.items()), "input": feat}))
    for key, proj in sorted(nets.projectors.items()):
        cases.append((proj.name, lambda p=proj, r=_new_probe(rng): r(p(feat)),
                      {**dict(proj.params.items()), "input": feat}))

    # losses
    n_land, n_au = cfg.n_land, cfg.n_au
    lm_s = LandmarkTarget(rng.uniform(0.2, 0.8, (2, 2 * n_land)), rng.uniform(0.2, 0.4, 2))
    lm_t = LandmarkTarget(rng.uniform(0.2, 0.8, (2, 2 * n_land)), rng.uniform(0.2, 0.4, 2))
    pred = leaf((2, 2 * n_land))
    cases.append(("loss.landmark", lambda: landmark_loss(pred, lm_s), {"prediction": pred}))
    probs = leaf((2, n_au), 0.05, 0.95)
    au_t = AuTarget(rng.integers(0, 2, (2, n_au)), au_class_weights(rng.uniform(0.2, 0.6, n_au)))
    cases.append(("loss.au", lambda: au_loss(probs, au_t), {"probabilities": probs}))
    a, b = leaf((2, c, side, side)), leaf((2, c, side, side))
    p1, p2 = nets.projectors[(1, 1)], nets.projectors[(1, 2)]
    cases.append(("loss.pair_alignment", lambda: pair_alignment(a, b, p1, p2),
                  {"reconstructed": a, "original": b, **{f"P_11.{k}": t for k, t in p1.params.items()},
                   **{f"P_12.{k}": t for k, t in p2.params.items()}}))
    images_s = Tensor(rng.normal(size=(2, cfg.in_channels, 8, 8)))
    images_t = Tensor(rng.normal(size=(2, cfg.in_channels, 8, 8)))
    gen = {f"{n}.{k}": t for n in ("E_f", "E_l", "G_b", "G_st") for k, t in getattr(nets, n).params.items()}
    cases.append(("loss.contrastive_alignment",
                  lambda: contrastive_alignment_loss(full_graph_forward(nets, images_s, images_t), nets.projectors),
                  {**gen, **{f"{p.name}.{k}": t for p in nets.projectors.values() for k, t in p.params.items()}}))
    fsl, ftl = leaf((2, c, side, side)), leaf((2, c, side, side))
    d_l = {f"D_l.{k}": t for k, t in nets.D_l.params.items()}
    cases.append(("loss.landmark_feature", lambda: landmark_feature_loss(nets.D_l, fsl, ftl, lm_s, lm_t),
                  {**d_l, "F_sl": fsl, "F_tl": ftl}))
    fsb, ftb = leaf((2, c, side, side)), leaf((2, c, side, side))
    mean_face = rng.uniform(0.2, 0.8, 2 * n_land)
    cases.append(("loss.landmark_removal_d", lambda: landmark_removal_d_step(nets.D_l, fsb, ftb, lm_s, lm_t), d_l))
    cases.append(("loss.landmark_removal_g",
                  lambda: landmark_removal_g_step(nets.D_l, fsb, ftb, lm_s, lm_t, mean_face),
                  {**d_l, "F_sb": fsb, "F_tb": ftb}))
    names = FeatureBundle.__dataclass_fields__
    bundle = FeatureBundle(**{n: leaf((2, c, side, side)) for n in names})
    d_d = {f"D_d.{k}": t for k, t in nets.D_d.params.items()}
    cases.append(("loss.domain_d", lambda: domain_d_step(nets.D_d, bundle), d_d))
    cases.append(("loss.domain_g", lambda: domain_g_step(nets.D_d, bundle),
                  {**d_d, "F_sltb": bundle.F_sltb, "F_sbtl": bundle.F_sbtl}))
    comps = {k: leaf(()) for k in ("c", "l", "adl", "adf", "au", "fl")}
    weights = LossWeights()
    cases.append(("loss.total", lambda: total_loss(weights, comps), comps))
    return cases


def _new_probe(rng: np.random.Generator) -> _Probe:
    return _Probe(np.random.default_rng(rng.integers(2 ** 32)))



def run_gradient_suite(tol: float = 1e-4, eps: float = 1e-5, max_elements: int | None = 24,
                       seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    return [(name, grad_check(fn, params, eps=eps, tol=tol, max_elements=max_elements, seed=seed))
            for name, fn, params in gradient_suite(seed)]


# -- commands -------------------------------------------------------------------------
def _out_dir(args, default: str) -> Path:
    return Path(args.out or default)


def _dataset(cfg: dict, tc: TrainConfig) -> FaceDataset:
    path = cfg["data"]["manifest"]
    if not path:
        raise ConfigError("data.manifest is required")
    manifest = load_manifest(path, Geometry.for_crop(tc.block.resolution))
    return FaceDataset(manifest, Geometry.for_crop(tc.block.resolution))


def cmd_synth(cfg: dict, out: Path) -> int:
    spec_dict = dict(cfg["synth"])
    spec = SynthSpec(**{**spec_dict, "au_rates": tuple(spec_dict["au_rates"])})
    min_size = 2 ** N_POOLS
    if spec.image_size < min_size:
        raise ConfigError(f"synth.image_size {spec.image_size} is below the {N_POOLS}-pool "
                          f"minimum of {min_size}")
    man = synth_dataset(spec, seed=cfg["seed"], out_dir=out)
    counts = {}
    for r in man.records:
        counts[f"{r.domain}/{r.split}"] = counts.get(f"{r.domain}/{r.split}", 0) + 1
    print(f"wrote {len(man.records)} records to {out / 'manifest.jsonl'}: "
          + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return 0


def cmd_pretrain(cfg: dict, out: Path) -> int:
    tc = train_config(cfg)
    ds = _dataset(cfg, tc)
    res = pretrain_landmark_branch(tc, ds)
    save_branch(res.branch, out / "branch.ckpt",
                extra={"best_epoch": res.best_epoch, "best_error": res.best_error})
    res.runlog.write(out / "runlog.jsonl")
    print(f"stage 1: best epoch {res.best_epoch}, validation landmark error {res.best_error}")
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    tc = train_config(cfg)
    ds = _dataset(cfg, tc)
    branch = None
    if tc.enable_ML:
        if not cfg["data"]["branch"]:
            raise ConfigError("data.branch (a stage-1 checkpoint) is required when enable_ML is on")
        branch, _ = load_branch(cfg["data"]["branch"])
    res = train_main(tc, ds, branch, out_dir=out)
    res.runlog.write(out / "runlog.jsonl")
    for ck in res.checkpoints:
        print(f"epoch {ck.epoch}: validation mean F1 {ck.val_f1:.4f}")
    return 0


def _load_run_checkpoints(train_dir: Path) -> list[Checkpoint]:
    paths = sorted(train_dir.glob("main_epoch*.ckpt"))
    if not paths:
        raise ConfigError(f"no main_epoch*.ckpt checkpoints in {train_dir}")
    out = []
    for p in paths:
        arrays, meta = load_checkpoint(p)
        out.append(Checkpoint(meta["epoch"], arrays, meta["networks"], meta["val_f1"], str(p)))
    return out


def cmd_finetune(cfg: dict, out: Path) -> int:
    tc = train_config(cfg)
    if not cfg["data"]["train_dir"]:
        raise ConfigError("data.train_dir (a train run directory) is required")
    checkpoints = _load_run_checkpoints(Path(cfg["data"]["train_dir"]))
    ds = _dataset(cfg, tc)
    res = select_and_finetune(tc, None, checkpoints, ds)
    save_networks(res.nets, out / "final.ckpt",
                  extra={"selected_epoch": res.selected.epoch, "fine_tuned": res.chose_finetuned})
    res.runlog.write(out / "runlog.jsonl")
    print(f"selected epoch {res.selected.epoch} (validation F1 {res.selected.val_f1:.4f}); "
          f"fine-tuned F1 {res.finetuned_f1}; kept {'fine-tuned' if res.chose_finetuned else 'selected'}")
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    tc = train_config(cfg)
    ck = cfg["data"]["checkpoint"]
    if not ck:
        raise ConfigError("data.checkpoint is required")
    nets, _ = load_networks(ck)
    ds = _dataset(cfg, tc)
    idx = ds.manifest.select(cfg["data"]["eval_domain"], cfg["data"]["eval_split"])
    if not idx:
        raise ConfigError(f"no {cfg['data']['eval_domain']}/{cfg['data']['eval_split']} records")
    rep: Report = evaluate_au(nets, ds, idx, tc.threshold)
    (out / "report.json").write_text(rep.to_text())
    (out / "report.tsv").write_text(rep.to_table())
    print(rep.to_table(), end="")
    return 0


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    g = cfg["gradcheck"]
    t0 = time.perf_counter()
    results = run_gradient_suite(g["tol"], g["eps"], g["max_elements"], cfg["seed"])
    lines = []
    for name, rep in results:
        status = "PASS" if rep.passed else "FAIL"
        lines.append(f"{status} {name:32s} max rel error {rep.worst:.3e} "
                     f"({sum(rep.checked.values())} entries, {len(rep.checked)} tensors)")
    failed = [name for name, rep in results if not rep.passed]
    summary = (f"{len(results) - len(failed)}/{len(results)} checks passed at tol {g['tol']:g} "
               f"in {time.perf_counter() - t0:.1f}s")
    text = "\n".join(lines + [summary]) + "\n"
    print(text, end="")
    (out / "gradcheck.txt").write_text(text)
    return 1 if failed else 0


HANDLERS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
            "finetune": cmd_finetune, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="audsr",
        description="Train and evaluate landmark-guided domain separation for AU detection.",
        epilog="Any config key can be overridden with a dotted flag, e.g. --weights.c=100 "
               "--main.epochs=4 --data.manifest=PATH.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="YAML config; flags override it")
    parser.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    parser.add_argument("--out", metavar="DIR", default=None, help="output directory (default runs/<command>)")
    parser.add_argument("--ablation", choices=sorted(ABLATIONS), default=None,
                        help="BL: no ML, no AS; ML: ML only; AS-full: both")
    parser.add_argument("--tol", type=float, default=None, help="gradcheck tolerance (gradcheck.tol)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, extra)
        if args.tol is not None:
            cfg["gradcheck"]["tol"] = args.tol
        if args.command != "gradcheck":
            train_config(cfg)
        out = _out_dir(args, f"runs/{args.command}")
        echo_config(cfg, out)
        return HANDLERS[args.command](cfg, out)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"audsr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"audsr {args.command}: training aborted at {exc.stage} step {exc.step} "
              f"({exc.component}): {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
