import json

import numpy as np
import pytest

from audsr.diffcore import CheckpointError, Tensor
from audsr.losses import FULL_RECONSTRUCTION_PAIRS, contrastive_alignment_loss
from audsr.netblocks import full_graph_forward
from audsr.trainer import (
    ABLATIONS,
    Checkpoint,
    FinetuneConfig,
    MainConfig,
    MainTrainer,
    PretrainConfig,
    RunLog,
    TrainConfig,
    TrainingAborted,
    init_networks,
    load_branch,
    load_networks,
    lr_for_epoch,
    pretrain_landmark_branch,
    save_branch,
    save_networks,
    select_and_finetune,
    select_checkpoint,
    train_main,
)


@pytest.fixture
def cfg(tiny_block):
    return TrainConfig(block=tiny_block,
                       pretrain=PretrainConfig(lr=1e-3, batch_size=4, epochs=1, max_steps=2),
                       main=MainConfig(lr=1e-3, batch_size=4, epochs=2, max_steps=4),
                       finetune=FinetuneConfig(epochs=1, max_steps=1), seed=3)


@pytest.fixture
def branch(cfg, tiny_data):
    return pretrain_landmark_branch(cfg, tiny_data).branch


def test_lr_schedule_steps_down_every_four_epochs():
    mc = MainConfig(lr=1e-4, epochs=12, decay_every=4)
    lrs = [lr_for_epoch(e, mc) for e in range(1, 13)]
    assert lrs[:4] == [1e-4] * 4
    assert lrs[4:8] == pytest.approx([2 / 3 * 1e-4] * 4, rel=1e-12)
    assert lrs[8:] == pytest.approx([1 / 3 * 1e-4] * 4, rel=1e-12)
    table = MainConfig(lr_table=[3e-4, 1e-4])
    assert [lr_for_epoch(e, table) for e in (1, 2, 5)] == [3e-4, 1e-4, 1e-4]


def test_config_validation_and_round_trip(cfg):
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError, match="main.nope"):
        TrainConfig.from_dict({"main": {"nope": 1}})
    with pytest.raises(ValueError):
        TrainConfig(main=MainConfig(lr_table=[1e-4, 2e-4]))
    with pytest.raises(ValueError):
        TrainConfig(pretrain=PretrainConfig(lr=0.0))


def test_ablation_configs_are_distinct(cfg):
    resolved = {name: json.dumps(cfg.with_ablation(name).to_dict(), sort_keys=True) for name in ABLATIONS}
    assert len(set(resolved.values())) == 3
    bl = cfg.with_ablation("BL")
    assert not bl.enable_ML and not bl.enable_AS
    with pytest.raises(ValueError):
        cfg.with_ablation("XX")


def test_runlog_contract(tmp_path):
    rl = RunLog()
    rl.log_step(1, "main", c=1.0)
    with pytest.raises(ValueError):
        rl.log_step(1, "main", c=1.0)
    with pytest.raises(ValueError):
        rl.log_step(2, "main", c=float("inf"))
    rl.log_epoch(1, "main", val_f1=0.5)
    rl.write(tmp_path / "r.jsonl")
    kinds = [json.loads(line)["kind"] for line in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert kinds == ["step", "epoch"]


def test_zero_epoch_pretrain_returns_initialisation(cfg, tiny_data):
    from audsr.netblocks import build_landmark_branch
    cfg.pretrain.epochs = 0
    res = pretrain_landmark_branch(cfg, tiny_data)
    init = build_landmark_branch(cfg.block, seed=cfg.seed)
    for k, t in res.branch.params.items():
        np.testing.assert_array_equal(t.data, init.params[k].data)
    assert res.best_epoch is None


def _snapshot(stores):
    return {f"{n}/{k}": t.data.copy() for n, s in stores.items() for k, t in s.items()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_alternation_isolation(cfg, tiny_data, branch):
    nets = init_networks(cfg, branch)
    tr = MainTrainer(cfg, tiny_data, nets)
    from audsr.datapipe import batches
    src, tgt = next(batches(tiny_data, 4, seed=0))
    src_lm, tgt_lm, au_t = tr._targets(src, tgt)
    xs, xt = Tensor(src.images), Tensor(tgt.images)
    gen_before, dis_before = _snapshot(nets.generator_stores()), _snapshot(nets.discriminator_stores())
    bundle = tr._forward(xs, xt)
    tr.d_step(bundle, src_lm, tgt_lm, 1e-3)
    assert _same(gen_before, _snapshot(nets.generator_stores()))
    assert not _same(dis_before, _snapshot(nets.discriminator_stores()))
    dis_mid = _snapshot(nets.discriminator_stores())
    tr.g_step(tr._forward(xs, xt), xs, src_lm, tgt_lm, au_t, 1e-3)
    assert _same(dis_mid, _snapshot(nets.discriminator_stores()))
    assert not _same(gen_before, _snapshot(nets.generator_stores()))


def test_as_off_zeroes_intermediate_pairs(cfg, tiny_data, branch):
    off = cfg.with_ablation("ML")
    nets = init_networks(off, branch)
    tr = MainTrainer(off, tiny_data, nets)
    assert tr.pairs == FULL_RECONSTRUCTION_PAIRS
    assert all(p.identity for p in nets.projectors.values())
    assert not any(n.startswith("P_") for n in tr.g_stores())
    x = Tensor(np.random.default_rng(0).random((2, 1, 32, 32)))
    bundle = full_graph_forward(nets, x, x)
    full, terms = contrastive_alignment_loss(bundle, None, tr.pairs, return_terms=True)
    assert set(terms) == {"F_s_prime", "F_t_prime"}
    assert full.item() == terms["F_s_prime"].item() + terms["F_t_prime"].item()


def test_ml_off_leaves_extractor_random(cfg, branch):
    bl = cfg.with_ablation("BL")
    nets = init_networks(bl, None)
    w = nets.E_f.params["part1.conv1.weight"].data
    assert not np.array_equal(w, branch.params["part1.conv1.weight"].data)
    with pytest.raises(ValueError):
        init_networks(cfg, None)


def test_ml_on_transfers_stem(cfg, branch):
    nets = init_networks(cfg, branch)
    np.testing.assert_array_equal(nets.E_f.params["part2.conv2.weight"].data,
                                  branch.params["part2.conv2.weight"].data)


def test_stage_two_is_bit_reproducible(cfg, tiny_data, branch):
    keys = ("c", "l", "adl", "adf", "au", "fl", "adl_d", "adf_d", "score_recon")
    runs = [train_main(cfg, tiny_data, branch).runlog for _ in range(2)]
    for k in keys:
        a, b = runs[0].series(k), runs[1].series(k)
        assert len(a) == 4 and a.tobytes() == b.tobytes()


def test_stage_two_does_not_touch_branch_file(cfg, tiny_data, branch, tmp_path):
    path = tmp_path / "branch.ckpt"
    save_branch(branch, path)
    before = path.read_bytes()
    loaded, _ = load_branch(path)
    train_main(cfg, tiny_data, loaded, out_dir=tmp_path)
    assert path.read_bytes() == before
    assert sorted(p.name for p in tmp_path.glob("main_epoch*.ckpt")) == [
        "main_epoch001.ckpt", "main_epoch002.ckpt"]


def test_network_checkpoint_round_trip(cfg, tiny_data, branch, tmp_path):
    res = train_main(cfg, tiny_data, branch)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_networks(res.nets, p1)
    restored, meta = load_networks(p1)
    save_networks(restored, p2)
    assert p1.read_bytes() == p2.read_bytes()
    x = Tensor(np.random.default_rng(1).random((2, 1, 32, 32)))
    np.testing.assert_array_equal(res.nets.E_au(res.nets.E_f(x)).data, restored.E_au(restored.E_f(x)).data)
    assert restored.E_f.params.state and restored.E_f.params.step_count == res.nets.E_f.params.step_count
    with pytest.raises(CheckpointError):
        load_branch(p1)


def _ck(epoch, f1):
    return Checkpoint(epoch, {}, {}, f1)


def test_checkpoint_selection_policy():
    assert select_checkpoint([_ck(1, 0.2)]).epoch == 1
    assert select_checkpoint([_ck(1, 0.2), _ck(2, 0.5), _ck(3, 0.5)]).epoch == 2
    with pytest.raises(ValueError):
        select_checkpoint([])


def test_finetune_budget_zero_returns_selection(cfg, tiny_data, branch):
    res = train_main(cfg, tiny_data, branch)
    cfg.finetune.epochs = 0
    ft = select_and_finetune(cfg, res.runlog, res.checkpoints, tiny_data)
    assert not ft.chose_finetuned and ft.finetuned_f1 is None
    sel = ft.selected
    for k, v in ft.nets.arrays().items():
        np.testing.assert_array_equal(v, sel.arrays[k])


def test_finetune_keeps_the_better_model(cfg, tiny_data, branch):
    res = train_main(cfg, tiny_data, branch)
    ft = select_and_finetune(cfg, res.runlog, res.checkpoints, tiny_data)
    assert ft.finetuned_f1 is not None
    assert ft.chose_finetuned == (ft.finetuned_f1 > ft.selected.val_f1)


def test_non_finite_parameters_abort_with_component(cfg, tiny_data, branch):
    nets = init_networks(cfg, branch)
    w = nets.D_d.params["fc.weight"]
    w.data = np.full_like(w.data, np.nan)
    with pytest.raises(TrainingAborted) as info:
        train_main(cfg, tiny_data, branch, nets=nets)
    assert info.value.component == "adf_d" and info.value.step == 1


def test_pretrain_nan_aborts_with_last_good(cfg, tiny_data):
    from audsr.netblocks import build_landmark_branch
    b = build_landmark_branch(cfg.block, seed=cfg.seed)
    t = b.params["fc2.bias"]
    t.data = t.data + np.nan
    with pytest.raises(TrainingAborted) as info:
        pretrain_landmark_branch(cfg, tiny_data, branch=b)
    assert info.value.stage == "pretrain" and "landmark/fc2.bias" in info.value.last_good
