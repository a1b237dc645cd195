import numpy as np
import pytest

from audsr.diffcore import ShapeError, Tensor
from audsr.netblocks import (
    CBAM,
    BlockConfig,
    PooledHead,
    TransferError,
    build_landmark_branch,
    build_networks,
    full_graph_forward,
    transfer_init,
)


def test_block_config_validation():
    with pytest.raises(ValueError):
        BlockConfig(widths=(1, 2, 3))
    with pytest.raises(ValueError):
        BlockConfig(resolution=16)
    with pytest.raises(ValueError):
        BlockConfig(au_pool="median")
    assert BlockConfig().spatial_chain() == [88, 44, 22, 11, 5]


def test_config_round_trip():
    cfg = BlockConfig(widths=(2, 3, 4, 5, 6), au_pool="max")
    assert BlockConfig.from_dict(cfg.to_dict()) == cfg


def test_landmark_branch_output_and_shape_error(tiny_block):
    branch = build_landmark_branch(tiny_block, seed=0)
    out = branch(Tensor(np.zeros((2, 1, 32, 32))))
    assert out.shape == (2, 2 * tiny_block.n_land)
    with pytest.raises(ShapeError):
        branch(Tensor(np.zeros((2, 1, 30, 30))))


def test_cbam_preserves_shape_and_gates_are_probabilities():
    rng = np.random.default_rng(0)
    cbam = CBAM(4, 2, 3, rng)
    x = Tensor(rng.random((2, 4, 5, 5)))
    assert cbam(x).shape == x.shape
    cg = cbam.channel_gate(x).data
    sg = cbam.spatial_gate(x).data
    assert cg.shape == (2, 4, 1, 1) and sg.shape == (2, 1, 5, 5)
    assert ((cg > 0) & (cg < 1)).all() and ((sg > 0) & (sg < 1)).all()


def test_max_pooled_head_reads_strongest_location():
    rng = np.random.default_rng(1)
    head = PooledHead("h", 2, 1, rng, squash=False, pool="max")
    for k, t in head.params.items():
        t.data = np.zeros_like(t.data)
    for i in range(3):
        head.params[f"conv{i + 1}.weight"].data[:, :, 1, 1] = np.eye(2)
    head.params["fc.weight"].data[:] = 1.0
    x = np.zeros((1, 2, 4, 4))
    x[0, 0, 2, 3] = 5.0
    assert head(Tensor(x)).item() == pytest.approx(5.0)


def test_full_graph_features_share_one_shape(tiny_block):
    nets = build_networks(tiny_block, seed=0)
    x = Tensor(np.random.default_rng(0).random((2, 1, 32, 32)))
    bundle = full_graph_forward(nets, x, x)
    shapes = {v.shape for v in bundle.as_dict().values()}
    assert shapes == {(2, tiny_block.widths[1], 8, 8)}
    assert len(bundle.names()) == 14


def test_transfer_init_copies_values(tiny_block):
    nets = build_networks(tiny_block, seed=0)
    branch = build_landmark_branch(tiny_block, seed=9)
    transfer_init(nets.E_f, branch)
    x = Tensor(np.random.default_rng(2).random((1, 1, 32, 32)))
    np.testing.assert_array_equal(nets.E_f(x).data, branch.stem_output(x).data)
    branch.params["part1.conv1.weight"].data = branch.params["part1.conv1.weight"].data + 1.0
    assert not np.array_equal(nets.E_f.params["part1.conv1.weight"].data,
                              branch.params["part1.conv1.weight"].data)


def test_transfer_init_shape_mismatch(tiny_block):
    nets = build_networks(tiny_block, seed=0)
    other = BlockConfig(widths=(3, 4, 4, 4, 4), in_channels=1, reduction=2, resolution=32,
                        fc_hidden=8, cbam_kernel=3)
    with pytest.raises(TransferError, match="part1"):
        transfer_init(nets.E_f, build_landmark_branch(other))


def test_hard_tie_shares_stem(tiny_block):
    nets = build_networks(tiny_block, seed=0, tie_stem=True)
    assert nets.landmark.tied
    w = nets.E_f.params["part1.conv1.weight"]
    w.data = w.data * 2.0
    x = Tensor(np.random.default_rng(3).random((1, 1, 32, 32)))
    np.testing.assert_array_equal(nets.E_f(x).data, nets.landmark.stem_output(x).data)
    assert "part1.conv1.weight" not in nets.landmark.params


def test_projectors_and_identity_flag(tiny_block):
    nets = build_networks(tiny_block, seed=0)
    assert len(nets.projectors) == 12
    x = Tensor(np.random.default_rng(4).random((1, 4, 3, 3)))
    p = nets.projectors[(3, 1)]
    assert not np.array_equal(p(x).data, x.data)
    nets.set_projector_identity(True)
    assert p(x) is x


def test_clone_is_independent_and_equal(tiny_block):
    nets = build_networks(tiny_block, seed=0)
    twin = nets.clone()
    a, b = nets.arrays(), twin.arrays()
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    twin.E_au.params["fc.bias"].data = twin.E_au.params["fc.bias"].data + 1
    assert not np.array_equal(nets.E_au.params["fc.bias"].data, twin.E_au.params["fc.bias"].data)


def test_generator_and_discriminator_groups_are_disjoint(tiny_block):
    nets = build_networks(tiny_block, seed=0)
    g, d = nets.generator_stores(), nets.discriminator_stores()
    assert set(d) == {"D_l", "D_d"}
    assert not set(g) & set(d)
    assert set(g) | set(d) == set(nets.stores())
