"""Network components: landmark branch with CBAM, shared extractor, separation,
reconstruction, discriminators, AU head and the alignment projectors.

Each block owns a :class:`ParamStore`. Layers look their tensors up by name at
call time, so a block can reference another block's store (hard tying) and
checkpoint restores are picked up without rebuilding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Iterable

import numpy as np

from .diffcore import (
    ParamStore,
    ShapeError,
    Tensor,
    amax,
    avgpool2,
    concat,
    conv2d,
    flatten,
    linear,
    mean,
    relu,
    reshape,
    sigmoid,
)

N_POOLS = 5
SUPERVISOR_PAIRS = (
    ("F_s_prime", "F_s"),
    ("F_t_prime", "F_t"),
    ("F_sl_prime", "F_sl"),
    ("F_sb_prime", "F_sb"),
    ("F_tl_prime", "F_tl"),
    ("F_tb_prime", "F_tb"),
)


@dataclass
class BlockConfig:
    widths: tuple[int, ...] = (16, 32, 64, 64, 128)
    in_channels: int = 3
    reduction: int = 16
    n_land: int = 49
    n_au: int = 6
    resolution: int = 176
    fc_hidden: int = 256
    cbam_kernel: int = 7
    projector_identity: bool = False
    au_pool: str = "avg"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != N_POOLS:
            raise ValueError(f"widths needs {N_POOLS} entries, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise ValueError("channel widths must be positive")
        if self.n_land < 1 or self.n_au < 1:
            raise ValueError("n_land and n_au must be >= 1")
        if self.in_channels < 1 or self.fc_hidden < 1 or self.reduction < 1:
            raise ValueError("in_channels, fc_hidden and reduction must be positive")
        if self.au_pool not in ("avg", "max"):
            raise ValueError(f"au_pool must be 'avg' or 'max', got {self.au_pool!r}")
        if self.cbam_kernel % 2 != 1:
            raise ValueError("cbam_kernel must be odd")
        if self.resolution < 2 ** N_POOLS:
            raise ValueError(f"resolution {self.resolution} does not survive {N_POOLS} poolings "
                             f"(minimum {2 ** N_POOLS})")

    @property
    def feature_channels(self) -> int:
        return self.widths[1]

    def spatial_chain(self) -> list[int]:
        sizes, s = [], self.resolution
        for _ in range(N_POOLS):
            s //= 2
            sizes.append(s)
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BlockConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int,
                 rng: np.random.Generator | None, padding: int | None = None, bias: bool = True):
        self.store, self.name, self.k = store, name, k
        self.padding = k // 2 if padding is None else padding
        self.has_bias = bias
        if rng is not None:
            store.add(f"{name}.weight", _he(rng, (cout, cin, k, k), cin * k * k))
            if bias:
                store.add(f"{name}.bias", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        b = self.store[f"{self.name}.bias"] if self.has_bias else None
        return conv2d(x, self.store[f"{self.name}.weight"], b, stride=1, padding=self.padding)


class Linear:
    def __init__(self, store: ParamStore, name: str, fin: int, fout: int, rng: np.random.Generator):
        self.store, self.name = store, name
        store.add(f"{name}.weight", _he(rng, (fout, fin), fin))
        store.add(f"{name}.bias", np.zeros(fout))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.store[f"{self.name}.weight"], self.store[f"{self.name}.bias"])


class Block:
    """A named parameter collection with a forward pass."""

    def __init__(self, name: str):
        self.name = name
        self.params = ParamStore()

    def __call__(self, *args):  # pragma: no cover - overridden
        raise NotImplementedError


class ConvPart:
    """conv3x3 -> relu -> conv3x3 -> relu -> 2x2 average pool."""

    def __init__(self, store: ParamStore, prefix: str, cin: int, cout: int,
                 rng: np.random.Generator | None):
        self.conv1 = Conv(store, f"{prefix}.conv1", cin, cout, 3, rng)
        self.conv2 = Conv(store, f"{prefix}.conv2", cout, cout, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return avgpool2(relu(self.conv2(relu(self.conv1(x)))))


class CBAM(Block):
    """Channel attention (shared MLP on avg/max descriptors) then spatial attention."""

    def __init__(self, channels: int, reduction: int, kernel: int, rng: np.random.Generator,
                 name: str = "cbam"):
        super().__init__(name)
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(self.params, "mlp.fc1", channels, hidden, rng)
        self.fc2 = Linear(self.params, "mlp.fc2", hidden, channels, rng)
        self.spatial = Conv(self.params, "spatial", 2, 1, kernel, rng, bias=False)

    def channel_gate(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        avg = mean(x, axis=(2, 3))
        mx = amax(reshape(x, (n, c, h * w)), axis=2)
        gate = sigmoid(self.fc2(relu(self.fc1(avg))) + self.fc2(relu(self.fc1(mx))))
        return reshape(gate, (n, c, 1, 1))

    def spatial_gate(self, x: Tensor) -> Tensor:
        desc = concat([mean(x, axis=1, keepdims=True), amax(x, axis=1, keepdims=True)], axis=1)
        return sigmoid(self.spatial(desc))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"CBAM expects NCHW features, got rank {x.ndim}")
        x = x * self.channel_gate(x)
        return x * self.spatial_gate(x)


class FeatureExtractor(Block):
    """E_f: structurally identical to landmark-branch parts 1-2."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, name: str = "E_f"):
        super().__init__(name)
        self.parts = [ConvPart(self.params, "part1", cfg.in_channels, cfg.widths[0], rng),
                      ConvPart(self.params, "part2", cfg.widths[0], cfg.widths[1], rng)]

    def __call__(self, image: Tensor) -> Tensor:
        x = image
        for part in self.parts:
            x = part(x)
        return x


class LandmarkBranch(Block):
    """Five conv parts, CBAM, flatten, two FC layers emitting 2*n_land coordinates.

    With ``stem`` given, parts 1-2 read their weights from that store (hard
    tying with E_f) instead of owning a copy.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, name: str = "landmark",
                 stem: ParamStore | None = None):
        super().__init__(name)
        self.cfg = cfg
        self.tied = stem is not None
        chans = (cfg.in_channels,) + cfg.widths
        self.parts = []
        for i in range(N_POOLS):
            store = stem if (stem is not None and i < 2) else self.params
            self.parts.append(ConvPart(store, f"part{i + 1}", chans[i], chans[i + 1],
                                       None if store is stem else rng))
        self.cbam = CBAM(cfg.widths[-1], cfg.reduction, cfg.cbam_kernel, rng)
        for k, t in self.cbam.params.items():
            self.params.add(f"cbam.{k}", t)  # same Tensor objects, one optimizer owner
        side = cfg.spatial_chain()[-1]
        self.fc1 = Linear(self.params, "fc1", cfg.widths[-1] * side * side, cfg.fc_hidden, rng)
        self.fc2 = Linear(self.params, "fc2", cfg.fc_hidden, 2 * cfg.n_land, rng)

    def stem_output(self, image: Tensor) -> Tensor:
        """Output of parts 1-2 (what E_f is initialised to reproduce)."""
        return self.parts[1](self.parts[0](image))

    def trunk(self, image: Tensor) -> Tensor:
        x = image
        for part in self.parts:
            x = part(x)
        return x

    def __call__(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[2:] != (self.cfg.resolution, self.cfg.resolution):
            raise ShapeError(f"landmark branch expects N x {self.cfg.in_channels} x "
                             f"{self.cfg.resolution} x {self.cfg.resolution}, got {image.shape}")
        x = self.cbam(self.trunk(image))
        return self.fc2(relu(self.fc1(flatten(x))))


class ConvStack(Block):
    """Three shape-preserving 3x3 convolutions, relu between, linear output."""

    def __init__(self, name: str, cin: int, channels: int, rng: np.random.Generator):
        super().__init__(name)
        self.convs = [Conv(self.params, "conv1", cin, channels, 3, rng),
                      Conv(self.params, "conv2", channels, channels, 3, rng),
                      Conv(self.params, "conv3", channels, channels, 3, rng)]

    def __call__(self, x: Tensor) -> Tensor:
        x = relu(self.convs[0](x))
        x = relu(self.convs[1](x))
        return self.convs[2](x)


class Reconstructor(ConvStack):
    """G_st: fuse (landmark, background) by channel concatenation, 2C -> C."""

    def __init__(self, channels: int, rng: np.random.Generator, name: str = "G_st"):
        super().__init__(name, 2 * channels, channels, rng)
        self.channels = channels

    def __call__(self, f_landmark: Tensor, f_background: Tensor) -> Tensor:
        if f_landmark.shape != f_background.shape:
            raise ShapeError(f"reconstruct: landmark features {f_landmark.shape} vs "
                             f"background features {f_background.shape}")
        return super().__call__(concat([f_landmark, f_background], axis=1))


class PooledHead(Block):
    """Three relu convs, global average (or max) pool, one FC layer; optional sigmoid."""

    def __init__(self, name: str, channels: int, out_dim: int, rng: np.random.Generator,
                 squash: bool, pool: str = "avg"):
        super().__init__(name)
        if pool not in ("avg", "max"):
            raise ValueError(f"unknown pooling {pool!r}")
        self.convs = [Conv(self.params, f"conv{i + 1}", channels, channels, 3, rng) for i in range(3)]
        self.fc = Linear(self.params, "fc", channels, out_dim, rng)
        self.squash = squash
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = relu(conv(x))
        if self.pool == "max":
            b, c, h, w = x.shape
            pooled = amax(reshape(x, (b, c, h * w)), axis=2)
        else:
            pooled = mean(x, axis=(2, 3))
        out = self.fc(pooled)
        return sigmoid(out) if self.squash else out


class DomainDiscriminator(PooledHead):
    """D_d: one score in (0, 1) per batch element; 1 = source, 0 = target."""

    def __init__(self, channels: int, rng: np.random.Generator, name: str = "D_d"):
        super().__init__(name, channels, 1, rng, squash=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = super().__call__(x)
        return reshape(out, (out.shape[0],))


class Projector(Block):
    """1x1 convolution applied before the alignment loss; identity when flagged."""

    def __init__(self, channels: int, rng: np.random.Generator, name: str, identity: bool = False):
        super().__init__(name)
        self.identity = identity
        w = np.eye(channels)[:, :, None, None] + rng.normal(0.0, 0.01, (channels, channels, 1, 1))
        self.params.add("weight", w)
        self.params.add("bias", np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        if self.identity:
            return x
        return conv2d(x, self.params["weight"], self.params["bias"], padding=0)


@dataclass
class FeatureBundle:
    F_s: Tensor
    F_t: Tensor
    F_sl: Tensor
    F_sb: Tensor
    F_tl: Tensor
    F_tb: Tensor
    F_sltb: Tensor
    F_sbtl: Tensor
    F_sl_prime: Tensor
    F_sb_prime: Tensor
    F_tl_prime: Tensor
    F_tb_prime: Tensor
    F_s_prime: Tensor
    F_t_prime: Tensor

    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def as_dict(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in self.names()}


GENERATOR_BLOCKS = ("E_f", "landmark", "E_l", "G_b", "G_st", "E_au")
DISCRIMINATOR_BLOCKS = ("D_l", "D_d")


@dataclass
class NetworkSet:
    cfg: BlockConfig
    E_f: FeatureExtractor
    landmark: LandmarkBranch
    E_l: ConvStack
    G_b: ConvStack
    G_st: Reconstructor
    D_l: PooledHead
    D_d: DomainDiscriminator
    E_au: PooledHead
    projectors: dict[tuple[int, int], Projector] = field(default_factory=dict)

    def blocks(self) -> dict[str, Block]:
        out: dict[str, Block] = {name: getattr(self, name)
                                 for name in GENERATOR_BLOCKS + DISCRIMINATOR_BLOCKS}
        for (i, j), p in sorted(self.projectors.items()):
            out[p.name] = p
        return out

    def stores(self, names: Iterable[str] | None = None) -> dict[str, ParamStore]:
        blocks = self.blocks()
        names = blocks if names is None else names
        return {n: blocks[n].params for n in names}

    def generator_stores(self) -> dict[str, ParamStore]:
        names = [n for n in self.blocks() if n not in DISCRIMINATOR_BLOCKS]
        return self.stores(names)

    def discriminator_stores(self) -> dict[str, ParamStore]:
        return self.stores(DISCRIMINATOR_BLOCKS)

    def set_projector_identity(self, identity: bool) -> None:
        for p in self.projectors.values():
            p.identity = identity

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for bname, store in self.stores().items():
            out.update(store.to_arrays(prefix=f"{bname}/"))
        return out

    def manifest(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "tied": self.landmark.tied,
            "blocks": {n: {"params": {k: list(s) for k, s in st.shapes().items()},
                           "step_count": st.step_count}
                       for n, st in self.stores().items()},
            "projector_identity": bool(next(iter(self.projectors.values())).identity)
            if self.projectors else None,
        }

    def load(self, arrays: dict[str, np.ndarray], manifest: dict) -> None:
        for bname, store in self.stores().items():
            info = manifest["blocks"].get(bname)
            if info is None:
                raise KeyError(f"checkpoint has no block {bname!r}")
            store.load_arrays(arrays, prefix=f"{bname}/", step_count=info["step_count"])
        if manifest.get("projector_identity") is not None:
            self.set_projector_identity(manifest["projector_identity"])

    def clone(self) -> "NetworkSet":
        other = build_networks(self.cfg, seed=0, tie_stem=self.landmark.tied)
        other.load({k: v.copy() for k, v in self.arrays().items()}, self.manifest())
        return other


def build_landmark_branch(cfg: BlockConfig, seed: int = 0) -> LandmarkBranch:
    return LandmarkBranch(cfg, np.random.default_rng(seed))


def build_networks(cfg: BlockConfig, seed: int = 0, tie_stem: bool = False) -> NetworkSet:
    """Randomly initialise every block. Sub-seeds make each block independent of the others."""
    ss = np.random.SeedSequence(seed)
    rngs = {name: np.random.default_rng(s) for name, s in zip(
        GENERATOR_BLOCKS + DISCRIMINATOR_BLOCKS + ("projectors",), ss.spawn(9))}
    c = cfg.feature_channels
    e_f = FeatureExtractor(cfg, rngs["E_f"])
    branch = LandmarkBranch(cfg, rngs["landmark"], stem=e_f.params if tie_stem else None)
    prng = rngs["projectors"]
    projectors = {(i, j): Projector(c, prng, f"P_{i}{j}", cfg.projector_identity)
                  for i in range(1, 7) for j in (1, 2)}
    return NetworkSet(
        cfg=cfg,
        E_f=e_f,
        landmark=branch,
        E_l=ConvStack("E_l", c, c, rngs["E_l"]),
        G_b=ConvStack("G_b", c, c, rngs["G_b"]),
        G_st=Reconstructor(c, rngs["G_st"]),
        D_l=PooledHead("D_l", c, 2 * cfg.n_land, rngs["D_l"], squash=False),
        D_d=DomainDiscriminator(c, rngs["D_d"]),
        E_au=PooledHead("E_au", c, cfg.n_au, rngs["E_au"], squash=True, pool=cfg.au_pool),
        projectors=projectors,
    )


class TransferError(ValueError):
    pass


def transfer_init(e_f: FeatureExtractor, branch: LandmarkBranch) -> None:
    """Copy landmark-branch parts 1-2 into E_f (values are copied, never aliased)."""
    if branch.tied:
        return
    src = {k: t for k, t in branch.params.items() if k.split(".")[0] in ("part1", "part2")}
    dst = e_f.params.shapes()
    src_shapes = {k: t.shape for k, t in src.items()}
    if src_shapes != dst:
        diffs = [f"{k}: branch {src_shapes.get(k)} vs E_f {dst.get(k)}"
                 for k in sorted(set(src_shapes) | set(dst)) if src_shapes.get(k) != dst.get(k)]
        raise TransferError("E_f does not match landmark parts 1-2: " + "; ".join(diffs))
    for k, t in src.items():
        e_f.params[k].data = t.data.copy()


# -- forward entry points ------------------------------------------------------
def forward_landmarks(branch: LandmarkBranch, image: Tensor) -> Tensor:
    return branch(image)


def extract_features(e_f: FeatureExtractor, image: Tensor) -> Tensor:
    return e_f(image)


def separate(e_l: ConvStack, g_b: ConvStack, feat: Tensor) -> tuple[Tensor, Tensor]:
    if feat.ndim != 4:
        raise ShapeError(f"separate expects NCHW features, got rank {feat.ndim}")
    return e_l(feat), g_b(feat)


def reconstruct(g_st: Reconstructor, f_landmark: Tensor, f_background: Tensor) -> Tensor:
    return g_st(f_landmark, f_background)


def project(projector: Projector, feat: Tensor) -> Tensor:
    return projector(feat)


def d_landmark_forward(d_l: PooledHead, feat: Tensor) -> Tensor:
    return d_l(feat)


def d_domain_forward(d_d: DomainDiscriminator, feat: Tensor) -> Tensor:
    return d_d(feat)


def au_head_forward(e_au: PooledHead, feat: Tensor) -> Tensor:
    return e_au(feat)


def cbam_forward(cbam: CBAM, feat: Tensor) -> Tensor:
    return cbam(feat)


def full_graph_forward(nets: NetworkSet, image_s: Tensor, image_t: Tensor) -> FeatureBundle:
    """Extract, separate, cross-reconstruct, then separate and reconstruct a second time."""
    if image_s.shape[1:] != image_t.shape[1:]:
        raise ShapeError(f"source images {image_s.shape} and target images {image_t.shape} differ")
    f_s = nets.E_f(image_s)
    f_t = nets.E_f(image_t)
    f_sl, f_sb = separate(nets.E_l, nets.G_b, f_s)
    f_tl, f_tb = separate(nets.E_l, nets.G_b, f_t)
    f_sltb = nets.G_st(f_sl, f_tb)
    f_sbtl = nets.G_st(f_sb, f_tl)
    f_sl2, f_tb2 = separate(nets.E_l, nets.G_b, f_sltb)
    f_tl2, f_sb2 = separate(nets.E_l, nets.G_b, f_sbtl)
    return FeatureBundle(
        F_s=f_s, F_t=f_t, F_sl=f_sl, F_sb=f_sb, F_tl=f_tl, F_tb=f_tb,
        F_sltb=f_sltb, F_sbtl=f_sbtl,
        F_sl_prime=f_sl2, F_sb_prime=f_sb2, F_tl_prime=f_tl2, F_tb_prime=f_tb2,
        F_s_prime=nets.G_st(f_sl2, f_sb2), F_t_prime=nets.G_st(f_tl2, f_tb2),
    )
