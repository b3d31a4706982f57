"""Full network assembly: two ResNet encoders, SE fusion, context module, decoder."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blocks as B
from .errors import ConfigurationError
from .graph.cost import CostReport, count_costs
from .graph.ir import Graph, GraphBuilder, init_weights

STEM_CHANNELS = 64
LAYER_CHANNELS = (64, 128, 256, 512)
LAYER_BLOCKS = {"r18": (2, 2, 2, 2), "r34": (3, 4, 6, 3), "r50": (3, 4, 6, 3)}
CONTEXT_CHANNELS = 512


@dataclass
class ESANetConfig:
    backbone: str = "r34"
    block: str = "nbt1d"
    modality: str = "rgbd"
    num_classes: int = 40
    input_height: int = 480
    input_width: int = 640
    decoder_channels: list = field(default_factory=lambda: [512, 256, 128])
    decoder_nbt1d_per_module: int = 3
    use_context: bool = True
    use_skips: bool = True
    use_se_fusion: bool = True
    upsampling: str = "learned"
    seed: int = 0

    def __post_init__(self):
        self.decoder_channels = [int(c) for c in self.decoder_channels]
        self.validate()

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigurationError(f"config key {key!r}: {msg}")
        if self.backbone not in LAYER_BLOCKS:
            bad("backbone", f"must be one of {sorted(LAYER_BLOCKS)}, got {self.backbone!r}")
        if self.block not in ("basic", "nbt1d"):
            bad("block", f"must be 'basic' or 'nbt1d', got {self.block!r}")
        if self.backbone == "r50" and self.block == "nbt1d":
            bad("block", "r50 uses bottleneck blocks, which have no NBt1D variant")
        if self.modality not in ("rgbd", "rgb", "depth"):
            bad("modality", f"must be rgbd, rgb or depth, got {self.modality!r}")
        if self.num_classes < 2:
            bad("num_classes", "must be >= 2")
        for key in ("input_height", "input_width"):
            v = getattr(self, key)
            if v < 32 or v % 32:
                bad(key, f"must be a positive multiple of 32, got {v}")
        dc = self.decoder_channels
        if len(dc) != 3 or any(c < 1 for c in dc) or not (dc[0] > dc[1] > dc[2]):
            bad("decoder_channels", f"must be 3 strictly decreasing positive values, got {dc}")
        if self.decoder_nbt1d_per_module < 0:
            bad("decoder_nbt1d_per_module", "must be >= 0")
        if self.upsampling not in ("learned", "bilinear", "nearest"):
            bad("upsampling", f"must be learned, bilinear or nearest, got {self.upsampling!r}")

    @property
    def block_kind(self) -> str:
        return "bottleneck" if self.backbone == "r50" else self.block

    def replace(self, **changes) -> "ESANetConfig":
        return dataclasses.replace(self, **changes)

    # -------------------------------------------------------- file format

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, list):
                v = ",".join(map(str, v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ESANetConfig":
        return cls.from_dict(parse_kv(text, source), source)

    @classmethod
    def from_dict(cls, values: dict, source: str = "<config>") -> "ESANetConfig":
        return cls(**coerce_fields(cls, values, source))

    @classmethod
    def load(cls, path) -> "ESANetConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), str(path))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {k!r}")
        out[k] = v
    return out


def _coerce(value, default, key, source):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            return [type(default[0])(v) if default else float(v)
                    for v in value.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigurationError(f"{source}: config key {key!r}: cannot parse {value!r}") from None
    return value


def coerce_fields(cls, values: dict, source: str = "<config>") -> dict:
    """Type-convert string values to the dataclass field types; reject unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigurationError(f"{source}: unknown config key(s) {unknown}")
    out = {}
    for k, v in values.items():
        f = fields[k]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[k] = _coerce(v, default, k, source)
    return out


# ---------------------------------------------------------------- assembly

def _encoder_layer(b, x, layer_idx, kind, n_blocks):
    c = LAYER_CHANNELS[layer_idx]
    stride = 1 if layer_idx == 0 else 2
    with b.scope(f"layer{layer_idx + 1}"):
        for i in range(n_blocks):
            cin = b.shape(x)[1]
            x = B.residual_block(b, x, B.BlockSpec(kind, cin, c, stride if i == 0 else 1),
                                 name=str(i))
    return x


def _stem(b, x):
    with b.scope("stem"):
        y = b.conv(x, STEM_CHANNELS, 7, stride=2, pad=3, name="conv")
        return b.relu(b.bn(y, name="bn"), name="relu")


def build_esanet(config: ESANetConfig, batch: int = 1, dtype="f32") -> Graph:
    """Assemble the network as a lowered graph with initialized weights.

    Outputs: ``logits`` at input resolution, ``aux16`` and ``aux8`` side
    outputs at 1/16 and 1/8 resolution.
    """
    config.validate()
    cfg = config
    b = GraphBuilder(cfg.seed, dtype)
    h, w = cfg.input_height, cfg.input_width
    kind = cfg.block_kind
    n_blocks = LAYER_BLOCKS[cfg.backbone]
    streams = {}
    if cfg.modality in ("rgbd", "rgb"):
        streams["rgb"] = b.input("rgb", (batch, 3, h, w))
    if cfg.modality in ("rgbd", "depth"):
        streams["depth"] = b.input("depth", (batch, 1, h, w))
    fuse = cfg.modality == "rgbd"
    main = "depth" if cfg.modality == "depth" else "rgb"

    def fusion(idx):
        if not fuse:
            return
        with b.stage(f"fusion{idx}"):
            fn = B.se_fusion if cfg.use_se_fusion else B.add_fusion
            streams["rgb"] = fn(b, streams["rgb"], streams["depth"], name=f"fusion{idx}")

    with b.stage("stem"):
        for k in streams:
            with b.scope(k):
                streams[k] = _stem(b, streams[k])
    fusion(1)
    taps = {}
    for li in range(4):
        with b.stage(f"layer{li + 1}"):
            for k in streams:
                with b.scope(k):
                    x = streams[k]
                    if li == 0:
                        x = b.maxpool(x, 3, 2, 1, name="maxpool")
                    streams[k] = _encoder_layer(b, x, li, kind, n_blocks[li])
        fusion(li + 2)
        taps[li] = streams[main]
    x = streams[main]

    with b.stage("context"):
        if cfg.backbone == "r50":
            with b.scope("reduce"):
                x = b.relu(b.bn(b.conv(x, CONTEXT_CHANNELS, 1, pad=0, name="conv"), name="bn"),
                           name="relu")
        if cfg.use_context:
            _, _, ch, cw = b.shape(x)
            spec = B.ContextSpec(ch, cw, B.compute_pool_sizes(ch, cw), CONTEXT_CHANNELS)
            x = B.context_module(b, x, spec, name="context")

    outs = {}
    skip_taps = {0: taps[2], 1: taps[1], 2: taps[0]}  # /16, /8, /4
    for di, cout in enumerate(cfg.decoder_channels):
        with b.stage(f"decoder{di + 1}"):
            skip = None
            if cfg.use_skips:
                with b.scope(f"skip{di + 1}"):
                    skip = b.conv(skip_taps[di], cout, 1, pad=0, bias=True, name="proj")
            x = B.decoder_module(b, x, skip, cout, cfg.decoder_nbt1d_per_module,
                                 cfg.upsampling, name=f"decoder{di + 1}")
        if di < 2:
            with b.stage("heads"):
                name = "aux16" if di == 0 else "aux8"
                outs[name] = b.conv(x, cfg.num_classes, 1, pad=0, bias=True, name=f"{name}.conv")

    with b.stage("heads"):
        with b.scope("head"):
            y = b.conv(x, cfg.num_classes, 3, bias=True, name="conv")
            y = B.upsample(b, y, cfg.upsampling, name="up1")
            y = B.upsample(b, y, cfg.upsampling, name="up2")
    b.output("logits", y)
    b.output("aux16", outs["aux16"])
    b.output("aux8", outs["aux8"])
    g = init_weights(b.build(), cfg.seed)
    g.meta["config"] = cfg.to_text()
    return g


# ---------------------------------------------------------------- summary

@dataclass
class Summary:
    config: ESANetConfig
    cost: CostReport
    stage_rows: list
    encoder_end: tuple
    decoder_prehead: tuple
    block_comparison: dict | None = None

    def to_text(self) -> str:
        c = self.config
        lines = [f"ESANet {c.backbone}-{c.block_kind} {c.modality} "
                 f"{c.input_width}x{c.input_height} classes={c.num_classes}",
                 f"encoder end (WxH): {self.encoder_end[1]}x{self.encoder_end[0]}",
                 f"decoder pre-head (WxH): {self.decoder_prehead[1]}x{self.decoder_prehead[0]}",
                 "",
                 f"{'stage':<12}{'output shape':<22}{'params':>14}{'MACs':>16}"]
        for st, shape, params, macs in self.stage_rows:
            lines.append(f"{st:<12}{'x'.join(map(str, shape)):<22}{params:>14,}{macs:>16,}")
        lines += ["", self.cost.to_text()]
        if self.block_comparison:
            bc = self.block_comparison
            lines += ["", f"residual block at C={bc['channels']}, stride 1: "
                      f"basic {bc['basic_conv_params']:,} conv params / "
                      f"{bc['basic_conv_macs']:,} MACs, nbt1d {bc['nbt1d_conv_params']:,} / "
                      f"{bc['nbt1d_conv_macs']:,}; ratio params {bc['param_ratio']:.6f}, "
                      f"MACs {bc['mac_ratio']:.6f}"]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"config": dataclasses.asdict(self.config),
                "cost": dataclasses.asdict(self.cost),
                "stages": [{"stage": s, "shape": list(sh), "params": p, "macs": m}
                           for s, sh, p, m in self.stage_rows],
                "encoder_end": list(self.encoder_end),
                "decoder_prehead": list(self.decoder_prehead),
                "block_comparison": self.block_comparison}


def block_costs(kind: str, channels: int, size: int = 16) -> CostReport:
    """Cost of one stride-1 residual block of ``kind`` at equal in/out width."""
    b = GraphBuilder(0)
    x = b.input("x", (1, channels, size, size))
    b.output("y", B.residual_block(b, x, B.BlockSpec(kind, channels, channels), name="block"))
    return count_costs(b.build())


def compare_blocks(channels: int = 64, size: int = 16) -> dict:
    basic, nbt = block_costs("basic", channels, size), block_costs("nbt1d", channels, size)
    return {"channels": channels,
            "basic_conv_params": basic.conv_parameter_count,
            "nbt1d_conv_params": nbt.conv_parameter_count,
            "basic_conv_macs": basic.conv_mac_count,
            "nbt1d_conv_macs": nbt.conv_mac_count,
            "param_ratio": nbt.conv_parameter_count / basic.conv_parameter_count,
            "mac_ratio": nbt.conv_mac_count / basic.conv_mac_count}


STAGE_ORDER = ("stem", "fusion1", "layer1", "fusion2", "layer2", "fusion3", "layer3", "fusion4",
               "layer4", "fusion5", "context", "decoder1", "decoder2", "decoder3", "heads")


def _stage_rank(stage: str) -> int:
    return STAGE_ORDER.index(stage) if stage in STAGE_ORDER else len(STAGE_ORDER)


def summarize(config: ESANetConfig, graph: Graph | None = None) -> Summary:
    g = graph if graph is not None else build_esanet(config)
    cost = count_costs(g)
    rows, last = [], {}
    for n in g.nodes:
        if n.stage:
            last[n.stage] = n.shape
    for st, sc in sorted(cost.stages.items(), key=lambda kv: _stage_rank(kv[0])):
        if st in last:
            rows.append((st, last[st][1:], sc.parameter_count, sc.mac_count))
    by_name = {n.name: n for n in g.nodes}
    enc_end = last.get("fusion5") if config.modality == "rgbd" else last.get("layer4")
    prehead = by_name["head.conv"].shape
    comparison = compare_blocks() if config.block_kind in ("basic", "nbt1d") else None
    return Summary(config, cost, rows, tuple(enc_end[2:]), tuple(prehead[2:]), comparison)


def load_shared_weights(target: Graph, source: Graph) -> Graph:
    """Copy every weight whose name exists in both graphs from ``source``."""
    g = target.copy()
    for k in g.weights:
        if k in source.weights and source.weights[k].shape == g.weights[k].shape:
            g.weights[k] = source.weights[k].copy()
    return g


def set_weights(graph: Graph, updates: dict) -> Graph:
    g = graph.copy()
    for k, v in updates.items():
        if k not in g.weights:
            raise ConfigurationError(f"unknown weight {k!r}")
        g.weights[k] = np.asarray(v, dtype=g.weights[k].dtype).reshape(g.weights[k].shape)
    return g
