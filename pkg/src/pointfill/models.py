"""Network assembly: local denoising encoder, global contrastive encoder,
split-sum feature fusion, and the two-headed graph decoder, plus checkpoint
serialization.

Forward functions process one cloud at a time (graphs differ per sample);
batching happens by gradient accumulation in the training loops.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import (
    Parameter,
    ShapeMismatchError,
    Tensor,
    add,
    broadcast_to,
    concat,
    leaky_relu,
    matmul,
    max_reduce,
    relu,
    reshape,
)
from .graph import (
    EcConvParams,
    EdgeConvParams,
    ec_conv,
    edge_conv,
    glorot_uniform,
    init_ec_conv,
    init_edge_conv,
    knn_graph,
    residual_denoise_block,
    sag_pool,
)


@dataclass
class ModelConfig:
    """Architecture and cropping constants. Defaults are the full-scale
    settings; ``desk()`` returns a configuration small enough for laptop-CPU
    experiments."""

    k_local: int = 8
    denoise_sigma: float = 0.02
    k_global: int = 24
    crop_fraction: float = 0.25
    temperature: float = 0.5
    k_decoder: int = 16
    k_pool1: int = 16
    k_pool2: int = 6
    inter_nodes: int = 1280  # nodes kept by the first pool (auxiliary head size)
    final_nodes: int = 512  # nodes kept by the second pool (missing-part size)
    missing_points: int = 512
    frame_points: int = 512
    fused_dim: int = 256
    proj_dim: int = 128
    local_blocks: int = 3
    local_width: int = 96
    global_widths: tuple = (64, 64, 128, 256)
    global_feature_dim: int = 1024
    large_hole_mode: bool = False

    def __post_init__(self):
        self.global_widths = tuple(int(w) for w in self.global_widths)

    def validate(self):
        counted = [self.k_local, self.k_global, self.k_decoder, self.k_pool1,
                   self.k_pool2, self.inter_nodes, self.final_nodes,
                   self.missing_points, self.frame_points, self.fused_dim,
                   self.proj_dim, self.local_blocks, self.local_width,
                   self.global_feature_dim, *self.global_widths]
        if any(c <= 0 for c in counted):
            raise ValueError("ModelConfig: all counts must be positive")
        if not self.large_hole_mode:
            if self.inter_nodes < self.missing_points + self.frame_points:
                raise ValueError(
                    f"ModelConfig: inter_nodes {self.inter_nodes} must be >= "
                    f"missing+frame {self.missing_points + self.frame_points}")
            if self.final_nodes != self.missing_points:
                raise ValueError(
                    f"ModelConfig: final_nodes {self.final_nodes} must equal "
                    f"missing_points {self.missing_points}")
        return self

    @classmethod
    def desk(cls, points: int = 1024, missing: int = 128, frame: int = 128):
        """Small widths and neighborhoods for CPU-scale corpora."""
        return cls(
            k_local=6, k_global=12, k_decoder=8, k_pool1=8, k_pool2=4,
            inter_nodes=max(missing + frame, int(0.3 * points)),
            final_nodes=missing, missing_points=missing, frame_points=frame,
            fused_dim=48, proj_dim=32, local_blocks=2, local_width=16,
            global_widths=(12, 12, 24, 32), global_feature_dim=96,
        ).validate()


@dataclass
class LinearParams:
    weight: Parameter
    bias: Parameter


def init_linear(rng, c_in: int, c_out: int, name: str) -> LinearParams:
    w = glorot_uniform(rng, c_in, c_out, (c_in, c_out))
    return LinearParams(
        weight=Parameter(f"{name}.weight", Tensor(w, requires_grad=True)),
        bias=Parameter(f"{name}.bias", Tensor(np.zeros(c_out), requires_grad=True)),
    )


def linear(x: Tensor, params: LinearParams) -> Tensor:
    w = params.weight.tensor
    n = x.shape[0]
    out = matmul(x, w)
    return add(out, broadcast_to(reshape(params.bias.tensor, (1, w.shape[1])),
                                 (n, w.shape[1])))


@dataclass
class MlpHeadParams:
    hidden: LinearParams
    out: LinearParams


def init_mlp_head(rng, c_in: int, c_hidden: int, c_out: int, name: str):
    return MlpHeadParams(
        hidden=init_linear(rng, c_in, c_hidden, f"{name}.hidden"),
        out=init_linear(rng, c_hidden, c_out, f"{name}.out"),
    )


def mlp_head(x: Tensor, params: MlpHeadParams) -> Tensor:
    return linear(leaky_relu(linear(x, params.hidden), 0.2), params.out)


@dataclass
class LocalEncoderParams:
    lift: LinearParams  # 3 -> local_width
    blocks: list  # EcConvParams, width preserving
    projection: EcConvParams  # width -> 3, pretraining only


@dataclass
class GlobalEncoderParams:
    stages: list  # EdgeConvParams
    merge: LinearParams  # sum(stage widths) -> global_feature_dim
    head_hidden: LinearParams  # pretraining only
    head_out: LinearParams  # pretraining only


@dataclass
class FusionParams:
    w_local: Parameter
    w_global: Parameter
    bias: Parameter


@dataclass
class DecoderParams:
    conv1: EdgeConvParams
    pool1: EcConvParams
    conv2: EdgeConvParams
    inter_head: MlpHeadParams
    pool2: EcConvParams
    conv3: EdgeConvParams
    final_head: MlpHeadParams


@dataclass
class ModelBundle:
    config: ModelConfig
    local: LocalEncoderParams
    global_enc: GlobalEncoderParams
    fusion: FusionParams
    decoder: DecoderParams
    classifier: LinearParams | None = None

    def parameters(self, include_pretext_heads: bool = True,
                   include_classifier: bool = True) -> list:
        params = list(local_encoder_parameters(self.local, include_pretext_heads))
        params.extend(global_encoder_parameters(self.global_enc,
                                                include_pretext_heads))
        params.extend([self.fusion.w_local, self.fusion.w_global, self.fusion.bias])
        params.extend(_walk_parameters(self.decoder))
        if include_classifier and self.classifier is not None:
            params.extend(_walk_parameters(self.classifier))
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("ModelBundle: duplicate parameter names")
        return params


def _walk_parameters(obj):
    if obj is None:
        return
    if isinstance(obj, Parameter):
        yield obj
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from _walk_parameters(item)
    elif hasattr(obj, "__dataclass_fields__"):
        for fld in fields(obj):
            yield from _walk_parameters(getattr(obj, fld.name))


def local_encoder_parameters(params: LocalEncoderParams,
                             include_projection: bool = True) -> list:
    out = list(_walk_parameters(params.lift))
    out.extend(_walk_parameters(params.blocks))
    if include_projection:
        out.extend(_walk_parameters(params.projection))
    return out


def global_encoder_parameters(params: GlobalEncoderParams,
                              include_head: bool = True) -> list:
    out = list(_walk_parameters(params.stages))
    out.extend(_walk_parameters(params.merge))
    if include_head:
        out.extend(_walk_parameters(params.head_hidden))
        out.extend(_walk_parameters(params.head_out))
    return out


def parameter_count(params) -> int:
    return int(sum(p.tensor.values.size for p in params))


# ---------------------------------------------------------------------------
# initialization


def init_local_encoder(cfg: ModelConfig, rng) -> LocalEncoderParams:
    w = cfg.local_width
    return LocalEncoderParams(
        lift=init_linear(rng, 3, w, "local.lift"),
        blocks=[init_ec_conv(rng, w, w, f"local.block{i}")
                for i in range(cfg.local_blocks)],
        projection=init_ec_conv(rng, w, 3, "local.proj"),
    )


def init_global_encoder(cfg: ModelConfig, rng) -> GlobalEncoderParams:
    stages = []
    c_in = 3
    for i, width in enumerate(cfg.global_widths):
        stages.append(init_edge_conv(rng, c_in, width, f"global.stage{i}"))
        c_in = width
    merged_in = sum(cfg.global_widths)
    hidden = max(cfg.proj_dim, cfg.global_feature_dim // 2)
    return GlobalEncoderParams(
        stages=stages,
        merge=init_linear(rng, merged_in, cfg.global_feature_dim, "global.merge"),
        head_hidden=init_linear(rng, cfg.global_feature_dim, hidden, "global.head1"),
        head_out=init_linear(rng, hidden, cfg.proj_dim, "global.head2"),
    )


def init_fusion(cfg: ModelConfig, rng) -> FusionParams:
    fan_in = cfg.local_width + cfg.global_feature_dim
    w_local = glorot_uniform(rng, fan_in, cfg.fused_dim,
                             (cfg.local_width, cfg.fused_dim))
    w_global = glorot_uniform(rng, fan_in, cfg.fused_dim,
                              (cfg.global_feature_dim, cfg.fused_dim))
    return FusionParams(
        w_local=Parameter("fusion.w_local", Tensor(w_local, requires_grad=True)),
        w_global=Parameter("fusion.w_global", Tensor(w_global, requires_grad=True)),
        bias=Parameter("fusion.bias",
                       Tensor(np.zeros(cfg.fused_dim), requires_grad=True)),
    )


def init_decoder(cfg: ModelConfig, rng) -> DecoderParams:
    c = cfg.fused_dim
    head_hidden = max(8, c // 2)
    return DecoderParams(
        conv1=init_edge_conv(rng, c, c, "decoder.conv1"),
        pool1=init_ec_conv(rng, c, 1, "decoder.pool1"),
        conv2=init_edge_conv(rng, c, c, "decoder.conv2"),
        inter_head=init_mlp_head(rng, c, head_hidden, 3, "decoder.inter"),
        pool2=init_ec_conv(rng, c, 1, "decoder.pool2"),
        conv3=init_edge_conv(rng, c, c, "decoder.conv3"),
        final_head=init_mlp_head(rng, c, head_hidden, 3, "decoder.final"),
    )


def init_model_bundle(cfg: ModelConfig, rng, num_classes: int | None = None):
    cfg.validate()
    bundle = ModelBundle(
        config=cfg,
        local=init_local_encoder(cfg, rng),
        global_enc=init_global_encoder(cfg, rng),
        fusion=init_fusion(cfg, rng),
        decoder=init_decoder(cfg, rng),
        classifier=(init_linear(rng, cfg.global_feature_dim, num_classes,
                                "classifier") if num_classes else None),
    )
    bundle.parameters()  # uniqueness check
    return bundle


# ---------------------------------------------------------------------------
# forward passes


def _as_points_tensor(points) -> Tensor:
    t = points if isinstance(points, Tensor) else Tensor(points)
    if t.values.ndim != 2 or t.shape[1] != 3:
        raise ShapeMismatchError(f"expected P x 3 points, got {t.shape}")
    return t


def local_encoder_forward(points, cfg: ModelConfig, params: LocalEncoderParams,
                          with_projection: bool = False) -> Tensor:
    """Per-point features from the denoising encoder; with the projection
    layer attached the output is the denoised cloud itself (input plus a
    predicted per-point displacement)."""
    pts = _as_points_tensor(points)
    p = pts.shape[0]
    if p <= cfg.k_local:
        raise ValueError(f"local encoder: need P > k_local ({p} <= {cfg.k_local})")
    x = linear(pts, params.lift)
    for block in params.blocks:
        x = residual_denoise_block(x, knn_graph(x, cfg.k_local), block)
    if with_projection:
        displacement = ec_conv(x, knn_graph(x, cfg.k_local), params.projection)
        return add(pts, displacement)
    return x


def global_encoder_forward(points, cfg: ModelConfig, params: GlobalEncoderParams,
                           with_head: bool = False) -> Tensor:
    """Whole-cloud feature vector: stacked EdgeConv stages on dynamically
    rebuilt graphs, stage outputs concatenated, merged, then max-pooled over
    points. The projection head is for contrastive pretraining only."""
    x = _as_points_tensor(points)
    p = x.shape[0]
    if p <= cfg.k_global:
        raise ValueError(f"global encoder: need P > k_global ({p} <= {cfg.k_global})")
    stage_outs = []
    for stage in params.stages:
        x = edge_conv(x, knn_graph(x, cfg.k_global), stage)
        stage_outs.append(x)
    merged = linear(concat(stage_outs, axis=1), params.merge)
    gvec = max_reduce(merged, axis=0)  # [global_feature_dim]
    if with_head:
        h = relu(linear(reshape(gvec, (1, cfg.global_feature_dim)),
                        params.head_hidden))
        return reshape(linear(h, params.head_out), (cfg.proj_dim,))
    return gvec


def fuse(local_feats: Tensor, global_vec: Tensor, params: FusionParams) -> Tensor:
    """Split-sum fusion: W_local x_i + W_global g + bias, algebraically the
    same map as concatenating (x_i, g) and applying one combined matrix."""
    wl, wg = params.w_local.tensor, params.w_global.tensor
    if local_feats.shape[1] != wl.shape[0]:
        raise ShapeMismatchError(
            f"fuse: local width {local_feats.shape[1]} vs weight {wl.shape[0]}")
    if global_vec.values.ndim != 1 or global_vec.shape[0] != wg.shape[0]:
        raise ShapeMismatchError(
            f"fuse: global width {global_vec.shape} vs weight {wg.shape[0]}")
    p = local_feats.shape[0]
    fused_dim = wl.shape[1]
    grow = add(matmul(reshape(global_vec, (1, wg.shape[0])), wg),
               reshape(params.bias.tensor, (1, fused_dim)))
    return add(matmul(local_feats, wl), broadcast_to(grow, (p, fused_dim)))


def decoder_forward(fused: Tensor, cfg: ModelConfig, params: DecoderParams):
    """Decode fused per-point features into the auxiliary frame+missing
    prediction and the missing-part prediction.

    Standard mode: EdgeConv -> pool to inter_nodes -> EdgeConv ->
    [auxiliary head] -> pool to final_nodes -> EdgeConv -> final head.
    Large-hole mode skips both pools and the auxiliary head and maps every
    node through the final head, returning (None, y_m)."""
    p = fused.shape[0]
    if cfg.large_hole_mode:
        x = edge_conv(fused, knn_graph(fused, cfg.k_decoder), params.conv1)
        x = edge_conv(x, knn_graph(x, cfg.k_decoder), params.conv2)
        x = edge_conv(x, knn_graph(x, cfg.k_decoder), params.conv3)
        return None, mlp_head(x, params.final_head)
    if p < cfg.inter_nodes:
        raise ValueError(
            f"decoder: needs P >= inter_nodes ({p} < {cfg.inter_nodes})")
    x = edge_conv(fused, knn_graph(fused, cfg.k_decoder), params.conv1)
    x, _, _ = sag_pool(x, knn_graph(x, cfg.k_pool1), cfg.inter_nodes, params.pool1)
    x = edge_conv(x, knn_graph(x, cfg.k_decoder), params.conv2)
    y_fm = mlp_head(x, params.inter_head)
    x, _, _ = sag_pool(x, knn_graph(x, cfg.k_pool2), cfg.final_nodes, params.pool2)
    x = edge_conv(x, knn_graph(x, cfg.k_decoder), params.conv3)
    y_m = mlp_head(x, params.final_head)
    return y_fm, y_m


def completion_forward(points, bundle: ModelBundle):
    """Full partial-input -> (y_fm, y_m) pipeline used by training and eval."""
    cfg = bundle.config
    local_feats = local_encoder_forward(points, cfg, bundle.local,
                                        with_projection=False)
    global_vec = global_encoder_forward(points, cfg, bundle.global_enc,
                                        with_head=False)
    fused = fuse(local_feats, global_vec, bundle.fusion)
    return decoder_forward(fused, cfg, bundle.decoder)


def classify_head(global_vec: Tensor, params: LinearParams) -> Tensor:
    c = params.weight.tensor.shape
    logits = linear(reshape(global_vec, (1, c[0])), params)
    return reshape(logits, (c[1],))


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: magic "DECO", u32 version, u64 config length, config text
# (key=value lines, utf-8), then per-array records: u32 name length, name
# bytes, u32 rank, u64 extents, raw little-endian float64 values.

CHECKPOINT_MAGIC = b"DECO"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, config_items: dict, arrays: dict):
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    config_text = "".join(f"{k}={v}\n" for k, v in config_items.items()).encode()
    blob += struct.pack("<Q", len(config_text))
    blob += config_text
    for name, values in arrays.items():
        arr = np.ascontiguousarray(values, dtype="<f8")
        name_bytes = name.encode()
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg_len, = struct.unpack("<Q", blob[8:16])
    offset = 16
    config_items = {}
    for line in blob[offset:offset + cfg_len].decode().splitlines():
        if line:
            key, _, value = line.partition("=")
            config_items[key] = value
    offset += cfg_len
    arrays = {}
    while offset < len(blob):
        name_len, = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode()
        offset += name_len
        rank, = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    return config_items, arrays


_CONFIG_PARSERS = {
    int: int,
    float: float,
    bool: lambda s: s == "True",
    tuple: lambda s: tuple(int(x) for x in s.split(",") if x),
}


def config_to_items(cfg: ModelConfig) -> dict:
    items = {}
    for fld in fields(cfg):
        value = getattr(cfg, fld.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        items[fld.name] = value
    return items


def config_from_items(items: dict) -> ModelConfig:
    kwargs = {}
    for fld in fields(ModelConfig):
        if fld.name not in items:
            continue
        default = getattr(ModelConfig(), fld.name)
        parser = _CONFIG_PARSERS[type(default)]
        kwargs[fld.name] = parser(items[fld.name])
    return ModelConfig(**kwargs)


def save_bundle(bundle: ModelBundle, path, extra_config: dict | None = None,
                extra_arrays: dict | None = None):
    config_items = {"kind": "bundle"}
    config_items.update(config_to_items(bundle.config))
    if bundle.classifier is not None:
        config_items["num_classes"] = bundle.classifier.weight.tensor.shape[1]
    config_items.update(extra_config or {})
    arrays = {p.name: p.tensor.values for p in bundle.parameters()}
    arrays.update(extra_arrays or {})
    save_checkpoint(path, config_items, arrays)


def load_bundle(path):
    """Returns (bundle, extra_config, extra_arrays); extra arrays are any
    records that do not belong to a model parameter (optimizer state)."""
    config_items, arrays = load_checkpoint(path)
    if config_items.get("kind") != "bundle":
        raise ValueError(f"{path}: not a model bundle checkpoint")
    cfg = config_from_items(config_items)
    num_classes = int(config_items.get("num_classes", 0)) or None
    bundle = init_model_bundle(cfg, np.random.default_rng(0),
                               num_classes=num_classes)
    consumed = set()
    for param in bundle.parameters():
        if param.name not in arrays:
            raise ValueError(f"{path}: missing parameter record '{param.name}'")
        stored = arrays[param.name]
        if stored.shape != param.tensor.values.shape:
            raise ValueError(
                f"{path}: parameter '{param.name}' has shape {stored.shape}, "
                f"expected {param.tensor.values.shape}")
        param.tensor.values[...] = stored
        consumed.add(param.name)
    model_fields = set(f.name for f in fields(ModelConfig)) | {"kind", "num_classes"}
    extra_config = {k: v for k, v in config_items.items() if k not in model_fields}
    extra_arrays = {k: v for k, v in arrays.items() if k not in consumed}
    return bundle, extra_config, extra_arrays


def save_params(params: list, path, kind: str, cfg: ModelConfig,
                extra_config: dict | None = None):
    """Encoder-only checkpoint (pretext phases store just their component)."""
    config_items = {"kind": kind}
    config_items.update(config_to_items(cfg))
    config_items.update(extra_config or {})
    save_checkpoint(path, config_items, {p.name: p.tensor.values for p in params})


def load_params_into(params: list, path, expected_kind: str):
    config_items, arrays = load_checkpoint(path)
    if config_items.get("kind") != expected_kind:
        raise ValueError(
            f"{path}: checkpoint kind '{config_items.get('kind')}', "
            f"expected '{expected_kind}'")
    for param in params:
        if param.name not in arrays:
            raise ValueError(f"{path}: missing parameter record '{param.name}'")
        stored = arrays[param.name]
        if stored.shape != param.tensor.values.shape:
            raise ValueError(
                f"{path}: parameter '{param.name}' has shape {stored.shape}, "
                f"expected {param.tensor.values.shape}")
        param.tensor.values[...] = stored
    return config_items
