"""Optimization loops: Adam with halving schedules, the denoising and
contrastive pretext phases, the supervised-classification pretext used by
the ablation, and downstream completion training.

Batching is gradient accumulation over single-cloud tapes. Every epoch
draws its randomness from a generator derived from (seed, phase, epoch), so
resuming from a checkpoint replays the exact stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import data as dataset_mod
from .autodiff import Tensor, backward, fresh_tape, zero_grads
from .data import (
    PointCloud,
    augment_group,
    crop_by_viewpoint,
    derive_seed,
    sample_viewpoint,
    two_hole_crop,
)
from .losses import chamfer, completion_loss, cross_entropy, mse_denoise, nt_xent_grouped
from .models import (
    ModelBundle,
    ModelConfig,
    classify_head,
    completion_forward,
    global_encoder_forward,
    global_encoder_parameters,
    init_global_encoder,
    init_linear,
    init_local_encoder,
    init_model_bundle,
    local_encoder_forward,
    local_encoder_parameters,
    save_bundle,
)

PROTOCOLS = ("single-hole", "large-hole", "two-hole")


@dataclass
class Schedule:
    """Optimization schedule; defaults follow the full-scale recipe
    (240 epochs, batch 30, lr halved every 25/40 epochs for encoder and
    decoder groups)."""

    epochs: int = 240
    batch_size: int = 30
    encoder_halving_period: int = 25
    decoder_halving_period: int = 40
    base_lr: float = 0.001
    grad_clip: float = 10.0
    divergence_factor: float = 10.0
    checkpoint_interval: int = 0  # epochs between checkpoints; 0 = final only

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("Schedule: epochs and batch_size must be >= 1")
        if self.encoder_halving_period < 1 or self.decoder_halving_period < 1:
            raise ValueError("Schedule: halving periods must be >= 1")
        return self

    @classmethod
    def desk(cls, epochs: int = 30, batch_size: int = 8):
        return cls(epochs=epochs, batch_size=batch_size)


@dataclass
class RunRecord:
    """Per-epoch loss curves plus enough context to reproduce the run."""

    seed: int
    config: dict
    rows: list = field(default_factory=list)
    wall_time: float = 0.0

    def add(self, epoch, split, loss_total, loss_missing=None, loss_frame=None,
            lr_encoder=None, lr_decoder=None):
        self.rows.append({
            "epoch": epoch, "split": split, "loss_total": loss_total,
            "loss_missing": loss_missing, "loss_frame": loss_frame,
            "lr_encoder": lr_encoder, "lr_decoder": lr_decoder,
        })

    def losses(self, split: str = "train"):
        return [r["loss_total"] for r in self.rows if r["split"] == split]

    def to_csv(self) -> str:
        def cell(value):
            return "" if value is None else repr(value)

        lines = ["epoch,split,loss_total,loss_missing,loss_frame,"
                 "lr_encoder,lr_decoder"]
        for r in self.rows:
            lines.append(",".join([
                str(r["epoch"]), r["split"], cell(r["loss_total"]),
                cell(r["loss_missing"]), cell(r["loss_frame"]),
                cell(r["lr_encoder"]), cell(r["lr_decoder"]),
            ]))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    moments1: dict = field(default_factory=dict)
    moments2: dict = field(default_factory=dict)


def init_adam(params) -> AdamState:
    state = AdamState()
    for p in params:
        state.moments1[p.name] = np.zeros_like(p.tensor.values)
        state.moments2[p.name] = np.zeros_like(p.tensor.values)
    return state


def adam_step(params, state: AdamState, lr: float):
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p in params:
        g = p.tensor.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"adam_step: non-finite gradient for parameter '{p.name}'")
        m = state.moments1[p.name]
        v = state.moments2[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.tensor.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


def clip_gradients(params, max_norm: float) -> float:
    """Global-norm clipping across the given parameters; returns the norm."""
    total = 0.0
    for p in params:
        g = p.tensor.grad
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.tensor.grad *= scale
    return float(norm)


def lr_at(epoch: int, base: float, period: int) -> float:
    """Learning rate halved every ``period`` epochs."""
    if epoch < 0:
        raise ValueError("lr_at: epoch must be >= 0")
    if period < 1:
        raise ValueError("lr_at: period must be >= 1")
    return base * 0.5 ** (epoch // period)


def _batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _guard_divergence(record: RunRecord, factor: float, phase: str):
    losses = record.losses("train")
    if len(losses) >= 2 and losses[-1] > factor * max(losses[0], 1e-12):
        raise RuntimeError(
            f"{phase}: diverged (epoch loss {losses[-1]:.4g} exceeds "
            f"{factor:.0f}x initial {losses[0]:.4g})")


# ---------------------------------------------------------------------------
# pretext: denoising


def pretrain_denoise(clouds, cfg: ModelConfig, epochs: int, rng,
                     schedule: Schedule | None = None,
                     epoch_callback=None):
    """Denoising pretext: perturb complete clouds with Gaussian noise and
    minimize the per-point MSE of the reconstructed cloud. Returns the local
    encoder parameters (projection layer attached but flagged for dropping)
    and the run record."""
    if not clouds:
        raise ValueError("pretrain_denoise: empty dataset")
    schedule = (schedule or Schedule.desk(epochs=epochs)).validate()
    params = init_local_encoder(cfg, rng)
    plist = local_encoder_parameters(params, include_projection=True)
    adam = init_adam(plist)
    record = RunRecord(seed=-1, config={"phase": "denoise", "epochs": epochs})
    start = time.perf_counter()
    for epoch in range(epochs):
        lr = lr_at(epoch, schedule.base_lr, schedule.encoder_halving_period)
        order = rng.permutation(len(clouds))
        epoch_loss = 0.0
        for batch in _batches(order, schedule.batch_size):
            zero_grads(plist)
            for idx in batch:
                clean = clouds[idx].points
                noisy = clean + rng.normal(0.0, cfg.denoise_sigma, size=clean.shape)
                with fresh_tape():
                    denoised = local_encoder_forward(noisy, cfg, params,
                                                     with_projection=True)
                    loss = mse_denoise(denoised, clean)
                    backward(loss.scalar * (1.0 / len(batch)))
                epoch_loss += loss.item()
            clip_gradients(plist, schedule.grad_clip)
            adam_step(plist, adam, lr)
        record.add(epoch, "train", epoch_loss / len(clouds), lr_encoder=lr)
        _guard_divergence(record, schedule.divergence_factor, "pretrain_denoise")
        if epoch_callback and epoch_callback(epoch, record):
            break
    record.wall_time = time.perf_counter() - start
    return params, record


# ---------------------------------------------------------------------------
# pretext: contrastive


def pretrain_contrastive(clouds, cfg: ModelConfig, epochs: int, rng,
                         group_size: int = 4, groups_per_batch: int = 4,
                         schedule: Schedule | None = None,
                         epoch_callback=None):
    """Contrastive pretext over augmented groups: each source cloud yields
    ``group_size`` transformed crops embedded through the projection head,
    trained with the grouped NT-Xent loss. Returns the global encoder
    parameters (head attached but dropped downstream) and the run record."""
    if group_size not in (2, 4):
        raise ValueError("pretrain_contrastive: group_size must be 2 or 4")
    if len(clouds) < 2:
        raise ValueError("pretrain_contrastive: need at least 2 source clouds")
    schedule = (schedule or Schedule.desk(epochs=epochs)).validate()
    params = init_global_encoder(cfg, rng)
    plist = global_encoder_parameters(params, include_head=True)
    adam = init_adam(plist)
    record = RunRecord(seed=-1, config={"phase": "contrastive", "epochs": epochs,
                                        "group_size": group_size})
    start = time.perf_counter()
    for epoch in range(epochs):
        lr = lr_at(epoch, schedule.base_lr, schedule.encoder_halving_period)
        order = rng.permutation(len(clouds))
        epoch_loss = 0.0
        n_batches = 0
        for batch in _batches(order, groups_per_batch):
            if len(batch) < 2:
                continue  # a single group has no negatives
            zero_grads(plist)
            with fresh_tape():
                embeddings = []
                for idx in batch:
                    group = augment_group(clouds[idx], group_size, rng,
                                          crop_fraction=cfg.crop_fraction)
                    for variant in group.variants:
                        z = global_encoder_forward(variant.points, cfg, params,
                                                   with_head=True)
                        embeddings.append(_as_row(z))
                stacked = _stack_rows(embeddings)
                loss = nt_xent_grouped(stacked, group_size, cfg.temperature)
                backward(loss.scalar)
            clip_gradients(plist, schedule.grad_clip)
            adam_step(plist, adam, lr)
            epoch_loss += loss.item()
            n_batches += 1
        if n_batches == 0:
            raise ValueError("pretrain_contrastive: batch smaller than 2 groups")
        record.add(epoch, "train", epoch_loss / n_batches, lr_encoder=lr)
        _guard_divergence(record, schedule.divergence_factor,
                          "pretrain_contrastive")
        if epoch_callback and epoch_callback(epoch, record):
            break
    record.wall_time = time.perf_counter() - start
    return params, record


def _as_row(vec):
    from .autodiff import reshape
    return reshape(vec, (1, vec.shape[0]))


def _stack_rows(rows):
    from .autodiff import concat
    return concat(rows, axis=0)


# ---------------------------------------------------------------------------
# pretext: supervised classification (ablation only)


def pretrain_classify(clouds, cfg: ModelConfig, epochs: int, rng,
                      schedule: Schedule | None = None,
                      freeze_encoder: bool = False):
    """Supervised classification pretext: linear head on the global feature
    vector, cross-entropy on class labels."""
    labels = [c.label for c in clouds]
    if any(l is None for l in labels):
        raise ValueError("pretrain_classify: dataset must be fully labeled")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("pretrain_classify: need at least 2 classes")
    num_classes = max(classes) + 1
    schedule = (schedule or Schedule.desk(epochs=epochs)).validate()
    params = init_global_encoder(cfg, rng)
    head = init_linear(rng, cfg.global_feature_dim, num_classes, "classifier")
    encoder_list = global_encoder_parameters(params, include_head=False)
    head_list = [head.weight, head.bias]
    plist = (head_list if freeze_encoder else encoder_list + head_list)
    adam = init_adam(plist)
    record = RunRecord(seed=-1, config={"phase": "classify", "epochs": epochs})
    start = time.perf_counter()
    for epoch in range(epochs):
        lr = lr_at(epoch, schedule.base_lr, schedule.encoder_halving_period)
        order = rng.permutation(len(clouds))
        epoch_loss = 0.0
        n_correct = 0
        for batch in _batches(order, schedule.batch_size):
            zero_grads(plist)
            with fresh_tape():
                logit_rows = []
                for idx in batch:
                    gvec = global_encoder_forward(clouds[idx].points, cfg, params,
                                                  with_head=False)
                    logit_rows.append(_as_row(classify_head(gvec, head)))
                logits = _stack_rows(logit_rows)
                batch_labels = [clouds[idx].label for idx in batch]
                loss = cross_entropy(logits, batch_labels)
                backward(loss.scalar)
            n_correct += int((logits.values.argmax(axis=1) ==
                              np.asarray(batch_labels)).sum())
            clip_gradients(plist, schedule.grad_clip)
            adam_step(plist, adam, lr)
            epoch_loss += loss.item() * len(batch)
        record.add(epoch, "train", epoch_loss / len(clouds), lr_encoder=lr)
        record.rows[-1]["accuracy"] = n_correct / len(clouds)
        _guard_divergence(record, schedule.divergence_factor, "pretrain_classify")
    record.wall_time = time.perf_counter() - start
    return params, record


# ---------------------------------------------------------------------------
# downstream completion


def make_crop(cloud: PointCloud, cfg: ModelConfig, rng,
              protocol: str = "single-hole"):
    """Draw the protocol-appropriate partial sample for one cloud."""
    if protocol == "single-hole":
        return crop_by_viewpoint(cloud, sample_viewpoint(rng),
                                 cfg.missing_points, cfg.frame_points)
    if protocol == "large-hole":
        return crop_by_viewpoint(cloud, sample_viewpoint(rng),
                                 cfg.missing_points, 0)
    if protocol == "two-hole":
        m1 = cfg.missing_points // 2
        m2 = cfg.missing_points - m1
        return two_hole_crop(cloud, (sample_viewpoint(rng), sample_viewpoint(rng)),
                             m1, m2, cfg.frame_points)
    raise ValueError(f"make_crop: unknown protocol '{protocol}'")


def completion_sample_loss(bundle: ModelBundle, sample, use_frame: bool):
    """Forward plus loss for one partial sample; the frame term only exists
    when the auxiliary head is active."""
    y_fm, y_m = completion_forward(sample.x_p, bundle)
    if use_frame and y_fm is not None:
        return completion_loss(y_m, sample.x_m, y_fm, sample.x_fm)
    loss = chamfer(y_m, sample.x_m, normalizer=sample.x_m.shape[0])
    loss.diagnostics = {"total": loss.item(), "missing": loss.item()}
    return loss


def encoder_group(bundle: ModelBundle):
    params = local_encoder_parameters(bundle.local, include_projection=False)
    params += global_encoder_parameters(bundle.global_enc, include_head=False)
    params += [bundle.fusion.w_local, bundle.fusion.w_global, bundle.fusion.bias]
    return params


def decoder_group(bundle: ModelBundle):
    from .models import _walk_parameters
    return list(_walk_parameters(bundle.decoder))


def _load_pretrained(bundle: ModelBundle, pretrained):
    pretrained = pretrained or {}
    local = pretrained.get("local")
    if local is not None:
        for dst, src in zip(local_encoder_parameters(bundle.local),
                            local_encoder_parameters(local)):
            dst.tensor.values[...] = src.tensor.values
    global_params = pretrained.get("global")
    if global_params is not None:
        for dst, src in zip(global_encoder_parameters(bundle.global_enc),
                            global_encoder_parameters(global_params)):
            dst.tensor.values[...] = src.tensor.values


def _adam_arrays(prefix: str, state: AdamState) -> dict:
    arrays = {f"{prefix}.step": np.array([float(state.step)])}
    for name, m in state.moments1.items():
        arrays[f"{prefix}.m.{name}"] = m
    for name, v in state.moments2.items():
        arrays[f"{prefix}.v.{name}"] = v
    return arrays


def _restore_adam(prefix: str, state: AdamState, arrays: dict):
    state.step = int(arrays[f"{prefix}.step"][0])
    for name in state.moments1:
        state.moments1[name][...] = arrays[f"{prefix}.m.{name}"]
        state.moments2[name][...] = arrays[f"{prefix}.v.{name}"]


def train_completion(clouds, cfg: ModelConfig, schedule: Schedule,
                     seed: int = 0, pretrained=None, use_frame: bool = True,
                     protocol: str = "single-hole", out_dir=None,
                     val_clouds=None, val_every: int = 0,
                     resume_from=None, num_classes=None):
    """Train the full completion model.

    ``pretrained`` may carry 'local' and/or 'global' encoder parameters from
    the pretext phases. Two Adam groups run with distinct halving periods
    (encoder vs decoder). Checkpoints carry optimizer state, so resuming at
    an epoch boundary replays the run bit-exactly.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"train_completion: unknown protocol '{protocol}'")
    if not clouds:
        raise ValueError("train_completion: empty dataset")
    cfg.validate()
    schedule.validate()
    if protocol == "large-hole" and not cfg.large_hole_mode:
        raise ValueError("train_completion: large-hole protocol needs "
                         "cfg.large_hole_mode")
    use_frame = use_frame and not cfg.large_hole_mode

    bundle = init_model_bundle(cfg, np.random.default_rng(
        derive_seed(seed, "init")), num_classes=num_classes)
    _load_pretrained(bundle, pretrained)
    enc_params = encoder_group(bundle)
    dec_params = decoder_group(bundle)
    all_params = enc_params + dec_params
    adam_enc = init_adam(enc_params)
    adam_dec = init_adam(dec_params)
    record = RunRecord(seed=seed, config={
        "phase": "completion", "protocol": protocol,
        "use_frame": str(use_frame), "epochs": str(schedule.epochs)})
    start_epoch = 0
    if resume_from is not None:
        from .models import load_bundle
        bundle, extra_config, extra_arrays = load_bundle(resume_from)
        if "epoch" not in extra_config:
            raise ValueError(f"{resume_from}: checkpoint lacks resume metadata")
        enc_params = encoder_group(bundle)
        dec_params = decoder_group(bundle)
        all_params = enc_params + dec_params
        adam_enc = init_adam(enc_params)
        adam_dec = init_adam(dec_params)
        _restore_adam("adam.encoder", adam_enc, extra_arrays)
        _restore_adam("adam.decoder", adam_dec, extra_arrays)
        start_epoch = int(extra_config["epoch"])
        seed = int(extra_config["seed"])
        record.seed = seed

    start = time.perf_counter()
    for epoch in range(start_epoch, schedule.epochs):
        lr_enc = lr_at(epoch, schedule.base_lr, schedule.encoder_halving_period)
        lr_dec = lr_at(epoch, schedule.base_lr, schedule.decoder_halving_period)
        erng = np.random.default_rng(derive_seed(seed, "epoch", epoch))
        order = erng.permutation(len(clouds))
        sums = {"total": 0.0, "missing": 0.0, "frame": 0.0}
        for batch in _batches(order, schedule.batch_size):
            zero_grads(all_params)
            for idx in batch:
                sample = make_crop(clouds[idx], cfg, erng, protocol)
                with fresh_tape():
                    loss = completion_sample_loss(bundle, sample, use_frame)
                    backward(loss.scalar * (1.0 / len(batch)))
                sums["total"] += loss.diagnostics.get("total", loss.item())
                sums["missing"] += loss.diagnostics.get("missing", 0.0)
                sums["frame"] += loss.diagnostics.get("frame", 0.0)
            clip_gradients(all_params, schedule.grad_clip)
            adam_step(enc_params, adam_enc, lr_enc)
            adam_step(dec_params, adam_dec, lr_dec)
        n = len(clouds)
        record.add(epoch, "train", sums["total"] / n, sums["missing"] / n,
                   sums["frame"] / n if use_frame else None, lr_enc, lr_dec)
        _guard_divergence(record, schedule.divergence_factor, "train_completion")

        if val_clouds and val_every and (epoch + 1) % val_every == 0:
            val = evaluate_completion_loss(bundle, val_clouds, cfg, seed,
                                           protocol, use_frame)
            record.add(epoch, "val", val["total"], val["missing"],
                       val["frame"] if use_frame else None, lr_enc, lr_dec)

        if out_dir is not None:
            is_last = epoch + 1 == schedule.epochs
            interval = schedule.checkpoint_interval
            if is_last or (interval and (epoch + 1) % interval == 0):
                _write_checkpoint(bundle, adam_enc, adam_dec, epoch + 1, seed,
                                  out_dir, is_last)
    record.wall_time = time.perf_counter() - start
    return bundle, record


def _write_checkpoint(bundle, adam_enc, adam_dec, next_epoch, seed, out_dir,
                      is_last):
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extra_arrays = {}
    extra_arrays.update(_adam_arrays("adam.encoder", adam_enc))
    extra_arrays.update(_adam_arrays("adam.decoder", adam_dec))
    extra_config = {"epoch": next_epoch, "seed": seed}
    name = "model_final.deco" if is_last else f"model_epoch{next_epoch:04d}.deco"
    save_bundle(bundle, out_dir / name, extra_config, extra_arrays)
    return out_dir / name


def evaluate_completion_loss(bundle, clouds, cfg, seed, protocol, use_frame):
    """Mean completion loss over fixed per-cloud crops (viewpoints derived
    from the seed and source id, so repeated calls agree exactly)."""
    sums = {"total": 0.0, "missing": 0.0, "frame": 0.0}
    for cloud in clouds:
        crng = np.random.default_rng(derive_seed(seed, "eval", cloud.source_id))
        sample = make_crop(cloud, cfg, crng, protocol)
        with fresh_tape():
            loss = completion_sample_loss(bundle, sample, use_frame)
        sums["total"] += loss.diagnostics.get("total", loss.item())
        sums["missing"] += loss.diagnostics.get("missing", loss.item())
        sums["frame"] += loss.diagnostics.get("frame", 0.0)
    n = max(len(clouds), 1)
    return {k: v / n for k, v in sums.items()}


# ---------------------------------------------------------------------------
# run configuration files


def parse_config_text(text: str) -> dict:
    """key=value per line; '#' starts a comment."""
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, _, value = stripped.partition("=")
        items[key.strip()] = value.strip()
    return items


_EXTRA_KEYS = ("seed", "protocol", "epochs", "batch_size", "pretext_epochs",
               "group_size", "train_fraction", "n_shapes", "n_points")


def split_config_items(items: dict):
    """Partition config keys into (model, schedule, extras); unknown keys
    are an error."""
    model_fields = {f.name for f in fields(ModelConfig)}
    schedule_fields = {f.name for f in fields(Schedule)}
    model, sched, extras = {}, {}, {}
    for key, value in items.items():
        if key in model_fields:
            model[key] = value
        elif key in schedule_fields:
            sched[key] = value
        elif key in _EXTRA_KEYS:
            extras[key] = value
        else:
            raise ValueError(f"config: unknown key '{key}'")
    return model, sched, extras
