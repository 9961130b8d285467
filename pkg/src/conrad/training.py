"""The optimization loop: per step, refresh the visibility depth from the raw
density, render the reference depth through the constrained field for the
depth term, render one random view, turn the provider's noise residual into
an adjoint, add regularizers, and take one optimizer step on the flat
parameter vector. Also home to the optimizers, the JSON config mirror and
the binary checkpoint format.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .autodiff import GradAccumulator, ParamStore, backward
from .cameras import CameraIntrinsics, PoseBounds, generate_rays, sample_random_pose
from .constraints import (
    ConstrainedField,
    ReferenceConditioning,
    VisibilityDepthMap,
    WarmStartSchedule,
    visibility_from_densities,
    warm_alpha,
)
from .diffusion import Conditioning, DiffusionSchedule, ProviderError
from .field import HashGridConfig, MlpConfig, RadianceField
from .objectives import (
    LossReport,
    LossWeights,
    depth_loss,
    entropy_reg,
    orientation_reg,
    sds_adjoint,
    sds_surrogate,
    smoothness_reg,
)
from .volume import (
    MarchConfig,
    composite_weights,
    march_rays,
    normals_at,
    ray_sphere_bounds,
    sample_depths,
)

CHECKPOINT_MAGIC = b"CRAD"
CHECKPOINT_VERSION = 1

ADAN_BETAS = (0.98, 0.92, 0.99)
ADAM_BETAS = (0.9, 0.999)
OPT_EPS = 1e-8


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class NumericsError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 5000
    learning_rate: float = 0.005
    weight_decay: float = 2e-5
    optimizer: str = "adan"  # adan | adam
    loss_weights: LossWeights = dc_field(default_factory=LossWeights)
    pose_bounds: PoseBounds = dc_field(default_factory=PoseBounds)
    render_resolution: int = 64
    seed: int = 0
    eta: float = 0.1
    warm_start_fraction: float = 0.5
    grid: HashGridConfig = dc_field(default_factory=HashGridConfig)
    mlp: MlpConfig = dc_field(default_factory=MlpConfig)
    march: MarchConfig = dc_field(default_factory=lambda: MarchConfig(perturb=True))
    timestep_range: tuple[float, float] = (0.02, 0.98)
    checkpoint_every: int = 500
    pose_batch: int = 1
    invert_estimated_depth: bool = False
    normal_sample_cap: int = 8192
    depth_ray_subset: int = 0  # 0: depth term uses every reference ray
    single_threaded: bool = False

    def __post_init__(self):
        if self.total_steps <= 0 or self.learning_rate <= 0:
            raise ConfigError("total_steps and learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.optimizer not in ("adan", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.pose_batch < 1:
            raise ConfigError("pose_batch must be >= 1")
        if not 0 < self.eta < 1:
            raise ConfigError("eta must be in (0, 1)")


def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def _from_plain(cls, data, path="config"):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        raw = data[name]
        origin = f.type if isinstance(f.type, type) else None
        nested = _FIELD_TYPES.get((cls, name))
        if nested is not None:
            kwargs[name] = _from_plain(nested, raw, f"{path}.{name}")
        elif isinstance(raw, list):
            kwargs[name] = tuple(raw)
        else:
            kwargs[name] = raw
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from err


_FIELD_TYPES = {
    (TrainConfig, "loss_weights"): LossWeights,
    (TrainConfig, "pose_bounds"): PoseBounds,
    (TrainConfig, "grid"): HashGridConfig,
    (TrainConfig, "mlp"): MlpConfig,
    (TrainConfig, "march"): MarchConfig,
}


def config_to_json(config: TrainConfig) -> str:
    return json.dumps(_to_plain(config), sort_keys=True, separators=(",", ":"))


def config_from_json(text: str) -> TrainConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    return _from_plain(TrainConfig, data)


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    step_count: int
    m: torch.Tensor
    v: torch.Tensor
    n: torch.Tensor
    g_prev: torch.Tensor

    @classmethod
    def fresh(cls, kind: str, n_params: int, dtype=torch.float32) -> "OptimizerState":
        z = lambda: torch.zeros(n_params, dtype=dtype)
        return cls(kind=kind, step_count=0, m=z(), v=z(), n=z(), g_prev=z())


@torch.no_grad()
def optimizer_step(store: ParamStore, grads: GradAccumulator, state: OptimizerState,
                   learning_rate: float, weight_decay: float) -> None:
    """One decoupled-weight-decay update (Adan or Adam) on the flat vector."""
    g = grads.grads
    if not torch.isfinite(g).all():
        raise NumericsError("non-finite gradient")
    state.step_count += 1
    t = state.step_count
    theta = store.values

    if state.kind == "adan":
        b1, b2, b3 = ADAN_BETAS
        diff = torch.zeros_like(g) if t == 1 else g - state.g_prev
        state.m.mul_(b1).add_(g, alpha=1 - b1)
        state.v.mul_(b2).add_(diff, alpha=1 - b2)
        update_dir = g + b2 * diff
        state.n.mul_(b3).addcmul_(update_dir, update_dir, value=1 - b3)
        m_hat = state.m / (1 - b1**t)
        v_hat = state.v / (1 - b2**t)
        n_hat = state.n / (1 - b3**t)
        step_vec = (m_hat + b2 * v_hat) / (n_hat.sqrt() + OPT_EPS)
        state.g_prev.copy_(g)
    elif state.kind == "adam":
        b1, b2 = ADAM_BETAS
        state.m.mul_(b1).add_(g, alpha=1 - b1)
        state.v.mul_(b2).addcmul_(g, g, value=1 - b2)
        m_hat = state.m / (1 - b1**t)
        v_hat = state.v / (1 - b2**t)
        step_vec = m_hat / (v_hat.sqrt() + OPT_EPS)
    else:
        raise ConfigError(f"unknown optimizer {state.kind!r}")

    theta.mul_(1.0 - learning_rate * weight_decay)
    theta.add_(step_vec, alpha=-learning_rate)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    step: int
    config: TrainConfig
    params: torch.Tensor  # flat
    opt_state: OptimizerState
    rng_state: bytes

    _DTYPE_TAGS = {torch.float32: 0, torch.float64: 1}
    _TAG_DTYPES = {0: torch.float32, 1: torch.float64}
    _OPT_TAGS = {"adan": 0, "adam": 1}
    _TAG_OPTS = {0: "adan", 1: "adam"}


def _tensor_bytes(t: torch.Tensor) -> bytes:
    dt = "<f4" if t.dtype == torch.float32 else "<f8"
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype=dt).tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    cfg_blob = config_to_json(ckpt.config).encode("utf-8")
    dtype_tag = Checkpoint._DTYPE_TAGS[ckpt.params.dtype]
    out = bytearray()
    out += struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    out += struct.pack("<Q", ckpt.step)
    out += struct.pack("<I", len(cfg_blob)) + cfg_blob
    out += struct.pack("<IQ", dtype_tag, ckpt.params.numel())
    out += _tensor_bytes(ckpt.params)
    st = ckpt.opt_state
    out += struct.pack("<IQ", Checkpoint._OPT_TAGS[st.kind], st.step_count)
    for arr in (st.m, st.v, st.n, st.g_prev):
        out += struct.pack("<Q", arr.numel()) + _tensor_bytes(arr)
    out += struct.pack("<I", len(ckpt.rng_state)) + ckpt.rng_state
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint file")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    magic, version = r.unpack("<4sI")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    (step,) = r.unpack("<Q")
    (cfg_len,) = r.unpack("<I")
    config = config_from_json(r.take(cfg_len).decode("utf-8"))
    dtype_tag, n_params = r.unpack("<IQ")
    dtype = Checkpoint._TAG_DTYPES.get(dtype_tag)
    if dtype is None:
        raise CheckpointError(f"unknown dtype tag {dtype_tag}")
    itemsize = 4 if dtype == torch.float32 else 8
    np_dt = "<f4" if dtype == torch.float32 else "<f8"
    params = torch.from_numpy(
        np.frombuffer(r.take(n_params * itemsize), dtype=np_dt).copy()
    ).to(dtype)
    opt_tag, opt_step = r.unpack("<IQ")
    kind = Checkpoint._TAG_OPTS.get(opt_tag)
    if kind is None:
        raise CheckpointError(f"unknown optimizer tag {opt_tag}")
    arrays = []
    for _ in range(4):
        (count,) = r.unpack("<Q")
        arrays.append(torch.from_numpy(
            np.frombuffer(r.take(count * itemsize), dtype=np_dt).copy()
        ).to(dtype))
    (rng_len,) = r.unpack("<I")
    rng_state = r.take(rng_len)
    if r.pos != len(r.raw):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(
        step=step, config=config, params=params,
        opt_state=OptimizerState(kind, opt_step, *arrays),
        rng_state=bytes(rng_state),
    )


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def make_field(config: TrainConfig, generator: torch.Generator | None = None,
               dtype=torch.float32) -> RadianceField:
    return RadianceField(grid=config.grid, mlp=config.mlp, dtype=dtype, generator=generator)


def _prepare_depth(conditioning: ReferenceConditioning, config: TrainConfig):
    if conditioning.est_depth is None:
        return None
    d = conditioning.est_depth.to(torch.float32)
    if config.invert_estimated_depth:
        d = -d
    std = d.std()
    if std > 1e-12:
        d = (d - d.mean()) / std
    return d


class _ReferenceGeometry:
    """Fixed per-run data for the reference view: midpoint sample positions
    and the constant mask value along each ray (every sample of a reference
    ray projects back to its own pixel center)."""

    def __init__(self, conditioning: ReferenceConditioning, march: MarchConfig):
        rays = generate_rays(conditioning.pose, conditioning.intrinsics)
        near, far = ray_sphere_bounds(rays.origins, rays.directions)
        cfg = dataclasses.replace(march, stratified=False, perturb=False)
        self.ts, self.deltas = sample_depths(near, far, cfg, None)  # [R, S]
        self.far = far
        self.points = (
            rays.origins[:, None, :] + self.ts[..., None] * rays.directions[:, None, :]
        )  # [R, S, 3]
        self.ray_mask = conditioning.mask.reshape(-1).to(self.ts.dtype)  # [R]
        self.height = conditioning.intrinsics.height
        self.width = conditioning.intrinsics.width

    def visibility_map(self, field, eta: float) -> VisibilityDepthMap:
        with torch.no_grad():
            sigma = field.density(self.points.reshape(-1, 3)).reshape(self.ts.shape)
            values, valid = visibility_from_densities(sigma, self.ts, self.deltas, self.far, eta)
        return VisibilityDepthMap(values=values.reshape(self.height, self.width),
                                  valid=valid.reshape(self.height, self.width))

    def constrained_depth(self, field, alpha_ws: float, ray_idx: torch.Tensor | None):
        """Depth + accumulated alpha of the constrained field along (a subset
        of) the reference rays; differentiable w.r.t. the field."""
        if ray_idx is None:
            pts, ts, deltas, m = self.points, self.ts, self.deltas, self.ray_mask
        else:
            pts, ts = self.points[ray_idx], self.ts[ray_idx]
            deltas, m = self.deltas[ray_idx], self.ray_mask[ray_idx]
        sigma = field.density(pts.reshape(-1, 3)).reshape(ts.shape)
        multiplier = 1.0 - alpha_ws * (1.0 - m)
        _, weights = composite_weights(multiplier[:, None] * sigma, deltas)
        alpha = weights.sum(-1)
        depth = (weights * ts).sum(-1) / alpha.clamp_min(1e-6)
        return depth, alpha


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: list
    checkpoint_path: Path | None


def train(conditioning: ReferenceConditioning, config: TrainConfig, provider,
          run_dir=None, resume_from: Checkpoint | None = None,
          step_callback=None) -> TrainResult:
    """Run the optimization from `resume_from` (or scratch) to total_steps.

    Writes a JSONL loss log and periodic checkpoints under run_dir when
    given. Provider failures that survive their retries abort with a
    resumable checkpoint on disk; non-finite losses abort outright.
    """
    if config.single_threaded:
        torch.set_num_threads(1)

    gen = torch.Generator()
    gen.manual_seed(config.seed)
    field = make_field(config, generator=gen)
    opt_state = OptimizerState.fresh(config.optimizer, len(field.params))
    start_step = 0
    if resume_from is not None:
        field.params.load_flat(resume_from.params)
        opt_state = resume_from.opt_state
        gen.set_state(torch.frombuffer(bytearray(resume_from.rng_state), dtype=torch.uint8).clone())
        start_step = resume_from.step

    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(config_to_json(config))
        log_file = open(run_dir / "loss_log.jsonl", "a" if start_step else "w")

    ref_geom = _ReferenceGeometry(conditioning, config.march)  # precomputed once
    render_intr = CameraIntrinsics(
        vertical_fov=conditioning.intrinsics.vertical_fov,
        width=config.render_resolution, height=config.render_resolution,
    )
    est_depth = _prepare_depth(conditioning, config)
    est_depth_flat = est_depth.reshape(-1) if est_depth is not None else None
    schedule = DiffusionSchedule()
    warm = WarmStartSchedule(config.total_steps, config.warm_start_fraction)
    weights = config.loss_weights
    n_ref_rays = conditioning.intrinsics.height * conditioning.intrinsics.width

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            step=step, config=config, params=field.params.values.detach().clone(),
            opt_state=dataclasses.replace(
                opt_state, m=opt_state.m.clone(), v=opt_state.v.clone(),
                n=opt_state.n.clone(), g_prev=opt_state.g_prev.clone(),
            ),
            rng_state=gen.get_state().numpy().tobytes(),
        )

    def write_ckpt(step: int, final: bool) -> Path | None:
        if run_dir is None:
            return None
        name = "ckpt_final.crad" if final else f"ckpt_step{step:06d}.crad"
        path = run_dir / name
        save_checkpoint(path, snapshot(step))
        return path

    reports = []
    last_path = None
    try:
        for step in range(start_step, config.total_steps):
            alpha_ws = warm_alpha(step, warm)
            v_map = ref_geom.visibility_map(field, config.eta)
            cfield = ConstrainedField(field, conditioning, v_map, alpha_ws)

            if est_depth_flat is not None and weights.depth > 0:
                if 0 < config.depth_ray_subset < n_ref_rays:
                    ray_idx = torch.randperm(n_ref_rays, generator=gen)[: config.depth_ray_subset]
                else:
                    ray_idx = None
                ref_depth, ref_alpha = ref_geom.constrained_depth(field, alpha_ws, ray_idx)
                sel_mask = ref_geom.ray_mask if ray_idx is None else ref_geom.ray_mask[ray_idx]
                sel_est = est_depth_flat if ray_idx is None else est_depth_flat[ray_idx]
                d_term, _ = depth_loss(ref_depth, sel_est, sel_mask, ref_alpha)
            else:
                d_term = torch.zeros(())

            sds_mag = 0.0
            t_used = 0
            ent = orient = smooth = torch.zeros(())
            view_total = torch.zeros(())
            for _ in range(config.pose_batch):
                pose = sample_random_pose(gen, config.pose_bounds)
                rays = generate_rays(pose, render_intr)
                view = march_rays(rays.origins, rays.directions, cfield, config.march,
                                  generator=gen)
                image = view.color.reshape(config.render_resolution, config.render_resolution, 3)
                adjoint, t_used = sds_adjoint(
                    image, provider, schedule,
                    Conditioning(cond_id=conditioning.cond_id, pose=pose),
                    gen, t_range=config.timestep_range,
                )
                sds_mag += float(adjoint.abs().mean())

                ent = entropy_reg(view.sample_alphas)
                flat_w = view.weights.reshape(-1)
                sel = flat_w.detach() > 1e-3
                if int(sel.sum()) > config.normal_sample_cap:
                    thresh = flat_w.detach()[sel].sort().values[-config.normal_sample_cap]
                    sel = flat_w.detach() >= thresh
                if sel.any():
                    pts = view.points.reshape(-1, 3)[sel]
                    dirs = rays.directions[:, None, :].expand_as(view.points).reshape(-1, 3)[sel]
                    # normals come from the raw density: outside the reference
                    # frustum they coincide with the constrained field anyway,
                    # and masked-out samples carry no rendering weight
                    normals, degen = normals_at(field.density, pts)
                    orient = orientation_reg(flat_w[sel], normals, dirs, degen)
                    smooth = smoothness_reg(field.density, pts, gen, normals0=(normals, degen))
                else:
                    orient = torch.zeros(())
                    smooth = torch.zeros(())

                view_total = view_total + (
                    weights.sds * sds_surrogate(image, adjoint)
                    + weights.entropy * ent
                    + weights.orientation * orient
                    + weights.smoothness * smooth
                )

            total = view_total / config.pose_batch + weights.depth * d_term
            if not torch.isfinite(total.detach()):
                raise NumericsError(f"non-finite loss at step {step}")

            grads = backward(total, field.params)
            optimizer_step(field.params, grads, opt_state, config.learning_rate,
                           config.weight_decay)

            report = LossReport(
                step=step,
                sds=sds_mag / config.pose_batch,
                depth=float(d_term.detach()),
                entropy=float(ent.detach()),
                orientation=float(orient.detach()),
                smoothness=float(smooth.detach()),
                total=float(total.detach()),
                warm_alpha=alpha_ws,
                timestep=t_used,
            )
            reports.append(report)
            if log_file is not None:
                log_file.write(report.to_json_line() + "\n")
                log_file.flush()
            done = step + 1
            if done % config.checkpoint_every == 0 and done < config.total_steps:
                last_path = write_ckpt(done, final=False)
            if step_callback is not None:
                step_callback(done, field, report)
    except ProviderError:
        write_ckpt(len(reports) + start_step, final=False)
        raise
    finally:
        if log_file is not None:
            log_file.close()

    final_path = write_ckpt(config.total_steps, final=True) or last_path
    return TrainResult(checkpoint=snapshot(config.total_steps), reports=reports,
                       checkpoint_path=final_path)
