"""Two-stage training: consistency training, then CT + trajectory matching."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneSpec, ConsistencyModel, NumericError, init_params, snapshot
from .data import DatasetHandle
from .diffusion import SRPair, consistency_output, forward_mix
from .losses import DtmContext, LossWeights, ct_loss, dtm_grad, dtm_surrogate_loss, sds_grad
from .schedules import ScheduleConfig, StepCurriculum, curriculum_steps

log = logging.getLogger(__name__)

CHECKPOINT_HEADER = b"ctmsr-ckpt-v1"
LOG_COLUMNS = ("k", "stage", "ct_loss", "dtm_loss", "total", "lr", "T_k", "wallclock_ms")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage1_iters: int = 5000
    stage2_iters: int = 500
    batch_size: int = 8
    learning_rate: float = 1e-4
    teacher_refresh_every: int = 1000
    seed: int = 0
    curriculum: StepCurriculum = field(default_factory=StepCurriculum)
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 1000
    matching: str = "dtm"  # "dtm" or "sds"
    surrogate: str = "perceptual"  # "perceptual" or "l2"
    # "shared": x_{t-1} and x_t use the same noise draw; "independent" gives each its own
    noise_coupling: str = "shared"
    early_stop: bool = False
    # "constant", or "cosine" decay to zero over stage1_iters (stage 2 keeps the constant rate)
    lr_schedule: str = "constant"

    def __post_init__(self):
        for name in ("stage1_iters", "stage2_iters", "batch_size", "teacher_refresh_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.matching not in ("dtm", "sds"):
            raise ValueError(f"matching must be 'dtm' or 'sds', got {self.matching!r}")
        if self.noise_coupling not in ("independent", "shared"):
            raise ValueError(f"noise_coupling must be 'independent' or 'shared', got {self.noise_coupling!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.surrogate not in ("perceptual", "l2"):
            raise ValueError(f"surrogate must be 'perceptual' or 'l2', got {self.surrogate!r}")


PAPER_PRESET = dict(stage1_iters=500_000, stage2_iters=2_000, batch_size=32, learning_rate=5e-5,
                    teacher_refresh_every=1_000)


def stage1_lr(cfg: TrainConfig, k: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    progress = min(k / cfg.stage1_iters, 1.0)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


@dataclass
class TrainState:
    model: ConsistencyModel
    teacher: ConsistencyModel | None = None
    moments: dict = field(default_factory=dict)
    adam_steps: int = 0
    k: int = 0
    stage: str = "CT"
    rng: torch.Generator = field(default_factory=lambda: _generator(0))
    dtm_rng: torch.Generator | None = None
    stage2_start: int | None = None
    refresh_log: list = field(default_factory=list)

    @classmethod
    def fresh(cls, spec: BackboneSpec, schedule: ScheduleConfig, seed: int, dtype=torch.float32):
        return cls(model=init_params(spec, seed, schedule, dtype), rng=_generator(seed))

    def named_params(self):
        return dict(self.model.named_parameters())


def optimizer_step(state: TrainState, grads: dict, lr: float) -> TrainState:
    """Adam update (beta1=0.9, beta2=0.999, eps=1e-8), in place on ``state.model``."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r} at k={state.k}")
    b1, b2 = ADAM_BETAS
    state.adam_steps += 1
    n = state.adam_steps
    params = state.named_params()
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if name not in state.moments:
                state.moments[name] = (torch.zeros_like(p), torch.zeros_like(p))
            m, v = state.moments[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**n)
            v_hat = v / (1 - b2**n)
            p.sub_(lr * m_hat / (v_hat.sqrt() + ADAM_EPS))
    return state


def sample_timesteps(rng: torch.Generator, t_low: int, t_high: int, n: int) -> torch.Tensor:
    """Uniform integer timesteps in ``[t_low, t_high]`` inclusive."""
    return torch.randint(t_low, t_high + 1, (n,), generator=rng)


def _sample_batch(rng, data: SRPair, batch_size: int) -> SRPair:
    idx = torch.randint(0, len(data), (batch_size,), generator=rng)
    return data.subset(idx)


def _noise(rng, like: torch.Tensor) -> torch.Tensor:
    return torch.randn(like.shape, generator=rng, dtype=like.dtype)


def _grads(loss, state: TrainState) -> dict:
    named = [(n, p) for n, p in state.model.named_parameters() if p.requires_grad]
    values = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, values)}


class LossLog:
    """Append-only CSV loss log."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow([row[c] for c in LOG_COLUMNS])


def read_loss_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in ("k", "T_k"):
            r[key] = int(r[key])
        for key in ("ct_loss", "dtm_loss", "total", "lr", "wallclock_ms"):
            r[key] = float(r[key])
    return rows


def _as_pairs(data, dtype) -> SRPair:
    if isinstance(data, DatasetHandle):
        data = data.load_pairs("train")
    if len(data) == 0:
        raise ValueError("dataset is empty")
    return SRPair(data.x0.to(dtype), data.y0.to(dtype), data.lr)


def _plateaued(rows, window=500, rel=0.005) -> bool:
    if len(rows) < 2 * window or len(rows) % window:
        return False
    prev = np.mean([r["total"] for r in rows[-2 * window:-window]])
    last = np.mean([r["total"] for r in rows[-window:]])
    return (prev - last) < rel * abs(prev)


def _ct_term(state, batch_source: SRPair, cfg: TrainConfig, sched: ScheduleConfig):
    batch = _sample_batch(state.rng, batch_source, cfg.batch_size)
    t = sample_timesteps(state.rng, 1, sched.total_steps, cfg.batch_size)
    noise = _noise(state.rng, batch.x0)
    prev_noise = _noise(state.rng, batch.x0) if cfg.noise_coupling == "independent" else None
    return batch, t, ct_loss(state.model, batch, t, noise, cfg.weights, sched, prev_noise)


def _abort(state: TrainState, checkpoint_dir, exc: Exception):
    if checkpoint_dir:
        save_checkpoint(state, Path(checkpoint_dir) / "last_finite.ckpt")
    raise NumericError(f"{exc} (stage {state.stage}, iteration k={state.k})") from exc


def train_stage1(cfg: TrainConfig, data, state: TrainState | None = None, *, spec: BackboneSpec | None = None,
                 schedule: ScheduleConfig | None = None, loss_log: LossLog | None = None,
                 checkpoint_dir=None, dtype=torch.float32, iters: int | None = None,
                 t_trace: list | None = None) -> TrainState:
    """Consistency training for ``iters`` (default ``cfg.stage1_iters``) iterations.

    Passing an existing ``state`` resumes it. ``t_trace`` collects
    ``(k, T_k, t_draws)`` tuples for auditing the curriculum.
    """
    if state is None:
        state = TrainState.fresh(spec or BackboneSpec(), schedule or ScheduleConfig(), cfg.seed, dtype)
    pairs = _as_pairs(data, next(state.model.parameters()).dtype)
    loss_log = loss_log or LossLog()
    base = state.model.schedule
    end = state.k + (cfg.stage1_iters if iters is None else iters)
    rows_before = len(loss_log.rows)
    while state.k < end:
        tic = time.perf_counter()
        T_k = curriculum_steps(state.k, cfg.curriculum)
        sched = base.with_steps(T_k)
        try:
            _, t, loss = _ct_term(state, pairs, cfg, sched)
            if not torch.isfinite(loss):
                raise NumericError("non-finite CT loss")
            lr = stage1_lr(cfg, state.k)
            optimizer_step(state, _grads(loss, state), lr)
        except NumericError as exc:
            _abort(state, checkpoint_dir, exc)
        if t_trace is not None:
            t_trace.append((state.k, T_k, t.tolist()))
        ct = loss.item()
        loss_log.append(dict(k=state.k, stage="CT", ct_loss=ct, dtm_loss=0.0, total=ct, lr=lr,
                             T_k=T_k, wallclock_ms=(time.perf_counter() - tic) * 1e3))
        state.k += 1
        if checkpoint_dir and state.k % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"ct_{state.k:07d}.ckpt")
        if cfg.early_stop and _plateaued(loss_log.rows[rows_before:]):
            log.info("stage 1 plateaued at k=%d", state.k)
            break
    return state


def promote(state: TrainState, cfg: TrainConfig) -> TrainState:
    """Enter stage 2: freeze a teacher and start the matching-branch generator."""
    state.stage = "DTM"
    state.stage2_start = state.k
    state.teacher = snapshot(state.model)
    state.refresh_log.append(state.k)
    state.dtm_rng = _generator(cfg.seed + 0x5EED)
    return state


def _matching_term(state: TrainState, batch: SRPair, cfg: TrainConfig, sched: ScheduleConfig):
    rng = state.dtm_rng
    n = len(batch)
    t_prime = sample_timesteps(rng, 1, sched.total_steps, n)
    x_tp = forward_mix(batch.x0, batch.y0, t_prime, _noise(rng, batch.x0), sched)
    x_hat0 = consistency_output(state.model, x_tp, batch.y0, t_prime, sched)
    ctx = DtmContext(state.teacher, 1, sched.total_steps, sched)
    t = sample_timesteps(rng, ctx.t_min, ctx.t_max, n)
    noise = _noise(rng, batch.x0)
    grad_fn = dtm_grad if cfg.matching == "dtm" else sds_grad
    grad = grad_fn(ctx, x_hat0, batch, t, noise, cfg.weights.omega_floor)
    return dtm_surrogate_loss(x_hat0, grad, cfg.weights, cfg.surrogate)


def train_stage2(state: TrainState, cfg: TrainConfig, data, *, loss_log: LossLog | None = None,
                 checkpoint_dir=None, iters: int | None = None) -> TrainState:
    """Joint CT + trajectory matching (or SDS when ``cfg.matching == "sds"``).

    The teacher is refreshed from the online model whenever the stage-local
    iteration index is a multiple of ``cfg.teacher_refresh_every``.
    """
    if state.stage != "DTM":
        promote(state, cfg)
    pairs = _as_pairs(data, next(state.model.parameters()).dtype)
    loss_log = loss_log or LossLog()
    base = state.model.schedule
    w = cfg.weights
    end = state.k + (cfg.stage2_iters if iters is None else iters)
    rows_before = len(loss_log.rows)
    while state.k < end:
        tic = time.perf_counter()
        if (state.k - state.stage2_start) % cfg.teacher_refresh_every == 0 and state.refresh_log[-1] != state.k:
            state.teacher = snapshot(state.model)
            state.refresh_log.append(state.k)
        T_k = curriculum_steps(state.k, cfg.curriculum)
        sched = base.with_steps(T_k)
        try:
            batch, _, ct = _ct_term(state, pairs, cfg, sched)
            dtm = _matching_term(state, batch, cfg, sched)
            total = w.lambda_ct * ct + w.lambda_dtm * dtm
            if not torch.isfinite(total):
                raise NumericError("non-finite stage-2 loss")
            optimizer_step(state, _grads(total, state), cfg.learning_rate)
        except NumericError as exc:
            _abort(state, checkpoint_dir, exc)
        ct_f, dtm_f = ct.item(), dtm.item()
        loss_log.append(dict(k=state.k, stage="DTM", ct_loss=ct_f, dtm_loss=dtm_f,
                             total=w.lambda_ct * ct_f + w.lambda_dtm * dtm_f, lr=cfg.learning_rate,
                             T_k=T_k, wallclock_ms=(time.perf_counter() - tic) * 1e3))
        state.k += 1
        if checkpoint_dir and (state.k - state.stage2_start) % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"{cfg.matching}_{state.k:07d}.ckpt")
        if cfg.early_stop and _plateaued(loss_log.rows[rows_before:]):
            break
    return state


# -- checkpoints -------------------------------------------------------------

def _spec_dict(spec: BackboneSpec) -> dict:
    d = asdict(spec)
    d["channel_mult"] = list(d["channel_mult"])
    return d


def save_checkpoint(state: TrainState, path) -> Path:
    """Header line, JSON metadata line, then an npz archive of named arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{n}": p.detach().cpu().numpy() for n, p in state.model.named_parameters()}
    arrays.update({f"buffer/{n}": b.cpu().numpy() for n, b in state.model.named_buffers()})
    if state.teacher is not None:
        arrays.update({f"teacher/{n}": p.detach().cpu().numpy() for n, p in state.teacher.named_parameters()})
    for n, (m, v) in state.moments.items():
        arrays[f"adam_m/{n}"] = m.cpu().numpy()
        arrays[f"adam_v/{n}"] = v.cpu().numpy()
    arrays["rng/main"] = state.rng.get_state().numpy()
    if state.dtm_rng is not None:
        arrays["rng/dtm"] = state.dtm_rng.get_state().numpy()
    meta = {
        "backbone": _spec_dict(state.model.spec),
        "schedule": asdict(state.model.schedule),
        "k": state.k,
        "stage": state.stage,
        "adam_steps": state.adam_steps,
        "stage2_start": state.stage2_start,
        "refresh_log": state.refresh_log,
        "dtype": str(next(state.model.parameters()).dtype).replace("torch.", ""),
        "params": [[n, list(p.shape)] for n, p in state.model.named_parameters()],
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_HEADER + b"\n")
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        fh.write(buf.getvalue())
    tmp.replace(path)
    return path


def _read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = fh.readline().rstrip(b"\n")
        if header != CHECKPOINT_HEADER:
            shown = header[:40].decode(errors="replace")
            raise CheckpointError(f"{path}: unsupported checkpoint version {shown!r}, expected "
                                  f"{CHECKPOINT_HEADER.decode()!r}")
        try:
            meta = json.loads(fh.readline())
            arrays = dict(np.load(io.BytesIO(fh.read()), allow_pickle=False))
        except Exception as exc:  # zip/json decoding errors come in many types
            raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return meta, arrays


def _load_into(model: ConsistencyModel, arrays: dict, prefix: str, path) -> None:
    with torch.no_grad():
        for n, p in model.named_parameters():
            key = f"{prefix}/{n}"
            if key not in arrays or tuple(arrays[key].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: missing or misshapen array {key}")
            p.copy_(torch.from_numpy(arrays[key]))


def load_checkpoint(path) -> TrainState:
    meta, arrays = _read_checkpoint(path)
    try:
        spec = BackboneSpec(**meta["backbone"])
        schedule = ScheduleConfig(**meta["schedule"])
        dtype = getattr(torch, meta["dtype"])
    except (KeyError, TypeError, AttributeError) as exc:
        raise CheckpointError(f"{path}: bad metadata ({exc})") from exc
    model = init_params(spec, 0, schedule, dtype)
    _load_into(model, arrays, "param", path)
    state = TrainState(model=model, k=meta["k"], stage=meta["stage"], adam_steps=meta["adam_steps"],
                       stage2_start=meta["stage2_start"], refresh_log=list(meta["refresh_log"]))
    if any(k.startswith("teacher/") for k in arrays):
        teacher = init_params(spec, 0, schedule, dtype)
        _load_into(teacher, arrays, "teacher", path)
        state.teacher = snapshot(teacher)
    for n, p in model.named_parameters():
        if f"adam_m/{n}" in arrays:
            state.moments[n] = (torch.from_numpy(arrays[f"adam_m/{n}"]).clone(),
                                torch.from_numpy(arrays[f"adam_v/{n}"]).clone())
    state.rng = torch.Generator()
    state.rng.set_state(torch.from_numpy(arrays["rng/main"]))
    if "rng/dtm" in arrays:
        state.dtm_rng = torch.Generator()
        state.dtm_rng.set_state(torch.from_numpy(arrays["rng/dtm"]))
    return state


def load_model(path) -> ConsistencyModel:
    return load_checkpoint(path).model
