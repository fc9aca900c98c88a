"""The four sequential H-Net optimization steps and the loop that drives them.

Per iteration, on fresh mini-batches:

1. natural autoencoder, perceptual loss + black-box adversarial rescaling
2. CG autoencoder, perceptual loss only
3. transformer, latent MSE between the natural encoder and
   transformer(CG encoder) on *natural* images
4. CG transformation path, perceptual loss against the CG input +
   black-box adversarial rescaling toward "natural"

Each step owns its own Adam state and touches only its parameter groups.
Groups that are read but not trained run batch norm in eval mode so their
running statistics stay bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import binfmt
from . import functional as F
from .corpus import normalize, to_pixels
from .detector import Scorer
from .errors import NonFiniteLossError
from .losses import PerceptualNet, adversarial_loss, blackbox_scaled_gradient, perceptual_loss, total_loss
from .model import (
    ArchSpec,
    HNetParams,
    decode,
    encode,
    forward_transform_path,
    init_weights,
    save_checkpoint,
    transform_latent,
)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

STATE_MAGIC = b"HOPT"
STEP_GROUPS = {
    1: ("enc_natural", "dec_natural"),
    2: ("enc_cg", "dec_cg"),
    3: ("transformer",),
    4: ("enc_cg", "transformer", "dec_natural"),
}
NATURAL_TARGET = 1.0


@dataclass
class TrainConfig:
    alpha: float = 5e-3
    lr: float = 1e-4
    batch_size: int = 8
    iterations_per_epoch: int = 50
    epochs: int = 10
    seed: int = 0
    input_size: int = 64
    natural_path: str | None = None
    cg_path: str | None = None
    detector_path: str | None = None
    perceptual_path: str | None = None
    perceptual_seed: int = 1234
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.iterations_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and iterations_per_epoch >= 1")

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch


@dataclass
class StepMetrics:
    iteration: int
    step: int
    l_vgg: float | None = None
    l_adv: float | None = None
    l_tol: float | None = None
    l_latent: float | None = None
    score: float | None = None
    grad_norm: float = 0.0
    wall_ms: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def metrics_digest(records: Iterable[StepMetrics | dict]) -> str:
    """SHA-256 over the metrics stream with wall-clock times removed."""
    h = hashlib.sha256()
    for r in records:
        d = asdict(r) if isinstance(r, StepMetrics) else dict(r)
        d.pop("wall_ms", None)
        h.update(json.dumps(d, sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


# ---------------------------------------------------------------- single steps


def _named(params: HNetParams, groups: Iterable[str]) -> dict[str, Tensor]:
    return {f"{g}.{k}": t for g in groups for k, t in params.group(g).items() if t.requires_grad}


def _collect(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    grads = {}
    for k, t in named.items():
        grads[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
    return grads


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


def _check_finite(step: int, **losses: float) -> None:
    for name, v in losses.items():
        if v is not None and not math.isfinite(v):
            raise NonFiniteLossError(f"step {step}: {name} = {v}")


def _as_batch(batch) -> Tensor:
    arr = np.asarray(batch)
    if arr.dtype == np.uint8:
        arr = normalize(arr)
    return Tensor(arr)


def _adversarial_step(
    step: int,
    params: HNetParams,
    forward: Callable[[Tensor], Tensor],
    x: Tensor,
    scorer: Scorer | None,
    perceptual: PerceptualNet,
    alpha: float,
    state: AdamState,
) -> StepMetrics:
    t0 = time.perf_counter()
    named = _named(params, STEP_GROUPS[step])
    with Tape() as tape:
        out = forward(x)
        l_vgg_t = perceptual_loss(perceptual, out, x)
    l_vgg = l_vgg_t.item()
    _check_finite(step, l_vgg=l_vgg)
    tape.backward(l_vgg_t)
    grads = _collect(named)

    if scorer is None:
        metrics = StepMetrics(0, step, l_vgg=l_vgg, l_tol=l_vgg)
        applied = grads
    else:
        scores = scorer.score(to_pixels(out.data))
        l_adv = adversarial_loss(scores, NATURAL_TARGET)
        l_tol = total_loss(l_vgg, l_adv, alpha)
        _check_finite(step, l_adv=l_adv, l_tol=l_tol)
        applied = blackbox_scaled_gradient(l_vgg, l_adv, grads, alpha)
        metrics = StepMetrics(0, step, l_vgg=l_vgg, l_adv=l_adv, l_tol=l_tol, score=float(np.mean(scores)))
    adam_step(named, applied, state)
    metrics.grad_norm = _grad_norm(applied)
    metrics.wall_ms = (time.perf_counter() - t0) * 1e3
    return metrics


def step1_natural_autoencoder(
    params: HNetParams,
    batch_natural,
    scorer: Scorer,
    perceptual: PerceptualNet,
    alpha: float,
    state: AdamState,
) -> StepMetrics:
    """Minimize L_tol[D_N(E_N(I_N)), I_N] over the natural encoder/decoder."""

    def forward(x):
        return decode(params.dec_natural, encode(params.enc_natural, x, True), True)

    return _adversarial_step(1, params, forward, _as_batch(batch_natural), scorer, perceptual, alpha, state)


def step2_cg_autoencoder(
    params: HNetParams, batch_cg, perceptual: PerceptualNet, state: AdamState
) -> StepMetrics:
    """Minimize L_vgg[D_CG(E_CG(I_CG)), I_CG]; the detector is not consulted."""

    def forward(x):
        return decode(params.dec_cg, encode(params.enc_cg, x, True), True)

    return _adversarial_step(2, params, forward, _as_batch(batch_cg), None, perceptual, 0.0, state)


def step3_transformer(params: HNetParams, batch_natural, state: AdamState) -> StepMetrics:
    """Minimize MSE(E_N(I_N), T(E_CG(I_N))) over the transformer only."""
    t0 = time.perf_counter()
    x = _as_batch(batch_natural)
    target = encode(params.enc_natural, x, False)
    source = encode(params.enc_cg, x, False)
    named = _named(params, STEP_GROUPS[3])
    with Tape() as tape:
        loss = F.mse_loss(transform_latent(params.transformer, source, True), target)
    l_latent = loss.item()
    _check_finite(3, l_latent=l_latent)
    tape.backward(loss)
    grads = _collect(named)
    adam_step(named, grads, state)
    return StepMetrics(
        0, 3, l_latent=l_latent, grad_norm=_grad_norm(grads), wall_ms=(time.perf_counter() - t0) * 1e3
    )


def step4_transform_path(
    params: HNetParams,
    batch_cg,
    scorer: Scorer,
    perceptual: PerceptualNet,
    alpha: float,
    state: AdamState,
) -> StepMetrics:
    """Minimize L_tol[D_N(T(E_CG(I_CG))), I_CG] over CG encoder, transformer and natural decoder."""

    def forward(x):
        return forward_transform_path(params, x, train=True)

    return _adversarial_step(4, params, forward, _as_batch(batch_cg), scorer, perceptual, alpha, state)


# ---------------------------------------------------------------- sampling and state


class Sampler:
    """Seeded shuffled index stream that reshuffles on demand and on exhaustion."""

    def __init__(self, n: int, seed):
        if n < 1:
            raise ValueError("cannot sample from an empty corpus")
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.cursor = 0

    def reshuffle(self) -> None:
        self.perm = self.rng.permutation(self.n)
        self.cursor = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if self.cursor >= self.n:
                self.reshuffle()
            take = min(k - len(out), self.n - self.cursor)
            out.extend(self.perm[self.cursor : self.cursor + take].tolist())
            self.cursor += take
        return np.asarray(out)

    def state(self) -> dict:
        return {"perm": self.perm.tolist(), "cursor": self.cursor, "rng": self.rng.bit_generator.state}

    def restore(self, s: dict) -> None:
        self.perm = np.asarray(s["perm"], dtype=np.int64)
        self.cursor = int(s["cursor"])
        self.rng.bit_generator.state = s["rng"]


@dataclass
class TrainState:
    params: HNetParams
    optimizers: dict[int, AdamState]
    natural_sampler: Sampler
    cg_sampler: Sampler
    iteration: int = 0
    log: list[StepMetrics] = field(default_factory=list)


def new_state(config: TrainConfig, n_natural: int, n_cg: int, params: HNetParams | None = None) -> TrainState:
    if params is None:
        params = init_weights(ArchSpec(input_size=config.input_size), config.seed)
    return TrainState(
        params=params,
        optimizers={k: AdamState(lr=config.lr) for k in STEP_GROUPS},
        natural_sampler=Sampler(n_natural, [config.seed, 101]),
        cg_sampler=Sampler(n_cg, [config.seed, 202]),
    )


def save_state(state: TrainState, path: str | Path) -> None:
    """Everything needed to resume bit-exactly: params, Adam moments, sampler and RNG states."""
    p = state.params
    tensors = {f"params.{g}.{k}": t.data for g, grp in p.groups().items() for k, t in grp.items()}
    adam_meta = {}
    for step, opt in state.optimizers.items():
        adam_meta[str(step)] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step}
        for name in opt.m:
            tensors[f"adam{step}.m.{name}"] = opt.m[name]
            tensors[f"adam{step}.v.{name}"] = opt.v[name]
    fields = {
        "arch": p.arch.to_fields(),
        "iteration": state.iteration,
        "adam": adam_meta,
        "natural_sampler": state.natural_sampler.state(),
        "cg_sampler": state.cg_sampler.state(),
    }
    binfmt.write(path, binfmt.Container(STATE_MAGIC, fields, tensors))


def load_state(path: str | Path, config: TrainConfig) -> TrainState:
    c = binfmt.read(path, STATE_MAGIC)
    arch = ArchSpec.from_fields(c.fields["arch"])
    params = init_weights(arch, 0)
    for g, grp in params.groups().items():
        for k, t in grp.items():
            t.data = c.tensors[f"params.{g}.{k}"].copy()
    st = new_state(config, len(c.fields["natural_sampler"]["perm"]), len(c.fields["cg_sampler"]["perm"]), params)
    for key, meta in c.fields["adam"].items():
        opt = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], step=meta["step"])
        for name in c.tensors:
            prefix = f"adam{key}.m."
            if name.startswith(prefix):
                pname = name[len(prefix) :]
                opt.m[pname] = c.tensors[name].copy()
                opt.v[pname] = c.tensors[f"adam{key}.v.{pname}"].copy()
        st.optimizers[int(key)] = opt
    st.natural_sampler.restore(c.fields["natural_sampler"])
    st.cg_sampler.restore(c.fields["cg_sampler"])
    st.iteration = int(c.fields["iteration"])
    return st


# ---------------------------------------------------------------- loop


def run_iteration(
    state: TrainState,
    natural: np.ndarray,
    cg: np.ndarray,
    scorer: Scorer,
    perceptual: PerceptualNet,
    config: TrainConfig,
) -> list[StepMetrics]:
    p, opt, bs = state.params, state.optimizers, config.batch_size
    it = state.iteration
    if it % config.iterations_per_epoch == 0:
        state.natural_sampler.reshuffle()
        state.cg_sampler.reshuffle()
    out = [
        step1_natural_autoencoder(p, natural[state.natural_sampler.take(bs)], scorer, perceptual, config.alpha, opt[1]),
        step2_cg_autoencoder(p, cg[state.cg_sampler.take(bs)], perceptual, opt[2]),
        step3_transformer(p, natural[state.natural_sampler.take(bs)], opt[3]),
        step4_transform_path(p, cg[state.cg_sampler.take(bs)], scorer, perceptual, config.alpha, opt[4]),
    ]
    for m in out:
        m.iteration = it
    state.iteration += 1
    return out


def train_loop(
    config: TrainConfig,
    natural: np.ndarray,
    cg: np.ndarray,
    scorer: Scorer,
    perceptual: PerceptualNet,
    state: TrainState | None = None,
    out_dir: str | Path | None = None,
    stop_after: int | None = None,
    on_metrics: Callable[[StepMetrics], None] | None = None,
) -> TrainState:
    """Run (or continue) training up to ``config.total_iterations``.

    ``natural`` and ``cg`` are uint8 (N,3,S,S) pixel stacks. With ``out_dir``
    the metrics stream is appended to ``metrics.jsonl`` and checkpoints are
    written at the configured cadence and at the end. ``stop_after`` halts
    early after that many iterations in this call (used to simulate
    interruption).
    """
    if state is None:
        state = new_state(config, len(natural), len(cg))
    natural_n = normalize(natural)
    cg_n = normalize(cg)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "metrics.jsonl", "a" if state.iteration else "w")
    done = 0
    try:
        while state.iteration < config.total_iterations:
            if stop_after is not None and done >= stop_after:
                break
            try:
                records = run_iteration(state, natural_n, cg_n, scorer, perceptual, config)
            except NonFiniteLossError:
                if out is not None:
                    save_checkpoint(state.params, out / "diagnostic.hnet")
                    save_state(state, out / "diagnostic.hopt")
                logger.error("non-finite loss at iteration %d; diagnostic checkpoint written", state.iteration)
                raise
            done += 1
            for r in records:
                state.log.append(r)
                if log_file is not None:
                    log_file.write(r.to_json() + "\n")
                if on_metrics is not None:
                    on_metrics(r)
            if out is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(state.params, out / "checkpoint.hnet")
                save_state(state, out / "resume.hopt")
        if out is not None:
            save_checkpoint(state.params, out / "checkpoint.hnet")
            save_state(state, out / "resume.hopt")
    finally:
        if log_file is not None:
            log_file.close()
    return state


def load_perceptual(config: TrainConfig) -> PerceptualNet:
    if config.perceptual_path:
        return PerceptualNet.load(config.perceptual_path)
    return PerceptualNet.seeded(config.perceptual_seed)

