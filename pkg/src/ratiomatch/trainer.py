"""Training loop, evaluation hooks and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .datasets import BitDataset, atomic_write
from .energy import DimensionError, EnergyModel, IsingEnergy, model_from_architecture
from .metrics import mmd_linear, objective_value_eval, rmse_connectivity
from .objectives import EstimatorKind, EstimatorSpec, batch_loss
from .samplers import gibbs_sample_set, make_rng, restore_rng, rng_state
from .tensor import AdamState, NonFiniteError, ParamSet

# rng stream ids, shared with the CLI
STREAM_INIT, STREAM_SHUFFLE, STREAM_ESTIMATOR, STREAM_EVAL, STREAM_DATA = range(5)

DIVERGENCE_LIMIT = 1e12


class DivergenceError(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    iterations: int = 1000
    seed: int = 0
    eval_every: int = 0
    l1_strength: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.estimator, dict):
            self.estimator = EstimatorSpec(**self.estimator)
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if self.l1_strength < 0:
            raise ValueError("l1_strength must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["estimator"]["kind"] = self.estimator.kind.value
        return d

    def hash(self) -> str:
        """Fingerprint of everything that shapes the trajectory (run length and cadence excluded)."""
        d = self.to_dict()
        for k in ("iterations", "eval_every", "checkpoint_every"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainState:
    model: EnergyModel
    adam: AdamState
    iteration: int
    shuffle_rng: np.random.Generator
    estimator_rng: np.random.Generator
    perm: np.ndarray
    cursor: int
    config_hash: str

    def next_batch(self, n: int, size: int) -> np.ndarray:
        """Indices of the next batch; epochs are reshuffled as they run out."""
        out = []
        need = size
        while need:
            if self.cursor >= len(self.perm):
                self.perm = self.shuffle_rng.permutation(n)
                self.cursor = 0
            take = min(need, len(self.perm) - self.cursor)
            out.append(self.perm[self.cursor:self.cursor + take])
            self.cursor += take
            need -= take
        return np.concatenate(out)


@dataclass
class TrainResult:
    model: EnergyModel
    log: list
    state: TrainState


def fresh_state(config: TrainConfig, model: EnergyModel, n: int) -> TrainState:
    shuffle = make_rng(config.seed, STREAM_SHUFFLE)
    return TrainState(model, AdamState(), 0, shuffle, make_rng(config.seed, STREAM_ESTIMATOR),
                      shuffle.permutation(n), 0, config.hash())


def l1_penalty(model: EnergyModel, strength: float):
    """``strength * ||J||_1`` over the full symmetric matrix, i.e. twice the upper triangle."""
    return T.mul(T.sum_(T.abs_(model.params["J_upper"])), 2.0 * strength)


def training_loss(model: EnergyModel, batch: np.ndarray, config: TrainConfig, rng):
    lv = batch_loss(model, batch, config.estimator, rng=rng)
    loss = lv.node
    if config.l1_strength > 0 and isinstance(model, IsingEnergy) and model.learnable:
        loss = T.add(loss, l1_penalty(model, config.l1_strength))
    return loss, lv


def train(config: TrainConfig, dataset: BitDataset | np.ndarray, model: EnergyModel | None = None,
          callbacks: Sequence[Callable] = (), resume: TrainState | None = None,
          log_path=None, checkpoint_dir=None) -> TrainResult:
    """Run ``config.iterations`` total updates (continuing from ``resume`` if given).

    Each callback is called as ``cb(iteration, model)`` at every evaluation point
    and returns a dict merged into that metric record.
    """
    X = dataset.bits if isinstance(dataset, BitDataset) else np.asarray(dataset)
    if resume is not None:
        if resume.config_hash != config.hash():
            raise CheckpointError("checkpoint was written under a different configuration")
        model = resume.model
    elif model is None:
        raise ValueError("train needs a model or a state to resume")
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DimensionError(f"dataset dimension {X.shape[-1]} != model dimension {model.d}")
    Xf = X.astype(np.float64)
    n = Xf.shape[0]
    state = fresh_state(config, model, n) if resume is None else resume
    log: list[dict] = []
    log_fh = open(log_path, "a") if log_path else None
    t0 = time.perf_counter()
    try:
        while state.iteration < config.iterations:
            idx = state.next_batch(n, config.batch_size)
            try:
                loss, lv = training_loss(model, Xf[idx], config, state.estimator_rng)
                value = loss.item()
                if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                    raise NonFiniteError(f"loss {value!r}")
                grads = T.backward(loss, model.params)
            except NonFiniteError as e:
                path = None
                if checkpoint_dir:
                    path = os.path.join(checkpoint_dir, "diverged.ckpt")
                    save_checkpoint(path, state)
                raise DivergenceError(f"training diverged at iteration {state.iteration}: {e}", path) from e
            T.adam_step(model.params, grads, state.adam, config.lr, config.beta1, config.beta2, config.eps)
            state.iteration += 1
            it = state.iteration
            last = it == config.iterations
            if (config.eval_every and it % config.eval_every == 0) or last:
                rec = {"iteration": it, "loss": value, "clamp_events": lv.clamp_events,
                       "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
                for cb in callbacks:
                    rec.update(cb(it, model))
                log.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
            if checkpoint_dir and config.checkpoint_every and it % config.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"ckpt_{it:08d}.ckpt"), state)
        if checkpoint_dir:
            save_checkpoint(os.path.join(checkpoint_dir, "final.ckpt"), state)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model, log, state)


# ---------------------------------------------------------------- evaluation

def objective_callback(samples) -> Callable:
    return lambda it, model: {"objective": objective_value_eval(model, samples)}


def rmse_callback(J_true) -> Callable:
    return lambda it, model: {"rmse": rmse_connectivity(model.J, J_true)}


def mmd_callback(reference, n_samples: int = 4000, seed: int = 0, **gibbs) -> Callable:
    def cb(it, model):
        rng = make_rng(seed, STREAM_EVAL)
        S = gibbs_sample_set(model, n_samples, rng=rng, **gibbs)
        return {"mmd_sq": mmd_linear(reference, S).mmd_sq}
    return cb


def evaluate(model: EnergyModel, dataset, metrics: Sequence[str] = ("objective",), n_samples: int = 4000,
             seed: int = 0, J_true=None, gibbs: dict | None = None) -> dict:
    """Metric record for ``model`` against ``dataset``.

    ``objective`` averages the full ratio-matching objective over the first
    ``n_samples`` rows; ``mmd`` compares them with ``n_samples`` Gibbs draws from
    the model; ``rmse`` compares the learned couplings with ``J_true``.
    """
    X = dataset.bits if isinstance(dataset, BitDataset) else np.asarray(dataset)
    ref = X[:n_samples]
    out: dict = {}
    for m in metrics:
        if m == "objective":
            out["objective"] = objective_value_eval(model, ref)
        elif m == "mmd":
            out.update(mmd_callback(ref, n_samples, seed, **(gibbs or {}))(0, model))
        elif m == "rmse":
            if J_true is None or not isinstance(model, IsingEnergy):
                raise ValueError("rmse needs an Ising model and the true couplings")
            out["rmse"] = rmse_connectivity(model.J, J_true)
        else:
            raise ValueError(f"unknown metric {m!r}")
    return out


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = "RMCKPT"
CKPT_VERSION = 1


def _encode_state(s: dict) -> str:
    return json.dumps(s, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, state: TrainState) -> None:
    """Text header (``key=value`` lines plus array descriptors) followed by raw little-endian payload."""
    model = state.model
    header = {f"model.{k}": str(v) for k, v in model.architecture().items()}
    header.update({"iteration": str(state.iteration), "adam_step": str(state.adam.step),
                   "config_hash": state.config_hash, "cursor": str(state.cursor),
                   "rng.shuffle": _encode_state(rng_state(state.shuffle_rng)),
                   "rng.estimator": _encode_state(rng_state(state.estimator_rng))})
    arrays = [(f"param.{k}", v) for k, v in model.params.arrays().items()]
    for k in model.params.names():
        if k in state.adam.m:
            arrays.append((f"adam_m.{k}", state.adam.m[k]))
            arrays.append((f"adam_v.{k}", state.adam.v[k]))
    arrays.append(("perm", np.asarray(state.perm, dtype=np.int64)))
    lines = [f"{k}={v}" for k, v in header.items()]
    blobs = []
    for name, arr in arrays:
        dt = "<i8" if arr.dtype.kind == "i" else "<f8"
        a = np.ascontiguousarray(arr, dtype=dt)
        lines.append(f"array {name} {dt} {','.join(map(str, a.shape))}")
        blobs.append(a.tobytes())
    text = "\n".join(lines).encode("utf-8")
    payload = f"{CKPT_MAGIC} {CKPT_VERSION}\n{len(text)}\n".encode() + text + b"".join(blobs)
    atomic_write(path, payload)


@dataclass
class Checkpoint:
    header: dict
    arrays: dict

    def params(self) -> ParamSet:
        return ParamSet((k[len("param."):], v) for k, v in self.arrays.items() if k.startswith("param."))

    def model(self) -> EnergyModel:
        arch = {k[len("model."):]: v for k, v in self.header.items() if k.startswith("model.")}
        return model_from_architecture(arch, params=self.params())

    def state(self) -> TrainState:
        model = self.model()
        adam = AdamState(int(self.header["adam_step"]))
        for k in model.params.names():
            if f"adam_m.{k}" in self.arrays:
                adam.m[k] = self.arrays[f"adam_m.{k}"]
                adam.v[k] = self.arrays[f"adam_v.{k}"]
        return TrainState(model, adam, int(self.header["iteration"]),
                          restore_rng(json.loads(self.header["rng.shuffle"])),
                          restore_rng(json.loads(self.header["rng.estimator"])),
                          self.arrays["perm"], int(self.header["cursor"]), self.header["config_hash"])


def load_checkpoint(path) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        first, rest = raw.split(b"\n", 1)
        magic, version = first.decode().split(" ")
        size_line, rest = rest.split(b"\n", 1)
        size = int(size_line)
    except ValueError as e:
        raise CheckpointError("not a checkpoint file") from e
    if magic != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    if int(version) != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(rest) < size:
        raise CheckpointError("truncated checkpoint header")
    header, arrays, offset = {}, {}, size
    for line in rest[:size].decode("utf-8").splitlines():
        if line.startswith("array "):
            _, name, dt, shape = line.split(" ")
            shape = tuple(int(s) for s in shape.split(",")) if shape else ()
            count = int(np.prod(shape)) if shape else 1
            nbytes = 8 * count
            if offset + nbytes > len(rest):
                raise CheckpointError(f"truncated payload for {name}")
            arrays[name] = np.frombuffer(rest, dtype=dt, count=count, offset=offset).reshape(shape).copy()
            offset += nbytes
        else:
            k, _, v = line.partition("=")
            header[k] = v
    if offset != len(rest):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(header, arrays)
