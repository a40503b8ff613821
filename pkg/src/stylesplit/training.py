"""Alternating adversarial training, temperature annealing, checkpoints, retrains.

Per batch the loop runs three phases: k_d update steps for the style
discriminator on real labeled sentences, k_dz steps for the latent
discriminator on detached posterior means (when the variant uses one), and
one step for the encoder+generator on the variant's total objective. Each
phase owns its Adam optimizer and clears every gradient afterwards, so no
phase leaks into another.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import models
from .autodiff import Adam, clip_global_norm
from .models import LossWeights, ModelDims, ModelParams, check_variant
from .textpipe import LabeledSentence, Vocabulary, make_batches

CHECKPOINT_MAGIC = b"SDKP"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A loss term became non-finite; training aborts rather than skipping."""


class CheckpointError(ValueError):
    """Malformed, truncated, or version-mismatched checkpoint file."""


@dataclass
class TrainConfig:
    variant: str = "baseline"
    epochs: int = 12
    batch_size: int = 32
    seed: int = 0
    max_len: int = 16
    embed_dim: int = 32
    hidden_dim: int = 64
    latent_dim: int = 16
    dz_hidden: int = 32
    lambda_c: float = 0.1
    lambda_z: float = 0.1
    lambda_dz: float = 1.0
    lambda_cos: float = 1.0
    lambda_cos_minus: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tau_start: float = 1.0
    tau_decay: float = 0.5
    tau_min: float = 0.001
    k_d: int = 1
    k_dz: int = 1
    grad_clip: float = 5.0
    checkpoint_interval: int = 0   # 0: only the final checkpoint

    def validate(self) -> "TrainConfig":
        check_variant(self.variant)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lambda_c", "lambda_z", "lambda_dz", "lambda_cos", "lambda_cos_minus"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.k_d < 0 or self.k_dz < 0:
            raise ValueError("k_d and k_dz must be >= 0")
        if not (self.tau_start > 0 and self.tau_min > 0 and 0 < self.tau_decay <= 1):
            raise ValueError("temperature schedule must stay positive")
        return self

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_z, self.lambda_dz,
                           self.lambda_cos, self.lambda_cos_minus)

    def tau_at(self, epoch: int) -> float:
        return max(self.tau_min, self.tau_start * self.tau_decay ** epoch)


@dataclass
class MetricsRecord:
    run_id: int
    epoch: int
    tau: float
    losses: dict[str, float]
    d_accuracy: float
    dz_accuracy: float | None

    def to_json_line(self) -> str:
        row = {"run_id": self.run_id, "epoch": self.epoch, "tau": self.tau}
        for name, value in self.losses.items():
            row[f"loss_{name}"] = value
        row["d_accuracy"] = None if math.isnan(self.d_accuracy) else self.d_accuracy
        row["dz_accuracy"] = self.dz_accuracy
        return json.dumps(row)


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    vocab_tokens: list[str]
    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray]
    epoch: int
    rng_words: list[int]


class _Run:
    """Mutable state of one training run (parameters, optimizers, rng, epoch)."""

    def __init__(self, config: TrainConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        dims = ModelDims(vocab_size=len(vocab), embed=config.embed_dim,
                         hidden=config.hidden_dim, latent=config.latent_dim,
                         dz_hidden=config.dz_hidden)
        self.rng = np.random.default_rng(config.seed)
        self.params = ModelParams(dims, config.variant, self.rng)
        self.opt_g = Adam(self.params.group_g(), lr=config.lr, beta1=config.beta1,
                          beta2=config.beta2, eps=config.adam_eps)
        self.opt_d = Adam(self.params.group_d(), lr=config.lr, beta1=config.beta1,
                          beta2=config.beta2, eps=config.adam_eps)
        self.opt_dz = Adam(self.params.group_dz(), lr=config.lr, beta1=config.beta1,
                           beta2=config.beta2, eps=config.adam_eps)
        self.epoch = 0

    def optimizers(self) -> dict[str, Adam]:
        return {"g": self.opt_g, "d": self.opt_d, "dz": self.opt_dz}


def _check_finite(value: float, term: str, epoch: int) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss '{term}' at epoch {epoch}")
    return value


def _train_epochs(run: _Run, corpus: list[LabeledSentence], until_epoch: int,
                  records: list[MetricsRecord],
                  checkpoint_path: str | Path | None) -> None:
    config = run.config
    params = run.params
    weights = config.weights()
    use_dz = models.uses_latent_discriminator(config.variant)
    while run.epoch < until_epoch:
        epoch = run.epoch
        tau = config.tau_at(epoch)
        batch_seed = int(run.rng.integers(2 ** 31))
        batches = make_batches(corpus, run.vocab, config.max_len,
                               config.batch_size, batch_seed)
        sums: dict[str, float] = {}
        d_hits = 0.0
        dz_hits = 0.0
        n_rows = 0
        for batch in batches:
            n_rows += len(batch.labels)
            latent = models.encode(params, batch, deterministic=False, rng=run.rng)

            for _ in range(config.k_d):
                d_loss, d_acc = models.d_loss_real(params, batch)
                _check_finite(d_loss.item(), "d_real", epoch)
                d_loss.backward()
                clip_global_norm(run.opt_d.params, config.grad_clip)
                run.opt_d.step()
                params.zero_all_grads()
            if config.k_d:
                d_hits += d_acc * len(batch.labels)

            if use_dz:
                for _ in range(config.k_dz):
                    dz_loss = models.loss_dz(params, latent.mu, batch.labels, detach_z=True)
                    _check_finite(dz_loss.item(), "dz_train", epoch)
                    dz_loss.backward()
                    clip_global_norm(run.opt_dz.params, config.grad_clip)
                    run.opt_dz.step()
                    params.zero_all_grads()
                if config.k_dz:
                    dz_hits += models.dz_accuracy(params, latent.mu.data, batch.labels) \
                        * len(batch.labels)

            losses = models.variant_losses(params, batch, tau, latent=latent)
            total = models.total_objective(config.variant, losses, weights)
            for name, tensor in losses.items():
                value = _check_finite(tensor.item(), name, epoch)
                sums[name] = sums.get(name, 0.0) + value * len(batch.labels)
            sums["total"] = sums.get("total", 0.0) \
                + _check_finite(total.item(), "total", epoch) * len(batch.labels)
            total.backward()
            clip_global_norm(run.opt_g.params, config.grad_clip)
            run.opt_g.step()
            params.zero_all_grads()

        record = MetricsRecord(
            run_id=config.seed,
            epoch=epoch,
            tau=tau,
            losses={k: sums[k] / n_rows for k in sums},
            d_accuracy=d_hits / n_rows if config.k_d else float("nan"),
            dz_accuracy=(dz_hits / n_rows) if (use_dz and config.k_dz) else None,
        )
        records.append(record)
        run.epoch += 1
        if checkpoint_path is not None and config.checkpoint_interval > 0 \
                and run.epoch % config.checkpoint_interval == 0 and run.epoch < until_epoch:
            save_checkpoint(checkpoint_from_run(run), checkpoint_path)


def train(config: TrainConfig, corpus: list[LabeledSentence],
          vocab: Vocabulary | None = None,
          metrics_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None,
          resume: Checkpoint | None = None) -> tuple[ModelParams, list[MetricsRecord]]:
    """Train one run to config.epochs; returns final parameters and per-epoch metrics."""
    config.validate()
    if not corpus:
        raise ValueError("training corpus is empty")
    if resume is not None:
        run = run_from_checkpoint(resume)
        vocab = run.vocab
    else:
        if vocab is None:
            from .textpipe import build_vocab
            vocab = build_vocab([s.tokens for s in corpus])
        run = _Run(config, vocab)
    records: list[MetricsRecord] = []
    _train_epochs(run, corpus, config.epochs, records, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_from_run(run), checkpoint_path)
    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(record.to_json_line() + "\n")
    return run.params, records


def multi_retrain(config: TrainConfig, corpus: list[LabeledSentence],
                  n_runs: int, vocab: Vocabulary | None = None,
                  out_dir: str | Path | None = None
                  ) -> list[tuple[ModelParams, list[MetricsRecord]]]:
    """Independent retrains with seeds config.seed .. config.seed + n_runs - 1."""
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    results = []
    for i in range(n_runs):
        run_config = replace(config, seed=config.seed + i)
        metrics_path = checkpoint_path = None
        if out_dir is not None:
            run_dir = Path(out_dir) / f"run_{i}"
            run_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = run_dir / "metrics.jsonl"
            checkpoint_path = run_dir / "checkpoint.bin"
        try:
            results.append(train(run_config, corpus, vocab=vocab,
                                 metrics_path=metrics_path,
                                 checkpoint_path=checkpoint_path))
        except TrainingDiverged as err:
            raise TrainingDiverged(f"run {i} (seed {run_config.seed}): {err}") from err
    return results


# -- checkpoint serialization -------------------------------------------------------
#
# Layout (little-endian throughout):
#   magic "SDKP" | u32 version | u32 len + config utf-8 text
#   u32 tensor count | per tensor: u16 name len, name, u8 rank, u32 dims..., f64 data
#   u32 optimizer tensor count | same per-tensor encoding
#   u64 epoch | u32 rng word count | u64 words...
# The config text is `key = value` lines and carries the vocabulary tokens,
# which transfer and eval need to rebuild the model around a checkpoint.

_CONFIG_FIELDS = {f.name for f in TrainConfig.__dataclass_fields__.values()}


def _config_to_text(config: TrainConfig, vocab_tokens: list[str]) -> str:
    lines = [f"{k} = {v}" for k, v in asdict(config).items()]
    lines.append("vocab = " + " ".join(vocab_tokens))
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> tuple[TrainConfig, list[str]]:
    kwargs = {}
    vocab_tokens: list[str] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key == "vocab":
            vocab_tokens = raw.split()
            continue
        if key not in _CONFIG_FIELDS:
            raise CheckpointError(f"unknown config key {key!r} in checkpoint")
        kind = TrainConfig.__dataclass_fields__[key].type
        if kind == "int":
            kwargs[key] = int(raw)
        elif kind == "float":
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    return TrainConfig(**kwargs), vocab_tokens


def checkpoint_from_run(run: _Run) -> Checkpoint:
    opt_state: dict[str, np.ndarray] = {}
    for group, opt in run.optimizers().items():
        opt_state[f"{group}.step"] = np.array(float(opt.t))
        for name in opt.params:
            opt_state[f"{group}.m.{name}"] = opt.m[name]
            opt_state[f"{group}.v.{name}"] = opt.v[name]
    state = run.rng.bit_generator.state
    words = [
        state["state"]["state"] & (2 ** 64 - 1),
        state["state"]["state"] >> 64,
        state["state"]["inc"] & (2 ** 64 - 1),
        state["state"]["inc"] >> 64,
        int(state["has_uint32"]),
        int(state["uinteger"]),
    ]
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        config=run.config,
        vocab_tokens=run.vocab.id_to_token[4:],
        params={k: v.data for k, v in run.params.tensors.items()},
        opt_state=opt_state,
        epoch=run.epoch,
        rng_words=words,
    )


def run_from_checkpoint(cp: Checkpoint) -> _Run:
    vocab = Vocabulary(cp.vocab_tokens)
    run = _Run(cp.config, vocab)
    for name, arr in cp.params.items():
        if name not in run.params.tensors:
            raise CheckpointError(f"checkpoint parameter {name!r} not in model")
        if run.params.tensors[name].data.shape != arr.shape:
            raise CheckpointError(f"checkpoint parameter {name!r} has shape {arr.shape}, "
                                  f"expected {run.params.tensors[name].data.shape}")
        run.params.tensors[name].data = arr.copy()
    for group, opt in run.optimizers().items():
        opt.t = int(cp.opt_state[f"{group}.step"])
        for name in opt.params:
            opt.m[name] = cp.opt_state[f"{group}.m.{name}"].copy()
            opt.v[name] = cp.opt_state[f"{group}.v.{name}"].copy()
    words = cp.rng_words
    run.rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (words[1] << 64) | words[0],
                  "inc": (words[3] << 64) | words[2]},
        "has_uint32": int(words[4]),
        "uinteger": int(words[5]),
    }
    run.epoch = cp.epoch
    return run


def _write_tensor_section(fh, arrays: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(arr.tobytes(order="C"))


def _read_exact(fh, size: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise CheckpointError("truncated checkpoint file")
    return buf


def _read_tensor_section(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
        n_values = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(_read_exact(fh, 8 * n_values), dtype="<f8").reshape(shape)
        arrays[name] = data.copy()
    return arrays


def save_checkpoint(cp: Checkpoint, path: str | Path) -> None:
    """Atomic write (temp file + rename) of the bit-exact binary layout."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", cp.version))
        text = _config_to_text(cp.config, cp.vocab_tokens).encode("utf-8")
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        _write_tensor_section(fh, cp.params)
        _write_tensor_section(fh, cp.opt_state)
        fh.write(struct.pack("<Q", cp.epoch))
        fh.write(struct.pack("<I", len(cp.rng_words)))
        for word in cp.rng_words:
            fh.write(struct.pack("<Q", word))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} unsupported "
                                  f"(this build reads version {CHECKPOINT_VERSION})")
        (text_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config, vocab_tokens = _config_from_text(_read_exact(fh, text_len).decode("utf-8"))
        params = _read_tensor_section(fh)
        opt_state = _read_tensor_section(fh)
        (epoch,) = struct.unpack("<Q", _read_exact(fh, 8))
        (n_words,) = struct.unpack("<I", _read_exact(fh, 4))
        words = [struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(n_words)]
    return Checkpoint(version=version, config=config, vocab_tokens=vocab_tokens,
                      params=params, opt_state=opt_state, epoch=int(epoch),
                      rng_words=words)


def params_from_checkpoint(cp: Checkpoint) -> tuple[ModelParams, Vocabulary]:
    """Rebuild just the model (no optimizer/rng), for transfer and evaluation."""
    run = run_from_checkpoint(cp)
    return run.params, run.vocab
