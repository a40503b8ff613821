"""Encoder, generator, discriminators, and the loss terms of all four variants.

The encoder is a masked GRU with diagonal-Gaussian heads (mu, logvar) and
reparameterized sampling. The generator is a GRU whose initial state is a
linear projection of [z ; c]; soft generation feeds the expected embedding
under a temperature softmax back in at every step, keeping the whole
sequence differentiable. The style discriminator is a GRU classifier over
(real or expected) embeddings; the latent discriminator is a small MLP on z.

Variants and their active losses:
    baseline       reconstruction + style-fitness + latent-consistency
    discriminator  baseline - lambda_dz * latent-adversary
    sae            baseline + cosine(true code) + cosine(flipped code)
    combined       all of the above
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    LN_2PI,
    GRUCell,
    GraphError,
    Tensor,
    concat,
    cross_entropy,
    embedding_rows,
    matmul,
    row_cosine_distance_mean,
    softmax_temperature,
)
from .textpipe import BOS, EOS, PAD, Batch

VARIANTS = ("baseline", "discriminator", "sae", "combined")


def uses_latent_discriminator(variant: str) -> bool:
    return variant in ("discriminator", "combined")


def uses_cosine_losses(variant: str) -> bool:
    return variant in ("sae", "combined")


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    return variant


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    embed: int = 32
    hidden: int = 64
    latent: int = 16
    styles: int = 2
    dz_hidden: int = 32


@dataclass
class LatentCode:
    """Semantic component of one batch: posterior mean/logvar, sample, style code."""
    mu: Tensor          # [B x d_z]
    logvar: Tensor      # [B x d_z]
    sample: Tensor      # [B x d_z]; equals mu in deterministic mode
    style: np.ndarray   # [B x 2] one-hot


@dataclass
class LossWeights:
    lambda_c: float = 0.1
    lambda_z: float = 0.1
    lambda_dz: float = 1.0
    lambda_cos: float = 1.0
    lambda_cos_minus: float = 1.0


def flip_code(c: np.ndarray) -> np.ndarray:
    """Invert a batch of binary one-hot style codes."""
    return np.ascontiguousarray(c[:, ::-1])


class ModelParams:
    """Named parameter collection for encoder, generator, and both discriminators."""

    def __init__(self, dims: ModelDims, variant: str, rng: np.random.Generator):
        self.dims = dims
        self.variant = check_variant(variant)
        self.tensors: dict[str, Tensor] = {}
        e, h, d, s = dims.embed, dims.hidden, dims.latent, dims.styles
        self.tensors["embedding"] = Tensor(
            rng.uniform(-0.1, 0.1, size=(dims.vocab_size, e)), requires_grad=True)
        self._add_gru(rng, "enc", e, h)
        self._add(rng, "enc.mu.w", (h, d))
        self._zero("enc.mu.b", (d,))
        self._add(rng, "enc.logvar.w", (h, d))
        self._zero("enc.logvar.b", (d,))
        self._add(rng, "gen.init.w", (d + s, h))
        self._zero("gen.init.b", (h,))
        self._add_gru(rng, "gen", e, h)
        self._add(rng, "gen.out.w", (h, dims.vocab_size))
        self._zero("gen.out.b", (dims.vocab_size,))
        self._add_gru(rng, "d", e, h)
        self._add(rng, "d.head.w", (h, s))
        self._zero("d.head.b", (s,))
        self._add(rng, "dz.fc1.w", (d, dims.dz_hidden))
        self._zero("dz.fc1.b", (dims.dz_hidden,))
        self._add(rng, "dz.fc2.w", (dims.dz_hidden, s))
        self._zero("dz.fc2.b", (s,))

    def _add(self, rng: np.random.Generator, name: str, shape: tuple) -> None:
        bound = 1.0 / np.sqrt(shape[0])
        self.tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def _zero(self, name: str, shape: tuple) -> None:
        self.tensors[name] = Tensor(np.zeros(shape), requires_grad=True)

    def _add_gru(self, rng: np.random.Generator, prefix: str, in_dim: int, hidden: int) -> None:
        self._add(rng, f"{prefix}.gru.w_ih", (in_dim, 3 * hidden))
        # orthogonal recurrent blocks keep state norms stable over long rolls
        blocks = []
        for _ in range(3):
            a = rng.standard_normal((hidden, hidden))
            q, r = np.linalg.qr(a)
            q *= np.sign(np.diag(r))
            blocks.append(q)
        self.tensors[f"{prefix}.gru.w_hh"] = Tensor(np.concatenate(blocks, axis=1),
                                                    requires_grad=True)
        # positive update-gate bias opens the carry path, so early tokens
        # (the style marker sits at position 1) survive to the final hidden
        b_ih = np.zeros(3 * hidden)
        b_ih[hidden:2 * hidden] = 1.0
        self.tensors[f"{prefix}.gru.b_ih"] = Tensor(b_ih, requires_grad=True)
        self._zero(f"{prefix}.gru.b_hh", (3 * hidden,))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def cell(self, prefix: str) -> GRUCell:
        t = self.tensors
        return GRUCell(t[f"{prefix}.gru.w_ih"], t[f"{prefix}.gru.w_hh"],
                       t[f"{prefix}.gru.b_ih"], t[f"{prefix}.gru.b_hh"])

    # optimizer groups: the embedding belongs to the encoder/generator update;
    # discriminator phases never move it.
    def group_g(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items()
                if k == "embedding" or k.startswith(("enc.", "gen."))}

    def group_d(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith("d.")}

    def group_dz(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith("dz.")}

    def group_encoder(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items()
                if k == "embedding" or k.startswith("enc.")}

    def zero_all_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def clone(self) -> "ModelParams":
        other = object.__new__(ModelParams)
        other.dims = self.dims
        other.variant = self.variant
        other.tensors = {k: Tensor(v.data.copy(), requires_grad=True)
                         for k, v in self.tensors.items()}
        return other


# -- encoder -------------------------------------------------------------------

def encode(params: ModelParams, batch: Batch, deterministic: bool = True,
           rng: np.random.Generator | None = None) -> LatentCode:
    """Run the masked encoder GRU and the Gaussian heads over a batch.

    The final hidden state is taken at each row's last non-pad position.
    In deterministic mode the reparameterization noise is zero, so
    sample == mu exactly.
    """
    t = params.tensors
    cell = params.cell("enc")
    b, width = batch.ids.shape
    h: Tensor = Tensor(np.zeros((b, params.dims.hidden)))
    for step in range(width):
        x = embedding_rows(t["embedding"], batch.ids[:, step])
        h_new = cell.step(x, h)
        col = batch.mask[:, step:step + 1]
        if col.min() == 1.0:
            h = h_new
        else:
            h = h_new * col + h * (1.0 - col)
    mu = matmul(h, t["enc.mu.w"]) + t["enc.mu.b"]
    logvar = matmul(h, t["enc.logvar.w"]) + t["enc.logvar.b"]
    if deterministic:
        sample = mu
    else:
        if rng is None:
            raise ValueError("stochastic encode needs an rng; pass deterministic=True otherwise")
        eps = Tensor(rng.standard_normal((b, params.dims.latent)))
        sample = mu + (logvar * 0.5).exp() * eps
    return LatentCode(mu=mu, logvar=logvar, sample=sample, style=batch.styles)


def _encode_soft(params: ModelParams, soft_steps: list[Tensor],
                 frozen: bool = False) -> tuple[Tensor, Tensor]:
    """Encoder pass over a soft sentence: inputs are expected embeddings.

    With frozen=True the encoder (and the embedding on the reading side) is
    treated as a constant measuring device: gradients still flow into the
    soft distributions, but not into encoder parameters.
    """
    t = params.tensors
    if frozen:
        t = {k: (v.detach() if k == "embedding" or k.startswith("enc.") else v)
             for k, v in t.items()}
    cell = GRUCell(t["enc.gru.w_ih"], t["enc.gru.w_hh"], t["enc.gru.b_ih"], t["enc.gru.b_hh"])
    b = soft_steps[0].shape[0]
    h: Tensor = Tensor(np.zeros((b, params.dims.hidden)))
    for probs in soft_steps:
        x = matmul(probs, t["embedding"])
        h = cell.step(x, h)
    mu = matmul(h, t["enc.mu.w"]) + t["enc.mu.b"]
    logvar = matmul(h, t["enc.logvar.w"]) + t["enc.logvar.b"]
    return mu, logvar


# -- generator -------------------------------------------------------------------

def _initial_hidden(params: ModelParams, z: Tensor, c: np.ndarray) -> Tensor:
    zc = concat([z, Tensor(c)], axis=1)
    return matmul(zc, params["gen.init.w"]) + params["gen.init.b"]


def generate_soft(params: ModelParams, z: Tensor, c: np.ndarray, tau: float,
                  max_len: int) -> list[Tensor]:
    """Differentiable soft sentence: one [B x V] distribution per step.

    Each step's output distribution is softmax(logits / tau); its expected
    embedding is fed back as the next input, so gradients reach z, c-path
    weights, and the embedding itself.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    t = params.tensors
    cell = params.cell("gen")
    b = z.shape[0]
    h = _initial_hidden(params, z, c)
    x = embedding_rows(t["embedding"], np.full(b, BOS, dtype=np.int64))
    steps = []
    for _ in range(max_len):
        h = cell.step(x, h)
        logits = matmul(h, t["gen.out.w"]) + t["gen.out.b"]
        probs = softmax_temperature(logits, tau)
        steps.append(probs)
        x = matmul(probs, t["embedding"])
    return steps


def generate_greedy(params: ModelParams, z: np.ndarray, c: np.ndarray,
                    max_len: int) -> list[list[int]]:
    """Argmax decoding on raw arrays (no graph); stops per row at EOS.

    PAD and BOS are excluded from the argmax; ties break toward the lowest
    id via argmax semantics. Returns content token ids without specials,
    capped at max_len - 2 so a decode always re-encodes without truncation.
    """
    t = {k: v.data for k, v in params.tensors.items()}
    nh = params.dims.hidden
    b = z.shape[0]
    h = np.concatenate([z, c], axis=1) @ t["gen.init.w"] + t["gen.init.b"]
    x = np.broadcast_to(t["embedding"][BOS], (b, params.dims.embed))
    done = np.zeros(b, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(b)]
    for _ in range(max_len - 2):
        gi = x @ t["gen.gru.w_ih"] + t["gen.gru.b_ih"]
        gh = h @ t["gen.gru.w_hh"] + t["gen.gru.b_hh"]
        r = 1.0 / (1.0 + np.exp(-(gi[:, :nh] + gh[:, :nh])))
        u = 1.0 / (1.0 + np.exp(-(gi[:, nh:2 * nh] + gh[:, nh:2 * nh])))
        n = np.tanh(gi[:, 2 * nh:] + r * gh[:, 2 * nh:])
        h = (1.0 - u) * n + u * h
        logits = h @ t["gen.out.w"] + t["gen.out.b"]
        logits[:, PAD] = -np.inf
        logits[:, BOS] = -np.inf
        tok = logits.argmax(axis=1)
        for i in range(b):
            if not done[i]:
                if tok[i] == EOS:
                    done[i] = True
                else:
                    outputs[i].append(int(tok[i]))
        if done.all():
            break
        x = t["embedding"][tok]
    return outputs


# -- discriminator forward passes --------------------------------------------------

def _d_logits_real(params: ModelParams, batch: Batch) -> Tensor:
    """Style discriminator over real (hard) token embeddings, full padded width."""
    t = params.tensors
    cell = params.cell("d")
    b, width = batch.ids.shape
    h: Tensor = Tensor(np.zeros((b, params.dims.hidden)))
    for step in range(width):
        x = embedding_rows(t["embedding"], batch.ids[:, step])
        h = cell.step(x, h)
    return matmul(h, t["d.head.w"]) + t["d.head.b"]


def _d_logits_soft(params: ModelParams, soft_steps: list[Tensor]) -> Tensor:
    t = params.tensors
    cell = params.cell("d")
    b = soft_steps[0].shape[0]
    h: Tensor = Tensor(np.zeros((b, params.dims.hidden)))
    for probs in soft_steps:
        x = matmul(probs, t["embedding"])
        h = cell.step(x, h)
    return matmul(h, t["d.head.w"]) + t["d.head.b"]


def _dz_logits(params: ModelParams, z: Tensor) -> Tensor:
    t = params.tensors
    hidden = (matmul(z, t["dz.fc1.w"]) + t["dz.fc1.b"]).tanh()
    return matmul(hidden, t["dz.fc2.w"]) + t["dz.fc2.b"]


def d_loss_real(params: ModelParams, batch: Batch) -> tuple[Tensor, float]:
    """Style discriminator's own training loss on real sentences, plus accuracy."""
    logits = _d_logits_real(params, batch)
    loss = cross_entropy(logits, batch.labels)
    acc = float((logits.data.argmax(axis=1) == batch.labels).mean())
    return loss, acc


def dz_accuracy(params: ModelParams, mu: np.ndarray, labels: np.ndarray) -> float:
    hidden = np.tanh(mu @ params["dz.fc1.w"].data + params["dz.fc1.b"].data)
    logits = hidden @ params["dz.fc2.w"].data + params["dz.fc2.b"].data
    return float((logits.argmax(axis=1) == labels).mean())


# -- loss terms --------------------------------------------------------------------

def _require_latent(params: ModelParams, batch: Batch, latent: LatentCode | None,
                    rng: np.random.Generator | None) -> LatentCode:
    if latent is not None:
        return latent
    return encode(params, batch, deterministic=rng is None, rng=rng)


def loss_ae(params: ModelParams, batch: Batch, latent: LatentCode | None = None,
            rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced reconstruction: -log p(x | z, c) averaged over non-pad slots."""
    latent = _require_latent(params, batch, latent, rng)
    t = params.tensors
    cell = params.cell("gen")
    width = batch.ids.shape[1]
    h = _initial_hidden(params, latent.sample, latent.style)
    step_logits = []
    for step in range(width - 1):
        x = embedding_rows(t["embedding"], batch.ids[:, step])
        h = cell.step(x, h)
        step_logits.append(matmul(h, t["gen.out.w"]) + t["gen.out.b"])
    logits = concat(step_logits, axis=0)                 # step-major [(T-1)B x V]
    targets = batch.ids[:, 1:].T.reshape(-1)
    mask = (targets != PAD).astype(np.float64)
    return cross_entropy(logits, targets, mask, from_logits=True)


def loss_c(params: ModelParams, batch: Batch, tau: float,
           latent: LatentCode | None = None, soft: list[Tensor] | None = None,
           rng: np.random.Generator | None = None) -> Tensor:
    """Style fitness: discriminator's cross-entropy on the soft sentence vs. true c.

    Gradients reach the generator and encoder through the soft sentence; the
    discriminator trains separately on real data and is not updated here.
    """
    latent = _require_latent(params, batch, latent, rng)
    if soft is None:
        soft = generate_soft(params, latent.sample, latent.style, tau, batch.ids.shape[1])
    logits = _d_logits_soft(params, soft)
    return cross_entropy(logits, batch.labels)


def loss_z(params: ModelParams, batch: Batch, tau: float,
           latent: LatentCode | None = None, soft: list[Tensor] | None = None,
           rng: np.random.Generator | None = None) -> Tensor:
    """Latent consistency: -log q_E(z | soft sentence) under the re-encoded posterior.

    The re-encoded diagonal Gaussian (mu', logvar') scores the original z
    sample; minimizing keeps the generated sentence decodable back to its
    own latent. This term trains the generator only: the encoder acts as a
    frozen measuring device and z enters as a constant, otherwise the term
    rewards collapsing the encoder to a constant map.
    """
    latent = _require_latent(params, batch, latent, rng)
    if soft is None:
        soft = generate_soft(params, latent.sample, latent.style, tau, batch.ids.shape[1])
    mu2, logvar2 = _encode_soft(params, soft, frozen=True)
    # smooth floor at 0 on the re-encoded logvar (variance >= 1): the raw
    # density is unbounded below in logvar' and its exp(-logvar') factor
    # otherwise amplifies rollout gradients without limit. The floor maps
    # 0 -> 0, so the exact-match value (d_z/2)*ln(2*pi) is unchanged.
    floored = (logvar2 + (logvar2 * logvar2 + 1.0).sqrt() - 1.0) * 0.5
    diff = latent.sample.detach() - mu2
    per_dim = floored + diff * diff * (-1.0 * floored).exp() + LN_2PI
    return per_dim.sum(axis=1).mean() * 0.5


def loss_dz(params: ModelParams, z: Tensor, labels: np.ndarray,
            detach_z: bool = False) -> Tensor:
    """Latent adversary: cross-entropy of the z-discriminator's prediction vs. c.

    Trained positively on detached z for the discriminator itself; enters the
    encoder objective with a negative sign.
    """
    logits = _dz_logits(params, z.detach() if detach_z else z)
    return cross_entropy(logits, labels)


def loss_cos_pair(params: ModelParams, batch: Batch, tau: float,
                  latent: LatentCode | None = None,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Cosine distances between re-encoded soft outputs and the original mu.

    Generates once with the true code and once with the flipped code,
    re-encodes each deterministically, and returns both batch-averaged
    distances (0 is the optimum for each).
    """
    latent = _require_latent(params, batch, latent, rng)
    rep = latent.mu
    width = batch.ids.shape[1]
    soft_true = generate_soft(params, rep, latent.style, tau, width)
    soft_flip = generate_soft(params, rep, flip_code(latent.style), tau, width)
    mu_true, _ = _encode_soft(params, soft_true)
    mu_flip, _ = _encode_soft(params, soft_flip)
    return (row_cosine_distance_mean(mu_true, rep),
            row_cosine_distance_mean(mu_flip, rep))


def variant_losses(params: ModelParams, batch: Batch, tau: float,
                   rng: np.random.Generator | None = None,
                   latent: LatentCode | None = None) -> dict[str, Tensor]:
    """All active loss terms for params.variant, sharing one encode and one
    soft generation across terms."""
    latent = _require_latent(params, batch, latent, rng)
    width = batch.ids.shape[1]
    losses = {"ae": loss_ae(params, batch, latent=latent)}
    soft = generate_soft(params, latent.sample, latent.style, tau, width)
    losses["c"] = loss_c(params, batch, tau, latent=latent, soft=soft)
    losses["z"] = loss_z(params, batch, tau, latent=latent, soft=soft)
    if uses_latent_discriminator(params.variant):
        losses["dz"] = loss_dz(params, latent.mu, batch.labels)
    if uses_cosine_losses(params.variant):
        losses["cos"], losses["cos_minus"] = loss_cos_pair(params, batch, tau, latent=latent)
    return losses


def total_objective(variant: str, losses: dict[str, Tensor],
                    weights: LossWeights) -> Tensor:
    """The variant's weighted sum of loss terms, exactly as the variants compose."""
    check_variant(variant)
    required = {"ae", "c", "z"}
    if uses_latent_discriminator(variant):
        required.add("dz")
    if uses_cosine_losses(variant):
        required.update(("cos", "cos_minus"))
    missing = required - losses.keys()
    if missing:
        raise GraphError(f"variant {variant!r} missing loss terms: {sorted(missing)}")
    total = losses["ae"] + weights.lambda_c * losses["c"] + weights.lambda_z * losses["z"]
    if uses_latent_discriminator(variant):
        total = total - weights.lambda_dz * losses["dz"]
    if uses_cosine_losses(variant):
        total = total + weights.lambda_cos * losses["cos"] \
                      + weights.lambda_cos_minus * losses["cos_minus"]
    return total
