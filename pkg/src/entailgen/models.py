"""The four encoder-decoder variants and their training loop.

All variants share one schema: an encoder builds a fixed source
representation, and a GRU decoder consumes the gold prefix while that
representation is concatenated to every decoder state just before the
output projection. The variants differ only in where the source
representation comes from:

* ``unimodal``     - final encoder-GRU state over the premise.
* ``init_inject``  - encoder GRU initialized from projected image features,
                     final state returned.
* ``merge``        - final encoder-GRU state concatenated with projected
                     image features.
* ``image_only``   - projected image features alone; no encoder RNN.

Training is minibatch teacher forcing with Adam. Sequences are bucketed by
length, padded with PAD, and padded positions are excluded from the loss.
One reference hypothesis per premise is sampled per epoch (seeded).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numcore as nc
from .corpus import BOS, EOS, PAD
from .errors import ConfigError, ContractError, DataError, DimensionError

VARIANTS = ("unimodal", "init_inject", "merge", "image_only")

_GATES = ("z", "r", "h")


@dataclass
class ModelConfig:
    """Architecture selector plus every dimension the weights depend on."""

    variant: str
    vocab_size: int
    embed_dim: int = 256
    hidden_dim: int = 256
    image_dim: int = 4096
    image_proj_dim: int = 256
    max_decode_len: int = 30

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("vocab_size", "embed_dim", "hidden_dim", "image_dim",
                     "image_proj_dim", "max_decode_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def uses_text(self):
        return self.variant != "image_only"

    @property
    def uses_image(self):
        return self.variant != "unimodal"

    @property
    def source_dim(self):
        """Width of the source representation concatenated to decoder states."""
        if self.variant in ("unimodal", "init_inject"):
            return self.hidden_dim
        if self.variant == "merge":
            return self.hidden_dim + self.image_proj_dim
        return self.image_proj_dim

    @property
    def image_target_dim(self):
        # init_inject projects into the recurrent state; the others into
        # their own slice of the source representation.
        return self.hidden_dim if self.variant == "init_inject" else self.image_proj_dim

    def to_dict(self):
        return asdict(self)


@dataclass
class GRUWeights:
    W_z: nc.Tensor
    U_z: nc.Tensor
    b_z: nc.Tensor
    W_r: nc.Tensor
    U_r: nc.Tensor
    b_r: nc.Tensor
    W_h: nc.Tensor
    U_h: nc.Tensor
    b_h: nc.Tensor


@dataclass
class SourceRepresentation:
    """Fixed conditioning vector plus a tag saying which path produced it."""

    vector: nc.Tensor  # shape (batch, dim)
    provenance: str

    @property
    def dimension(self):
        return self.vector.shape[-1]


def _param_shapes(config):
    """Canonical name -> shape map; also fixes checkpoint record order."""
    e, h, v = config.embed_dim, config.hidden_dim, config.vocab_size
    shapes = {}
    if config.uses_text:
        shapes["enc_embed"] = (v, e)
        for g in _GATES:
            shapes[f"enc_gru.W_{g}"] = (e, h)
            shapes[f"enc_gru.U_{g}"] = (h, h)
            shapes[f"enc_gru.b_{g}"] = (h,)
    if config.uses_image:
        shapes["img.W"] = (config.image_dim, config.image_target_dim)
        shapes["img.b"] = (config.image_target_dim,)
    shapes["dec_embed"] = (v, e)
    for g in _GATES:
        shapes[f"dec_gru.W_{g}"] = (e, h)
        shapes[f"dec_gru.U_{g}"] = (h, h)
        shapes[f"dec_gru.b_{g}"] = (h,)
    shapes["out.W"] = (h + config.source_dim, v)
    shapes["out.b"] = (v,)
    return shapes


class ModelParams:
    """All learned weights for one configuration, as named leaf tensors."""

    def __init__(self, config, tensors):
        expected = _param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ConfigError(
                    f"parameter {name!r} has shape {tuple(tensors[name].shape)}, "
                    f"expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    @classmethod
    def init(cls, config, seed, init_scale=0.08, dtype=np.float32):
        """Seeded uniform [-init_scale, init_scale] initialization."""
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        tensors = {name: nc.uniform_param(shape, rng, init_scale, dtype)
                   for name, shape in _param_shapes(config).items()}
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config, dtype=np.float32):
        tensors = {name: nc.zeros_param(shape, dtype)
                   for name, shape in _param_shapes(config).items()}
        return cls(config, tensors)

    def names(self):
        return list(self.tensors)

    def as_list(self):
        return list(self.tensors.values())

    def copy(self):
        clone = {name: nc.Tensor(t.data.copy(), requires_grad=True)
                 for name, t in self.tensors.items()}
        return ModelParams(self.config, clone)

    def gru(self, prefix):
        return GRUWeights(**{f"{w}_{g}": self.tensors[f"{prefix}.{w}_{g}"]
                             for g in _GATES for w in ("W", "U", "b")})

    def save(self, path):
        nc.save_checkpoint(path, self.tensors)

    @classmethod
    def load(cls, path, config):
        arrays = nc.load_checkpoint(path)
        expected = _param_shapes(config)
        if set(arrays) != set(expected):
            raise ConfigError(
                f"checkpoint parameters {sorted(arrays)} do not match the "
                f"{config.variant} configuration")
        tensors = {name: nc.Tensor(arrays[name], requires_grad=True) for name in expected}
        return cls(config, tensors)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def gru_step(x, h, weights):
    """One GRU update.

    z = sigma(x W_z + h U_z + b_z); r likewise; the candidate state uses the
    reset-gated h; h' = (1 - z) * h + z * h_tilde. Batched: x is (B, E) and
    h is (B, H).
    """
    w = weights
    z = nc.sigmoid(nc.add(nc.add(nc.matmul(x, w.W_z), nc.matmul(h, w.U_z)), w.b_z))
    r = nc.sigmoid(nc.add(nc.add(nc.matmul(x, w.W_r), nc.matmul(h, w.U_r)), w.b_r))
    h_tilde = nc.tanh(nc.add(nc.add(nc.matmul(x, w.W_h),
                                    nc.matmul(nc.mul(r, h), w.U_h)), w.b_h))
    return nc.add(nc.mul(nc.sub(1.0, z), h), nc.mul(z, h_tilde))


def _run_encoder_gru(params, prem, lengths, h0):
    """Masked GRU sweep: rows stop updating once past their true length."""
    embed = params.tensors["enc_embed"]
    w = params.gru("enc_gru")
    batch, max_len = prem.shape
    hidden = params.config.hidden_dim
    dtype = embed.dtype
    h = h0
    for t in range(max_len):
        x = nc.gather_rows(embed, prem[:, t])
        h_new = gru_step(x, h, w)
        if np.all(lengths > t):
            h = h_new
            continue
        alive = (lengths > t).astype(dtype)
        mask = nc.Tensor(np.repeat(alive[:, None], hidden, axis=1))
        h = nc.add(nc.mul(mask, h_new), nc.mul(nc.sub(1.0, mask), h))
    return h


def _project_image(params, images):
    return nc.tanh(nc.add(nc.matmul(images, params.tensors["img.W"]),
                          params.tensors["img.b"]))


def _image_batch_tensor(params, images):
    config = params.config
    arr = np.asarray(images, dtype=params.tensors["out.W"].dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != config.image_dim:
        raise DimensionError("image features", arr.shape, (config.image_dim,))
    return nc.Tensor(arr)


def _premise_batch(params, premise_ids):
    prem = np.asarray(premise_ids, dtype=np.int64)
    if prem.ndim == 1:
        prem = prem[None, :]
    if prem.shape[1] == 0:
        raise ContractError("cannot encode an empty premise")
    lengths = np.full(prem.shape[0], prem.shape[1], dtype=np.int64)
    return prem, lengths


def _zero_state(params, batch):
    hidden = params.config.hidden_dim
    return nc.Tensor(np.zeros((batch, hidden), dtype=params.tensors["out.W"].dtype))


def encode_unimodal(premise_ids, params):
    """Final encoder state over the premise, from a zero initial state."""
    prem, lengths = _premise_batch(params, premise_ids)
    h = _run_encoder_gru(params, prem, lengths, _zero_state(params, prem.shape[0]))
    return SourceRepresentation(h, "text_final_state")


def encode_init_inject(premise_ids, image_vector, params, pair_id=None):
    """Encoder run from an image-projected initial state; final state kept."""
    if image_vector is None:
        raise DataError(f"missing image features for pair {pair_id!r}")
    prem, lengths = _premise_batch(params, premise_ids)
    h0 = _project_image(params, _image_batch_tensor(params, image_vector))
    h = _run_encoder_gru(params, prem, lengths, h0)
    return SourceRepresentation(h, "image_init_final_state")


def encode_merge(premise_ids, image_vector, params, pair_id=None):
    """Unimodal final state concatenated with the projected image features."""
    if image_vector is None:
        raise DataError(f"missing image features for pair {pair_id!r}")
    text = encode_unimodal(premise_ids, params).vector
    img = _project_image(params, _image_batch_tensor(params, image_vector))
    return SourceRepresentation(nc.concat([text, img]), "merge_concat")


def encode_image_only(image_vector, params, pair_id=None):
    """Projected image features alone; the premise plays no part."""
    if image_vector is None:
        raise DataError(f"missing image features for pair {pair_id!r}")
    img = _project_image(params, _image_batch_tensor(params, image_vector))
    return SourceRepresentation(img, "image_only")


def encode_source(params, premise_ids=None, image_vector=None, pair_id=None):
    """Variant dispatch used by training, decoding and the CLI."""
    variant = params.config.variant
    if variant == "unimodal":
        return encode_unimodal(premise_ids, params)
    if variant == "init_inject":
        return encode_init_inject(premise_ids, image_vector, params, pair_id)
    if variant == "merge":
        return encode_merge(premise_ids, image_vector, params, pair_id)
    return encode_image_only(image_vector, params, pair_id)


def _encode_source_batch(params, prem, lengths, images):
    variant = params.config.variant
    batch = prem.shape[0] if prem is not None else images.shape[0]
    if variant == "unimodal":
        h = _run_encoder_gru(params, prem, lengths, _zero_state(params, batch))
        return h
    img = _image_batch_tensor(params, images) if variant != "unimodal" else None
    if variant == "init_inject":
        return _run_encoder_gru(params, prem, lengths, _project_image(params, img))
    if variant == "merge":
        text = _run_encoder_gru(params, prem, lengths, _zero_state(params, batch))
        return nc.concat([text, _project_image(params, img)])
    return _project_image(params, img)


def decoder_step(params, src_vector, h, token_ids):
    """One decoder step: returns (new state, logits over the vocabulary)."""
    x = nc.gather_rows(params.tensors["dec_embed"], np.asarray(token_ids, dtype=np.int64))
    h_new = gru_step(x, h, params.gru("dec_gru"))
    feats = nc.concat([h_new, src_vector])
    if feats.shape[-1] != params.tensors["out.W"].shape[0]:
        raise ConfigError(
            f"source representation of width {src_vector.shape[-1]} does not "
            f"match the output layer (expects {params.tensors['out.W'].shape[0]} inputs)")
    logits = nc.add(nc.matmul(feats, params.tensors["out.W"]), params.tensors["out.b"])
    return h_new, logits


def _teacher_forced_sum(params, src_vector, targets):
    """Summed NLL over non-PAD target positions; also the per-step logits.

    ``targets`` is (B, T) with BOS first and EOS last; positions 1..T-1 are
    predicted from the gold prefix. Returns (nll_sum, token_count, logits).
    """
    batch, t_max = targets.shape
    h = _zero_state(params, batch)
    total = None
    count = 0
    step_logits = []
    for t in range(t_max - 1):
        h, logits = decoder_step(params, src_vector, h, targets[:, t])
        step_logits.append(logits)
        gold = targets[:, t + 1]
        mask = (gold != PAD).astype(np.float64)
        count += int(mask.sum())
        safe_gold = np.where(gold == PAD, 0, gold)
        ce = nc.cross_entropy(logits, safe_gold, mask=mask, reduction="sum")
        total = ce if total is None else nc.add(total, ce)
    return total, count, step_logits


def decode_teacher_forced(src, target_ids, params):
    """Mean NLL of one gold hypothesis under the source representation.

    The target must be BOS-initial and EOS-final; EOS is predicted (and
    scored), PAD never appears in a single-instance target. Returns the
    scalar loss and the per-step logits.
    """
    tgt = np.asarray(target_ids, dtype=np.int64)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    if tgt.shape[1] < 2 or tgt[0, 0] != BOS or tgt[0, -1] != EOS:
        raise ContractError("target must start with BOS and end with EOS")
    vector = src.vector if isinstance(src, SourceRepresentation) else src
    total, count, step_logits = _teacher_forced_sum(params, vector, tgt)
    loss = nc.mul(total, 1.0 / count)
    return loss, step_logits


def per_token_nll(params, target_ids, premise_ids=None, image_vector=None):
    """Forward-only per-position NLL (float64) for one example.

    Position t holds the NLL of target token t+1 given the gold prefix;
    used for perplexity and for position-restricted analyses.
    """
    src = encode_source(params, premise_ids, image_vector)
    tgt = np.asarray(target_ids, dtype=np.int64)[None, :]
    _, _, step_logits = _teacher_forced_sum(params, src.vector, tgt)
    out = np.empty(tgt.shape[1] - 1, dtype=np.float64)
    for t, logits in enumerate(step_logits):
        logp = nc.log_softmax(logits.data[0])
        out[t] = -logp[tgt[0, t + 1]]
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    pair_ids: list
    premises: np.ndarray  # (B, Tp) int, PAD-padded; None for image_only
    lengths: np.ndarray
    targets: np.ndarray  # (B, Tt) int, PAD-padded
    images: np.ndarray  # (B, D) float, or None


def _pad_rows(rows):
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def make_batches(pairs, config, batch_size, rng, features=None):
    """Sample one reference per premise, bucket by length, batch, shuffle.

    ``pairs`` are EncodedTriples. Deterministic given the generator state.
    """
    if not pairs:
        return []
    choices = [int(rng.integers(len(p.hypothesis_ids))) for p in pairs]
    order = sorted(range(len(pairs)),
                   key=lambda i: (len(pairs[i].premise_ids),
                                  len(pairs[i].hypothesis_ids[choices[i]]), i))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        prems = [pairs[i].premise_ids for i in idx]
        tgts = [pairs[i].hypothesis_ids[choices[i]] for i in idx]
        images = None
        if config.uses_image:
            images = np.stack([np.asarray(features.get(pairs[i].image_id), dtype=np.float64)
                               for i in idx]).astype(np.float32)
        batches.append(Batch(
            pair_ids=[pairs[i].pair_id for i in idx],
            premises=_pad_rows(prems) if config.uses_text else None,
            lengths=np.array([len(p) for p in prems], dtype=np.int64),
            targets=_pad_rows(tgts),
            images=images))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def batch_nll(params, batch):
    """Forward-only summed NLL and token count for one batch."""
    src = _encode_source_batch(params, batch.premises, batch.lengths, batch.images)
    total, count, _ = _teacher_forced_sum(params, src, batch.targets)
    return float(total.data), count


def corpus_nll(params, pairs, features=None, sample_seed=0, batch_size=64):
    """Total NLL and token count over a corpus, one sampled ref per premise."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(sample_seed)))
    total, count = 0.0, 0
    for batch in make_batches(pairs, params.config, batch_size, rng, features):
        t, c = batch_nll(params, batch)
        total += t
        count += c
    return total, count


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    init_scale: float = 0.08

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_ppl: float
    dev_ppl: float


@dataclass
class RunLog:
    """Everything needed to reproduce and audit one training run."""

    config: dict
    schedule: dict
    data_hashes: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_dev_ppl: float = math.inf

    def to_dict(self):
        d = asdict(self)
        d["epochs"] = [asdict(e) for e in self.epochs]
        return d


def _dataset_hash(pairs):
    h = hashlib.sha256()
    for p in pairs:
        h.update(json.dumps([p.pair_id, p.premise_ids, p.hypothesis_ids, p.image_id],
                            sort_keys=True).encode())
    return h.hexdigest()


def train(train_pairs, dev_pairs, config, schedule, features=None, initial=None):
    """Teacher-forced minibatch training; returns (best params, run log).

    The best-dev checkpoint is retained and returned; the log records one
    line per epoch. Multimodal variants fail fast when any referenced
    image id has no stored features.
    """
    if not train_pairs:
        raise ContractError("empty training set")
    if config.uses_image:
        if features is None:
            raise DataError(f"variant {config.variant!r} requires image features")
        missing = [p.image_id for p in list(train_pairs) + list(dev_pairs)
                   if p.image_id not in features]
        if missing:
            raise DataError(
                "missing image features for ids: " + ", ".join(sorted(set(missing))))

    params = initial.copy() if initial is not None else ModelParams.init(
        config, schedule.seed, schedule.init_scale)
    leaves = params.as_list()
    adam = nc.AdamState(leaves, lr=schedule.lr)
    log = RunLog(config=config.to_dict(), schedule=schedule.to_dict(),
                 data_hashes={"train": _dataset_hash(train_pairs),
                              "dev": _dataset_hash(dev_pairs)})
    best = params.copy()

    for epoch in range(1, schedule.epochs + 1):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([schedule.seed, epoch])))
        epoch_nll, epoch_tokens = 0.0, 0
        for batch in make_batches(train_pairs, config, schedule.batch_size, rng, features):
            with nc.GradientGraph() as graph:
                src = _encode_source_batch(params, batch.premises, batch.lengths,
                                           batch.images)
                total, count, _ = _teacher_forced_sum(params, src, batch.targets)
                loss = nc.mul(total, 1.0 / count)
            grads = nc.backward(graph, loss, leaves)
            nc.adam_step(leaves, grads, adam)
            epoch_nll += float(total.data)
            epoch_tokens += count
        train_ppl = math.exp(epoch_nll / epoch_tokens)
        if dev_pairs:
            dev_total, dev_count = corpus_nll(params, dev_pairs, features,
                                              sample_seed=schedule.seed)
            dev_ppl = math.exp(dev_total / dev_count)
        else:
            dev_ppl = train_ppl
        log.epochs.append(EpochStats(epoch, epoch_nll / epoch_tokens, train_ppl, dev_ppl))
        if dev_ppl < log.best_dev_ppl:
            log.best_dev_ppl = dev_ppl
            log.best_epoch = epoch
            best = params.copy()
    return best, log
