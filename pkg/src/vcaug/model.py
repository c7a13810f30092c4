"""The full conversion network and its checkpoint format.

Input features pass through a 4x-subsampling convolutional encoder with
attention/conv/feed-forward blocks, are quantized by the grouped codebook,
concatenated with a dense speaker embedding copied across time, and decoded
back to full frame rate by a BiLSTM stack plus two stride-2 transposed
convolutions.  The time axis is right-padded to a multiple of 4 on the way
in and the decoder output is trimmed back to the requested length.

Checkpoints are self-describing: a config snapshot, the step count, and a
named-tensor table whose sha256 is verified on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import adversary as adv
from . import autodiff as ad
from . import bottleneck as bn
from .autodiff import Tensor
from .signal import MelSpectrogram

CHECKPOINT_MAGIC = b"VCCK"
CHECKPOINT_VERSION = 1

LN_EPS = 1e-5


class CheckpointError(ValueError):
    """Malformed, tampered, or incompatible checkpoint file."""


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 2
    model_dim: int = 64
    n_heads: int = 2
    subsample_factor: int = 4
    conv_kernel: int = 3
    ff_multiplier: int = 2
    frozen: bool = False

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by {self.n_heads} heads")
        if self.subsample_factor != 4:
            raise ValueError("subsample_factor is fixed at 4")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")


@dataclass(frozen=True)
class DecoderConfig:
    n_lstm_layers: int = 2
    lstm_dim: int = 64
    upsample_kernel: int = 4

    def __post_init__(self):
        if self.n_lstm_layers < 1:
            raise ValueError("need at least one LSTM layer")


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    n_speakers: int = 6
    speaker_dim: int = 256
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    vq_groups: int = 2
    vq_entries: int = 128
    commitment_weight: float = 0.25
    adv_hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.encoder.model_dim % self.vq_groups != 0:
            raise ValueError("model_dim must divide evenly into codebook groups")
        if self.n_speakers < 1:
            raise ValueError("need at least one speaker")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        d["decoder"] = DecoderConfig(**d["decoder"])
        return ModelConfig(**d)


def _init_tensor(shape, fan_in: int, name: str, seed: int, dtype, gain: float = 1.0) -> Tensor:
    """Uniform(-gain/sqrt(fan_in), +gain/sqrt(fan_in)); the stream is keyed by name."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    bound = gain / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


# Plain 1/sqrt(fan_in) initialization attenuates the reconstruction gradient
# so strongly across the decoder stack that the commitment pull collapses the
# encoder before the decoder starts using the bottleneck.  A moderate gain on
# decoder weights balances the two forces at small scale.
DECODER_INIT_GAIN = 3.0


class VcModel:
    """Encoder + grouped codebook + speaker table + adversary head + decoder."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.step = 0
        self.params: dict[str, Tensor] = {}
        self._build()
        self.feature_mean = np.zeros(config.n_mels, dtype=dtype)
        self.feature_std = np.ones(config.n_mels, dtype=dtype)

    # -- construction -------------------------------------------------------

    def _add(self, name: str, shape, fan_in: int, gain: float = 1.0) -> Tensor:
        t = _init_tensor(shape, fan_in, name, self.config.seed, self.dtype, gain=gain)
        self.params[name] = t
        return t

    def _add_zeros(self, name: str, shape) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=self.dtype))
        self.params[name] = t
        return t

    def _add_ones(self, name: str, shape) -> Tensor:
        t = Tensor(np.ones(shape, dtype=self.dtype))
        self.params[name] = t
        return t

    def _build(self) -> None:
        cfg = self.config
        enc = cfg.encoder
        dim = enc.model_dim
        k = enc.conv_kernel

        self._add("enc.sub1.w", (k, cfg.n_mels, dim), k * cfg.n_mels)
        self._add_zeros("enc.sub1.b", (dim,))
        self._add("enc.sub2.w", (k, dim, dim), k * dim)
        self._add_zeros("enc.sub2.b", (dim,))
        for i in range(enc.n_blocks):
            p = f"enc.block{i}"
            for ln in ("ln1", "ln2", "ln3"):
                self._add_ones(f"{p}.{ln}.g", (dim,))
                self._add_zeros(f"{p}.{ln}.b", (dim,))
            for w in ("wq", "wk", "wv", "wo"):
                self._add(f"{p}.attn.{w}", (dim, dim), dim)
            self._add(f"{p}.conv.dw", (k, dim), k)
            self._add(f"{p}.conv.pw.w", (dim, dim), dim)
            self._add_zeros(f"{p}.conv.pw.b", (dim,))
            hidden = dim * enc.ff_multiplier
            self._add(f"{p}.ff.w1", (dim, hidden), dim)
            self._add_zeros(f"{p}.ff.b1", (hidden,))
            self._add(f"{p}.ff.w2", (hidden, dim), hidden)
            self._add_zeros(f"{p}.ff.b2", (dim,))
        # the output layer norm carries no affine: a learnable shared gain
        # gives the commitment term a collapse shortcut at small batch sizes

        self.codebook = bn.Codebook(
            dim, n_groups=cfg.vq_groups, n_entries=cfg.vq_entries,
            seed=cfg.seed, dtype=self.dtype,
        )
        self.params.update(self.codebook.parameters())

        self._add("spk.embedding", (cfg.n_speakers, cfg.speaker_dim), cfg.speaker_dim)

        self.adversary = adv.AdversaryHead(
            dim, cfg.n_speakers, hidden_dim=cfg.adv_hidden, seed=cfg.seed, dtype=self.dtype
        )
        self.params.update(self.adversary.parameters())

        dec = cfg.decoder
        g = DECODER_INIT_GAIN
        in_dim = dim + cfg.speaker_dim
        for layer in range(dec.n_lstm_layers):
            for direction in ("fwd", "bwd"):
                p = f"dec.lstm{layer}.{direction}"
                self._add(f"{p}.wx", (in_dim, 4 * dec.lstm_dim), in_dim, gain=g)
                self._add(f"{p}.wh", (dec.lstm_dim, 4 * dec.lstm_dim), dec.lstm_dim, gain=g)
                self._add_zeros(f"{p}.b", (4 * dec.lstm_dim,))
            in_dim = 2 * dec.lstm_dim
        ku = dec.upsample_kernel
        self._add("dec.up1.w", (ku, in_dim, dec.lstm_dim), ku * in_dim, gain=g)
        self._add_zeros("dec.up1.b", (dec.lstm_dim,))
        self._add("dec.up2.w", (ku, dec.lstm_dim, dec.lstm_dim), ku * dec.lstm_dim, gain=g)
        self._add_zeros("dec.up2.b", (dec.lstm_dim,))
        self._add("dec.proj.w", (dec.lstm_dim, cfg.n_mels), dec.lstm_dim, gain=g)
        self._add_zeros("dec.proj.b", (cfg.n_mels,))

    # -- parameter access ---------------------------------------------------

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        if trainable_only and self.config.encoder.frozen:
            return {k: v for k, v in self.params.items() if not k.startswith("enc.")}
        return dict(self.params)

    def set_feature_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.feature_mean = np.asarray(mean, dtype=self.dtype)
        self.feature_std = np.maximum(np.asarray(std, dtype=self.dtype), 1e-3)

    # -- forward pieces -----------------------------------------------------

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"], eps=LN_EPS)

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        enc = self.config.encoder
        head_dim = enc.model_dim // enc.n_heads
        scale = Tensor(np.asarray(1.0 / np.sqrt(head_dim), dtype=self.dtype))
        q = ad.matmul(x, self.params[f"{prefix}.wq"])
        k = ad.matmul(x, self.params[f"{prefix}.wk"])
        v = ad.matmul(x, self.params[f"{prefix}.wv"])
        outs = []
        for h in range(enc.n_heads):
            lo = h * head_dim
            qh = ad.narrow(q, 1, lo, head_dim)
            kh = ad.narrow(k, 1, lo, head_dim)
            vh = ad.narrow(v, 1, lo, head_dim)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
            outs.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
        return ad.matmul(ad.concat(outs, axis=1), self.params[f"{prefix}.wo"])

    def _encoder_block(self, x: Tensor, i: int) -> Tensor:
        p = f"enc.block{i}"
        x = ad.add(x, self._attention(self._ln(x, f"{p}.ln1"), f"{p}.attn"))
        c = self._ln(x, f"{p}.ln2")
        c = ad.relu(ad.depthwise_conv1d(c, self.params[f"{p}.conv.dw"]))
        c = ad.add(ad.matmul(c, self.params[f"{p}.conv.pw.w"]), self.params[f"{p}.conv.pw.b"])
        x = ad.add(x, c)
        f = self._ln(x, f"{p}.ln3")
        f = ad.relu(ad.add(ad.matmul(f, self.params[f"{p}.ff.w1"]), self.params[f"{p}.ff.b1"]))
        f = ad.add(ad.matmul(f, self.params[f"{p}.ff.w2"]), self.params[f"{p}.ff.b2"])
        return ad.add(x, f)

    def encode(self, mel) -> Tensor:
        """Map a [T, M] mel matrix to [ceil(T/4), model_dim] content encodings."""
        values = mel.data if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        t = values.shape[0]
        if t < 4:
            raise ValueError(f"need at least 4 frames to encode, got {t}")
        if values.shape[1] != self.config.n_mels:
            raise ad.ShapeError("encode", values.shape, (self.config.n_mels,))
        normalized = (values.astype(self.dtype) - self.feature_mean) / self.feature_std
        pad = (-t) % 4
        if pad:
            normalized = np.pad(normalized, ((0, pad), (0, 0)))
        x = Tensor(normalized)
        x = ad.relu(ad.add(ad.conv1d(x, self.params["enc.sub1.w"], stride=2, padding=1),
                           self.params["enc.sub1.b"]))
        x = ad.relu(ad.add(ad.conv1d(x, self.params["enc.sub2.w"], stride=2, padding=1),
                           self.params["enc.sub2.b"]))
        for i in range(self.config.encoder.n_blocks):
            x = self._encoder_block(x, i)
        return ad.layer_norm(x, eps=LN_EPS)

    def embed_and_concat(self, bottleneck_out: Tensor, speaker_id: int) -> Tensor:
        """Append the speaker embedding row to every frame: [T', D] -> [T', D+E]."""
        if not 0 <= speaker_id < self.config.n_speakers:
            raise ValueError(
                f"speaker id {speaker_id} out of range [0, {self.config.n_speakers})"
            )
        t = bottleneck_out.shape[0]
        emb = ad.embedding_lookup(self.params["spk.embedding"], [speaker_id])
        tiled = ad.add(Tensor(np.zeros((t, self.config.speaker_dim), dtype=self.dtype)), emb)
        return ad.concat([bottleneck_out, tiled], axis=1)

    def _bilstm_layer(self, x: Tensor, layer: int) -> Tensor:
        dec = self.config.decoder
        t = x.shape[0]
        outs: dict[str, list[Tensor]] = {}
        for direction in ("fwd", "bwd"):
            p = f"dec.lstm{layer}.{direction}"
            wx, wh, b = self.params[f"{p}.wx"], self.params[f"{p}.wh"], self.params[f"{p}.b"]
            h = Tensor(np.zeros((1, dec.lstm_dim), dtype=self.dtype))
            c = Tensor(np.zeros((1, dec.lstm_dim), dtype=self.dtype))
            steps = range(t) if direction == "fwd" else range(t - 1, -1, -1)
            collected = [None] * t
            for i in steps:
                h, c = ad.lstm_cell(ad.narrow(x, 0, i, 1), h, c, wx, wh, b)
                collected[i] = h
            outs[direction] = collected
        rows = [ad.concat([outs["fwd"][i], outs["bwd"][i]], axis=1) for i in range(t)]
        return ad.concat(rows, axis=0)

    def decode(self, x: Tensor, target_len: int) -> Tensor:
        """BiLSTM stack, 4x transposed-conv upsample, project, trim to target_len."""
        t_in = x.shape[0]
        if target_len > 4 * t_in:
            raise ValueError(f"target_len {target_len} exceeds 4*T' = {4 * t_in}")
        if target_len < 1:
            raise ValueError("target_len must be positive")
        for layer in range(self.config.decoder.n_lstm_layers):
            x = self._bilstm_layer(x, layer)
        x = ad.relu(ad.add(ad.conv1d_transpose(x, self.params["dec.up1.w"], stride=2, padding=1),
                           self.params["dec.up1.b"]))
        x = ad.relu(ad.add(ad.conv1d_transpose(x, self.params["dec.up2.w"], stride=2, padding=1),
                           self.params["dec.up2.b"]))
        x = ad.add(ad.matmul(x, self.params["dec.proj.w"]), self.params["dec.proj.b"])
        x = ad.narrow(x, 0, 0, target_len)
        std = Tensor(self.feature_std)
        mean = Tensor(self.feature_mean)
        return ad.add(ad.mul(x, std), mean)

    def forward_tensors(self, mel, speaker_id: int, adv_weight: float = 0.1,
                        frozen_selection: bn.FrozenSelection | None = None):
        """Differentiable end-to-end pass; returns (recon, quantize result, logits).

        `frozen_selection` pins the quantizer assignment, which makes the
        whole computation smooth for finite-difference verification.
        """
        values = mel.data if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        z_e = self.encode(values)
        if frozen_selection is None:
            qr = bn.quantize(z_e, self.codebook,
                             commitment_weight=self.config.commitment_weight)
            logits = self.adversary.logits(qr.z_q, adv_weight)
        else:
            qr = bn.quantize_frozen(z_e, self.codebook, frozen_selection,
                                    commitment_weight=self.config.commitment_weight)
            logits = self.adversary.logits_linearized(
                qr.z_q, adv_weight, frozen_selection.e_sel
            )
        cond = self.embed_and_concat(qr.z_q, speaker_id)
        recon = self.decode(cond, target_len=values.shape[0])
        return recon, qr, logits

    def capture_selection(self, mel) -> bn.FrozenSelection:
        """Snapshot the quantizer assignment for this input at current parameters."""
        values = mel.data if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        z_e = self.encode(values)
        qr = bn.quantize(z_e, self.codebook,
                         commitment_weight=self.config.commitment_weight)
        return bn.freeze_selection(z_e.values, qr)

    def forward(self, mel, speaker_id: int):
        """Inference pass: (reconstruction mel, quantize result, logit array)."""
        recon, qr, logits = self.forward_tensors(mel, speaker_id)
        frame_size = mel.frame_size_ms if isinstance(mel, MelSpectrogram) else 25.0
        frame_shift = mel.frame_shift_ms if isinstance(mel, MelSpectrogram) else 10.0
        out = MelSpectrogram(
            data=recon.values.astype(np.float32),
            frame_size_ms=frame_size,
            frame_shift_ms=frame_shift,
        )
        return out, qr, np.asarray(logits.values)


# ---------------------------------------------------------------------------
# checkpoint serialization


def _tensor_table_bytes(named: dict[str, np.ndarray]) -> bytes:
    chunks = []
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def _named_arrays(model: VcModel) -> dict[str, np.ndarray]:
    named = {name: t.values for name, t in model.params.items()}
    named["norm.mean"] = model.feature_mean
    named["norm.std"] = model.feature_std
    return named


def save_checkpoint(model: VcModel, path, extra_meta: dict | None = None) -> None:
    table = _tensor_table_bytes(_named_arrays(model))
    meta = {
        "config": model.config.to_dict(),
        "content_hash": hashlib.sha256(table).hexdigest(),
        "n_tensors": len(model.params) + 2,
        "extra": extra_meta or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQI", CHECKPOINT_VERSION, model.step, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(table)


def read_checkpoint_raw(path) -> tuple[dict, int, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint; returns (meta, step, name -> f32 array)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, step, meta_len = struct.unpack("<IQI", blob[4:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta_end = 20 + meta_len
    if len(blob) < meta_end:
        raise CheckpointError(f"{path}: truncated metadata")
    meta = json.loads(blob[20:meta_end].decode("utf-8"))
    table = blob[meta_end:]
    if hashlib.sha256(table).hexdigest() != meta["content_hash"]:
        raise CheckpointError(f"{path}: tensor table hash mismatch (corrupted)")

    named: dict[str, np.ndarray] = {}
    off = 0
    while off < len(table):
        (name_len,) = struct.unpack_from("<H", table, off)
        off += 2
        name = table[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", table, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", table, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(table, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        named[name] = arr.copy()
    return meta, step, named


def load_checkpoint(path, dtype=np.float32) -> VcModel:
    """Rebuild a model from its snapshot; forward outputs reproduce bit-exactly."""
    meta, step, named = read_checkpoint_raw(path)
    model = VcModel(ModelConfig.from_dict(meta["config"]), dtype=dtype)
    missing = sorted(set(model.params) - set(named))
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    for name, tensor in model.params.items():
        arr = named[name]
        if arr.shape != tensor.values.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {arr.shape}, expected {tensor.values.shape}"
            )
        tensor.values = arr.astype(dtype)
    model.feature_mean = named["norm.mean"].astype(dtype)
    model.feature_std = named["norm.std"].astype(dtype)
    model.step = step
    return model


ENCODER_CONFIG_KEYS = ("n_mels", "encoder")


def load_encoder_from(model: VcModel, donor_path) -> None:
    """Import the encoder subtree from a donor checkpoint (frozen-encoder workflow).

    The donor's encoder-relevant config must match; everything outside
    "enc.*" keeps its fresh initialization.
    """
    meta, _, named = read_checkpoint_raw(donor_path)
    donor_cfg = ModelConfig.from_dict(meta["config"])
    ours = model.config
    mismatched = []
    if donor_cfg.n_mels != ours.n_mels:
        mismatched.append("n_mels")
    donor_enc = replace(donor_cfg.encoder, frozen=ours.encoder.frozen)
    if donor_enc != ours.encoder:
        for f_name in ("n_blocks", "model_dim", "n_heads", "subsample_factor",
                       "conv_kernel", "ff_multiplier"):
            if getattr(donor_cfg.encoder, f_name) != getattr(ours.encoder, f_name):
                mismatched.append(f"encoder.{f_name}")
    if mismatched:
        raise CheckpointError(
            f"{donor_path}: encoder config mismatch on keys: {', '.join(mismatched)}"
        )
    for name, tensor in model.params.items():
        if name.startswith("enc."):
            tensor.values = named[name].astype(model.dtype)
