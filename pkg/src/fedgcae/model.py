"""GCAE and baseline architectures over the flat-parameter engine."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels, nn
from .nn import ConfigurationError, LayerSpec

__all__ = [
    "Architecture",
    "Network",
    "gcae_arch",
    "fl_cnn_arch",
    "fl_cnn_large_arch",
    "fl_mlp_arch",
    "get_arch",
    "ARCHITECTURES",
    "param_count",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
    "params_digest",
]

INPUT_SHAPE = (20, 20, 3)
NUM_CLASSES = 10
PARTS = ("encoder", "decoder", "head")


def _conv(k, c_in, c_out, name):
    return LayerSpec("conv", kernel=k, c_in=c_in, c_out=c_out, name=name)


def _dense(n_in, n_out, name):
    return LayerSpec("dense", c_in=n_in, c_out=n_out, name=name)


RELU = LayerSpec("relu")
SIGMOID = LayerSpec("sigmoid")
SOFTMAX = LayerSpec("softmax")
POOL = LayerSpec("maxpool")
UP = LayerSpec("upsample")


@dataclass(frozen=True)
class Architecture:
    """Layer lists for encoder, decoder (may be empty) and prediction head."""

    name: str
    encoder: tuple[LayerSpec, ...]
    head: tuple[LayerSpec, ...]
    decoder: tuple[LayerSpec, ...] = ()
    input_shape: tuple[int, int, int] = INPUT_SHAPE

    @property
    def has_decoder(self) -> bool:
        return bool(self.decoder)

    def part(self, name: str) -> tuple[LayerSpec, ...]:
        return getattr(self, name)

    def part_size(self, name: str) -> int:
        return sum(s.param_count for s in self.part(name))

    @property
    def param_count(self) -> int:
        return sum(self.part_size(p) for p in PARTS)

    def segments(self) -> dict[str, slice]:
        """phi / theta / psi order in the flat vector."""
        out, start = {}, 0
        for part in PARTS:
            size = self.part_size(part)
            out[part] = slice(start, start + size)
            start += size
        return out

    def latent_shape(self) -> tuple[int, ...]:
        h, w, c = self.input_shape
        if not self.encoder:
            return (h * w * c,)
        for spec in self.encoder:
            if spec.kind == "conv":
                c = spec.c_out
            elif spec.kind == "maxpool":
                h, w = h // 2, w // 2
        return (h, w, c)

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.latent_shape()))


def gcae_arch(filters=(32, 16, 8)) -> Architecture:
    f1, f2, f3 = filters
    enc = (_conv(3, 3, f1, "enc1"), RELU, POOL, _conv(3, f1, f2, "enc2"), RELU, POOL,
           _conv(3, f2, f3, "enc3"), RELU)
    dec = (UP, _conv(5, f3, 16, "dec1"), RELU, UP, _conv(5, 16, 32, "dec2"), RELU,
           _conv(5, 32, 3, "dec3"), SIGMOID)
    head = (_dense(25 * f3, 128, "fc1"), RELU, _dense(128, NUM_CLASSES, "fc2"), SOFTMAX)
    return Architecture("gcae", enc, head, dec)


def fl_cnn_arch() -> Architecture:
    g = gcae_arch()
    return Architecture("fl-cnn", g.encoder, g.head)


def fl_cnn_large_arch() -> Architecture:
    g = gcae_arch((64, 32, 16))
    return Architecture("fl-cnn-large", g.encoder, g.head)


def fl_mlp_arch() -> Architecture:
    n_in = int(np.prod(INPUT_SHAPE))
    head = (_dense(n_in, 1200, "fc1"), RELU, _dense(1200, 100, "fc2"), RELU,
            _dense(100, NUM_CLASSES, "fc3"), SOFTMAX)
    return Architecture("fl-mlp", (), head)


ARCHITECTURES = {
    "gcae": gcae_arch,
    "fl-cnn": fl_cnn_arch,
    "fl-cnn-large": fl_cnn_large_arch,
    "fl-mlp": fl_mlp_arch,
}


def get_arch(arch) -> Architecture:
    if isinstance(arch, Architecture):
        return arch
    try:
        return ARCHITECTURES[str(arch).lower()]()
    except KeyError:
        raise ConfigurationError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None


def param_count(arch) -> int:
    return get_arch(arch).param_count


def init_params(arch, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases.

    Encoder and head draw from one stream and the decoder from another, so a
    GCAE and the decoder-less CNN with the same seed share phi and psi.
    """
    arch = get_arch(arch)
    flat = np.zeros(arch.param_count)
    segs = arch.segments()
    streams = {"main": np.random.default_rng([seed, 0]), "decoder": np.random.default_rng([seed, 1])}
    for part in ("encoder", "head", "decoder"):
        rng = streams["decoder" if part == "decoder" else "main"]
        pos = segs[part].start
        for spec in arch.part(part):
            if not spec.param_count:
                continue
            fan_in, fan_out = spec.fans
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            n_w = int(np.prod(spec.weight_shape))
            flat[pos:pos + n_w] = rng.uniform(-limit, limit, n_w)
            pos += spec.param_count
    return flat


# ---------------------------------------------------------------------------


class _Stack:
    """A chain of layers reading weights from ``flat[offset:]``."""

    def __init__(self, specs, offset: int):
        self.specs = tuple(specs)
        self.views = []
        pos = offset
        for spec in self.specs:
            n_w = int(np.prod(spec.weight_shape)) if spec.param_count else 0
            self.views.append((pos, pos + n_w, pos + spec.param_count))
            pos += spec.param_count
        # an upsample feeding a conv is evaluated as one fused layer
        self.fused = set()
        for i in range(len(self.specs) - 1):
            if self.specs[i].kind == "upsample" and self.specs[i + 1].kind == "conv":
                self.fused.add(i)

    def _wb(self, flat, i):
        a, b, c = self.views[i]
        return flat[a:b].reshape(self.specs[i].weight_shape), flat[b:c]

    def forward(self, flat, x):
        """Returns ``(output, cache)``; the trailing softmax is left to the loss."""
        cache = []
        skip = False
        for i, spec in enumerate(self.specs):
            if skip:
                skip = False
                continue
            inp = x
            if i in self.fused:
                w, b = self._wb(flat, i + 1)
                x, aux = nn._upconv_forward(x, w, b)
                cache.append(("upconv", i + 1, inp, aux))
                skip = True
            elif spec.kind == "conv":
                w, b = self._wb(flat, i)
                if x.shape[-1] != spec.c_in:
                    raise ConfigurationError(f"{spec.label}: input has {x.shape[-1]} channels, expected {spec.c_in}")
                x, aux = nn._conv_forward(x, w, b)
                cache.append(("conv", i, inp, aux))
            elif spec.kind == "dense":
                w, b = self._wb(flat, i)
                if x.ndim > 2:
                    x = x.reshape(x.shape[0], -1)
                    inp = x
                x = nn.dense_forward(x, w, b, name=spec.label)
                cache.append(("dense", i, inp, None))
            elif spec.kind == "relu":
                x = nn.relu(x)
                cache.append(("relu", i, None, x))
            elif spec.kind == "sigmoid":
                x = nn.sigmoid(x)
                cache.append(("sigmoid", i, None, x))
            elif spec.kind == "maxpool":
                x, idx = nn.maxpool2x2_forward(x, name=spec.label)
                cache.append(("maxpool", i, None, idx))
            elif spec.kind == "upsample":
                x = nn.upsample2x2_forward(x)
                cache.append(("upsample", i, None, None))
            elif spec.kind == "softmax":
                if i != len(self.specs) - 1:
                    raise ConfigurationError("softmax is only supported as the last layer")
        return x, cache

    def backward(self, flat, grad_flat, cache, g, need_input_grad=True):
        for n, (kind, i, inp, aux) in enumerate(reversed(cache)):
            first = n == len(cache) - 1
            want_dx = need_input_grad or not first
            if kind in ("conv", "upconv", "dense"):
                w, _ = self._wb(flat, i)
                if kind == "conv":
                    dx, dw, db = nn.conv2d_backward(g, inp, w, need_input_grad=want_dx, cols=aux)
                elif kind == "upconv":
                    dx, dw, db = nn.upconv2d_backward(g, inp, w, need_input_grad=want_dx, aux=aux)
                else:
                    dx, dw, db = nn.dense_backward(g, inp, w, need_input_grad=want_dx)
                a, b, c = self.views[i]
                grad_flat[a:b] += dw.ravel()
                grad_flat[b:c] += db
                g = dx
            elif kind == "relu":
                g = _kernels.relu_mask_(np.ascontiguousarray(g), aux)
            elif kind == "sigmoid":
                g = nn.sigmoid_backward(g, aux)
            elif kind == "maxpool":
                g = nn.maxpool2x2_backward(g, aux)
            elif kind == "upsample":
                g = nn.upsample2x2_backward(g)
        return g


@dataclass
class BatchLoss:
    loss: float
    grad: np.ndarray
    prediction_loss: float
    reconstruction_loss: float
    extras: dict = field(default_factory=dict)


class Network:
    """Encoder / decoder / head evaluated against a flat parameter vector."""

    def __init__(self, arch):
        self.arch = get_arch(arch)
        segs = self.arch.segments()
        self.segments = segs
        self.encoder = _Stack(self.arch.encoder, segs["encoder"].start)
        self.decoder = _Stack(self.arch.decoder, segs["decoder"].start)
        self.head = _Stack(self.arch.head, segs["head"].start)

    @property
    def param_count(self) -> int:
        return self.arch.param_count

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.arch.input_shape:
            raise ConfigurationError(f"expected input of shape {self.arch.input_shape}, got {x.shape[1:]}")
        return x, single

    def _check_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise ConfigurationError(f"{self.arch.name} expects {self.param_count} parameters, got {flat.size}")
        return flat

    def encode(self, flat, x) -> np.ndarray:
        """Flattened latent vectors, shape ``(N, latent_dim)``."""
        flat = self._check_params(flat)
        x, single = self._check_input(x)
        z, _ = self.encoder.forward(flat, x)
        z = z.reshape(z.shape[0], -1)
        return z[0] if single else z

    def head_logits(self, flat, z) -> np.ndarray:
        flat = self._check_params(flat)
        logits, _ = self.head.forward(flat, np.atleast_2d(z))
        return logits

    def forward(self, flat, x):
        """``(latent, reconstruction, class_probs)``; reconstruction is None
        for decoder-less architectures."""
        flat = self._check_params(flat)
        x, single = self._check_input(x)
        z, _ = self.encoder.forward(flat, x)
        recon = self.decoder.forward(flat, z)[0] if self.arch.has_decoder else None
        probs = nn.softmax(self.head.forward(flat, z.reshape(z.shape[0], -1))[0])
        z = z.reshape(z.shape[0], -1)
        if single:
            return z[0], None if recon is None else recon[0], probs[0]
        return z, recon, probs

    def predict_proba(self, flat, x, batch_size: int = 500) -> np.ndarray:
        """Class probabilities from encoder and head only."""
        flat = self._check_params(flat)
        x, _ = self._check_input(x)
        out = [nn.softmax(self.head_logits(flat, self.encode(flat, x[i:i + batch_size])))
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, NUM_CLASSES))

    def loss_and_grad(self, flat, x, y, lam: float = 0.01) -> BatchLoss:
        """Batch-mean of ``CE + lam * sum((x - recon)**2)`` and its gradient.

        The head gradient comes only from the prediction term and the decoder
        gradient only from the reconstruction term; the encoder gets both.
        """
        flat = self._check_params(flat)
        x, _ = self._check_input(x)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        n = x.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        if y.shape[0] != n:
            raise ConfigurationError(f"{n} inputs but {y.shape[0]} labels")
        grad = np.zeros_like(flat)
        z, enc_cache = self.encoder.forward(flat, x)
        logits, head_cache = self.head.forward(flat, z.reshape(n, -1))
        ce, dlogits = nn.softmax_crossentropy(logits, y)
        dz = self.head.backward(flat, grad, head_cache, dlogits / n).reshape(z.shape)
        rec = 0.0
        if self.arch.has_decoder and lam != 0.0:
            recon, dec_cache = self.decoder.forward(flat, z)
            rec, drecon = nn.mse_loss(recon, x)
            dz = dz + self.decoder.backward(flat, grad, dec_cache, drecon * (lam / n))
        if self.arch.encoder:
            self.encoder.backward(flat, grad, enc_cache, dz, need_input_grad=False)
        return BatchLoss((ce + lam * rec) / n, grad, ce / n, rec / n)

    def activation_pattern(self, flat, x) -> str:
        """Digest of every ReLU on/off state and max-pool choice.  The loss is
        smooth in the parameters wherever this stays constant."""
        flat = self._check_params(flat)
        x, _ = self._check_input(x)
        h = hashlib.sha256()
        z, cache = self.encoder.forward(flat, x)
        caches = [cache, self.head.forward(flat, z.reshape(z.shape[0], -1))[1]]
        if self.arch.has_decoder:
            caches.append(self.decoder.forward(flat, z)[1])
        for c in caches:
            for kind, _, _, aux in c:
                if kind == "relu":
                    h.update(np.packbits(aux > 0).tobytes())
                elif kind == "maxpool":
                    h.update(aux.tobytes())
        return h.hexdigest()

    def head_loss_and_grad(self, flat, z, y) -> tuple[float, np.ndarray]:
        """Cross-entropy of the head alone on latent inputs; gradient is zero
        outside the head segment."""
        flat = self._check_params(flat)
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        n = z.shape[0]
        grad = np.zeros_like(flat)
        logits, cache = self.head.forward(flat, z)
        ce, dlogits = nn.softmax_crossentropy(logits, y)
        self.head.backward(flat, grad, cache, dlogits / n, need_input_grad=False)
        return ce / n, grad


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"GCAEFLT1"
_HEADER = struct.Struct("<8s16sQ")


def params_digest(flat) -> str:
    return hashlib.sha256(np.ascontiguousarray(flat, dtype="<f8").tobytes()).hexdigest()


def save_checkpoint(path, flat, arch, metadata: dict | None = None) -> Path:
    """Binary header (magic, arch id, count) + little-endian float64 values,
    with a JSON sidecar ``<path>.json``."""
    arch = get_arch(arch)
    flat = np.ascontiguousarray(flat, dtype="<f8")
    if flat.size != arch.param_count:
        raise ConfigurationError(f"{arch.name} has {arch.param_count} parameters, got {flat.size}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, arch.name.encode().ljust(16, b"\0"), flat.size))
        fh.write(flat.tobytes())
    meta = {"arch": arch.name, "param_count": int(flat.size), "sha256": params_digest(flat),
            "segments": {k: [v.start, v.stop] for k, v in arch.segments().items()}}
    meta.update(metadata or {})
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[np.ndarray, Architecture]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, arch_id, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
    arch = get_arch(arch_id.rstrip(b"\0").decode())
    if count != arch.param_count:
        raise ValueError(f"{path}: header says {count} values, {arch.name} needs {arch.param_count}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {8 * count} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64), arch
