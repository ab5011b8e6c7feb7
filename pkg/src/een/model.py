"""Encoder/decoder forward model with residual-error latent conditioning.

The predictor is ``f(x, z) = decode(encode(x) + W z)``. ``W`` maps a latent
vector to one value per encoder output channel, broadcast over spatial
positions. ``phi`` maps a residual ``y - f_frozen(x, 0)`` to a latent.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, LatentError, LifecycleError
from .tensor import Tensor


class _ZeroLatent:
    """Marker for the deterministic setting: the ``W z`` term is skipped."""

    def __repr__(self):
        return "ZERO_LATENT"


ZERO_LATENT = _ZeroLatent()


@dataclass
class ArchSpec:
    kind: str = "conv"
    input_shape: tuple = (4, 16, 16)
    target_shape: tuple = (1, 16, 16)
    layers: int = 3
    feature_maps: int = 64
    kernel: int = 4
    stride: int = 2
    pad: int = 1
    hidden: int = 64
    latent_dim: int = 2
    batch_norm: bool = True
    output_activation: str = "tanh"
    phi_layers: int = 2
    phi_feature_maps: int = 32
    phi_hidden: int = 64

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.target_shape = tuple(int(s) for s in self.target_shape)

    @property
    def target_size(self) -> int:
        return math.prod(self.target_shape)

    def validate(self):
        if self.kind not in ("conv", "mlp"):
            raise ConfigError(f"unknown architecture kind {self.kind!r}", "model.kind")
        if self.layers < 1:
            raise ConfigError("must be >= 1", "model.layers")
        if self.latent_dim < 1:
            raise ConfigError("must be >= 1", "model.latent_dim")
        if self.latent_dim >= self.target_size:
            raise ConfigError(
                f"latent_dim {self.latent_dim} must be below the flattened target size {self.target_size}",
                "model.latent_dim")
        if self.output_activation not in ("tanh", "none"):
            raise ConfigError(f"unknown activation {self.output_activation!r}", "model.output_activation")
        if self.kind == "conv":
            if len(self.input_shape) != 3 or len(self.target_shape) != 3:
                raise ConfigError("conv architecture needs (C, H, W) input and target shapes", "model.kind")
            size = self.input_shape[1:]
            for _ in range(self.layers):
                size = tuple(T.conv_output_size(s, self.kernel, self.stride, self.pad) for s in size)
            if min(size) < 1:
                raise ConfigError(f"encoder collapses input {self.input_shape} to {size}", "model.layers")
            for _ in range(self.layers):
                size = tuple(T.conv_transpose_output_size(s, self.kernel, self.stride, self.pad) for s in size)
            if size != self.target_shape[1:]:
                raise ConfigError(
                    f"decoder output {size} does not match target spatial shape {self.target_shape[1:]}",
                    "model.layers")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["target_shape"] = list(self.target_shape)
        return d


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear:
    def __init__(self, rng, fan_in, fan_out, bias=True):
        self.weight = Tensor(_uniform(rng, (fan_out, fan_in), fan_in), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (fan_out,), fan_in), requires_grad=True) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv:
    """Strided conv (or transposed conv) with an optional per-channel bias."""

    def __init__(self, rng, c_in, c_out, k, stride, pad, bias, transpose=False):
        self.stride, self.pad, self.transpose = stride, pad, transpose
        fan_in = c_in * k * k
        shape = (c_in, c_out, k, k) if transpose else (c_out, c_in, k, k)
        self.weight = Tensor(_uniform(rng, shape, fan_in), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (c_out, 1, 1), fan_in), requires_grad=True) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def __call__(self, x):
        op = T.conv_transpose2d if self.transpose else T.conv2d
        out = op(x, self.weight, self.stride, self.pad)
        return out + self.bias if self.bias is not None else out


class BatchNorm:
    def __init__(self, channels):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = T.BatchNormState.create(channels)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def load_buffers(self, arrays):
        self.state.running_mean = np.array(arrays["running_mean"])
        self.state.running_var = np.array(arrays["running_var"])

    def __call__(self, x, train):
        return T.batch_norm(x, self.gamma, self.beta, self.state, "train" if train else "eval")


class Sequential:
    """Layers applied in order; strings name activations (or ``"flatten"``)."""

    def __init__(self, layers):
        self.layers = layers

    def named_layers(self):
        return [(f"{i}.{type(layer).__name__.lower()}", layer) for i, layer in enumerate(self.layers)]

    def params(self) -> dict[str, Tensor]:
        out = {}
        for lname, layer in self.named_layers():
            if hasattr(layer, "params"):
                for pname, p in layer.params().items():
                    out[f"{lname}.{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self.named_layers():
            if isinstance(layer, BatchNorm):
                for bname, b in layer.buffers().items():
                    out[f"{lname}.{bname}"] = b
        return out

    def load_buffers(self, arrays: dict[str, np.ndarray]):
        for lname, layer in self.named_layers():
            if isinstance(layer, BatchNorm):
                layer.load_buffers({k: arrays[f"{lname}.{k}"] for k in ("running_mean", "running_var")})

    def __call__(self, x, train=False):
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                x = layer(x, train)
            elif layer == "flatten":
                x = T.reshape(x, (x.shape[0], -1))
            elif isinstance(layer, str):
                x = T.activation(x, layer)
            else:
                x = layer(x)
        return x


class EncoderDecoder:
    """The encoder ``f1`` and decoder ``f2`` of the forward model."""

    def __init__(self, arch: ArchSpec, rng: np.random.Generator):
        self.arch = arch
        bn = arch.batch_norm
        enc, dec = [], []
        if arch.kind == "conv":
            f, k, s, p = arch.feature_maps, arch.kernel, arch.stride, arch.pad
            c = arch.input_shape[0]
            for _ in range(arch.layers):
                enc.append(Conv(rng, c, f, k, s, p, bias=not bn))
                if bn:
                    enc.append(BatchNorm(f))
                enc.append("relu")
                c = f
            for i in range(arch.layers):
                last = i == arch.layers - 1
                c_out = arch.target_shape[0] if last else f
                dec.append(Conv(rng, f, c_out, k, s, p, bias=last or not bn, transpose=True))
                if not last:
                    if bn:
                        dec.append(BatchNorm(f))
                    dec.append("relu")
            self.channels = f
        else:
            h = arch.hidden
            d = math.prod(arch.input_shape)
            enc.append("flatten")
            for _ in range(arch.layers):
                enc.append(Linear(rng, d, h, bias=not bn))
                if bn:
                    enc.append(BatchNorm(h))
                enc.append("relu")
                d = h
            for i in range(arch.layers):
                last = i == arch.layers - 1
                out = arch.target_size if last else h
                dec.append(Linear(rng, h, out, bias=last or not bn))
                if not last:
                    if bn:
                        dec.append(BatchNorm(h))
                    dec.append("relu")
            self.channels = h
        dec.append(arch.output_activation)
        self.encoder = Sequential(enc)
        self.decoder = Sequential(dec)

    def params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.params().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.buffers().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.buffers().items()})
        return out

    def load_buffers(self, arrays):
        self.encoder.load_buffers({k[len("encoder."):]: v for k, v in arrays.items() if k.startswith("encoder.")})
        self.decoder.load_buffers({k[len("decoder."):]: v for k, v in arrays.items() if k.startswith("decoder.")})

    def decode(self, h: Tensor, train=False) -> Tensor:
        out = self.decoder(h, train)
        return T.reshape(out, (out.shape[0],) + self.arch.target_shape)


class LatentInjector:
    """``W``: latent -> one additive value per encoder channel."""

    def __init__(self, channels: int, latent_dim: int, rng: np.random.Generator):
        self.latent_dim = latent_dim
        self.W = Tensor(_uniform(rng, (channels, latent_dim), latent_dim), requires_grad=True)

    def params(self):
        return {"W": self.W}

    def __call__(self, z: Tensor, spatial: bool) -> Tensor:
        wz = T.linear(z, self.W)
        return T.reshape(wz, wz.shape + (1, 1)) if spatial else wz


PHI_OUTPUT_SCALE = 0.01


class PhiNetwork(Sequential):
    """Residual encoder: conv trunk (conv archs only), then two dense layers.

    The output layer starts scaled by ``PHI_OUTPUT_SCALE`` so early latents
    are small and the conditional pass starts near the deterministic one.
    """

    def __init__(self, arch: ArchSpec, rng: np.random.Generator):
        layers = []
        if arch.kind == "conv" and arch.phi_layers > 0:
            c, size = arch.target_shape[0], arch.target_shape[1:]
            for _ in range(arch.phi_layers):
                layers += [Conv(rng, c, arch.phi_feature_maps, arch.kernel, arch.stride, arch.pad, bias=True),
                           "relu"]
                c = arch.phi_feature_maps
                size = tuple(T.conv_output_size(s, arch.kernel, arch.stride, arch.pad) for s in size)
            flat = c * math.prod(size)
        else:
            flat = arch.target_size
        out = Linear(rng, arch.phi_hidden, arch.latent_dim)
        out.weight.data *= PHI_OUTPUT_SCALE
        out.bias.data *= PHI_OUTPUT_SCALE
        layers += ["flatten", Linear(rng, flat, arch.phi_hidden), "relu", out]
        super().__init__(layers)


@dataclass(eq=False)
class ModelBundle:
    """Live weights ``net``/``injector``/``phi`` plus the frozen ``net_minus``."""

    arch: ArchSpec
    net: EncoderDecoder
    injector: LatentInjector
    phi: PhiNetwork
    mode: str = "snapshot"
    kind: str = "een"
    net_minus: EncoderDecoder | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, arch: ArchSpec, seed: int = 0, mode: str = "snapshot", kind: str = "een") -> "ModelBundle":
        if mode not in ("snapshot", "joint"):
            raise ConfigError(f"unknown bundle mode {mode!r}", "model.mode")
        arch.validate()
        rng = np.random.default_rng(seed)
        net = EncoderDecoder(arch, rng)
        phi = PhiNetwork(arch, rng)
        return cls(arch, net, LatentInjector(net.channels, arch.latent_dim, rng), phi, mode, kind)

    def theta_params(self) -> dict[str, Tensor]:
        out = {f"theta.{k}": v for k, v in self.net.params().items()}
        out["W"] = self.injector.W
        return out

    def net_params(self) -> dict[str, Tensor]:
        return {f"theta.{k}": v for k, v in self.net.params().items()}

    def phi_params(self) -> dict[str, Tensor]:
        return {f"phi.{k}": v for k, v in self.phi.params().items()}

    def all_params(self) -> dict[str, Tensor]:
        return {**self.theta_params(), **self.phi_params()}

    def frozen_net(self) -> EncoderDecoder:
        """Weights used for the residual pass."""
        if self.mode == "joint":
            return self.net
        if self.net_minus is None:
            raise LifecycleError("residual requested before snapshot was taken")
        return self.net_minus


def _latent_tensor(z, n: int, latent_dim: int) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(z)
    if z.ndim == 1:
        if z.shape[0] != latent_dim:
            raise LatentError(f"latent has length {z.shape[0]}, expected {latent_dim}")
        return Tensor(np.broadcast_to(z.data, (n, latent_dim))) if not z.tracked else \
            T.add(Tensor(np.zeros((n, latent_dim))), z)
    if z.ndim != 2 or z.shape[1] != latent_dim or z.shape[0] != n:
        raise LatentError(f"latent shape {z.shape} incompatible with batch {n} and latent_dim {latent_dim}")
    return z


def forward(bundle: ModelBundle, x, z=ZERO_LATENT, train: bool = False,
            net: EncoderDecoder | None = None) -> Tensor:
    """``decode(encode(x) + W z)``; with ``ZERO_LATENT`` the injection is skipped."""
    net = bundle.net if net is None else net
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(x.shape[1:]) != bundle.arch.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} does not match {bundle.arch.input_shape}")
    h = net.encoder(x, train)
    if z is not ZERO_LATENT:
        zt = _latent_tensor(z, x.shape[0], bundle.injector.latent_dim)
        h = h + bundle.injector(zt, spatial=h.ndim == 4)
    return net.decode(h, train)


def deterministic_prediction(bundle: ModelBundle, x) -> np.ndarray:
    """``f(x, 0)`` through the residual-pass weights in eval mode, untracked."""
    with T.no_grad():
        return forward(bundle, x, ZERO_LATENT, train=False, net=bundle.frozen_net()).data


def residual(bundle: ModelBundle, x, y) -> Tensor:
    """Detached ``y - f_frozen(x, 0)``."""
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    return Tensor(y - deterministic_prediction(bundle, x))


def encode_error(bundle: ModelBundle, res, train: bool = False) -> Tensor:
    """Latent ``phi(residual)``, shape (N, latent_dim)."""
    res = res if isinstance(res, Tensor) else Tensor(res)
    if tuple(res.shape[1:]) != bundle.arch.target_shape:
        raise DimensionError(f"residual shape {res.shape[1:]} does not match target {bundle.arch.target_shape}")
    return bundle.phi(res, train)


def snapshot(bundle: ModelBundle) -> ModelBundle:
    """Freeze a deep copy of the live encoder/decoder as ``net_minus``.

    Joint-mode bundles keep using their live weights and are returned as is.
    """
    if bundle.mode == "joint":
        return bundle
    frozen = copy.deepcopy(bundle.net)
    for p in frozen.params().values():
        p.requires_grad = False
        p.grad = None
    bundle.net_minus = frozen
    return bundle


def reinitialize_net(bundle: ModelBundle, seed: int) -> None:
    """Replace the live encoder/decoder with fresh weights (separate-network option)."""
    bundle.net = EncoderDecoder(bundle.arch, np.random.default_rng([seed, 1]))


def net_state(net: EncoderDecoder) -> dict[str, np.ndarray]:
    out = {k: v.data for k, v in net.params().items()}
    out.update({f"buffer.{k}": v for k, v in net.buffers().items()})
    return out


def checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def params_checksum(params: dict[str, Tensor]) -> str:
    return checksum({k: v.data for k, v in params.items()})
